import itertools
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest

from dslp import tensor as T
from dslp.ctc import (
    CtcConfig,
    best_alignment,
    collapse,
    ctc_decode,
    ctc_decode_batch,
    ctc_dslp_step,
    ctc_loss,
    ctc_loss_batch,
    fallback_token,
    min_slots,
    slot_mask,
    viterbi_alignment,
)
from dslp.data import BLANK, make_batch
from dslp.dslp import DslpConfig, dslp_forward
from dslp.errors import ConfigError, InfeasibleAlignmentError
from dslp.tensor import Tensor
from dslp.tensor.gradcheck import check_gradients
from dslp.tensor.ops import _log_softmax_np
from dslp.transformer import init_params

# Letters for readable alignments: "_" is the blank.
SYM = {"_": BLANK, "a": 4, "b": 5, "c": 6}


def ids(text):
    return [SYM[ch] for ch in text]


@lru_cache(maxsize=None)
def _alignments(n_slots, n_sym):
    """All alignments over symbols 0..n_sym-1 (0 is the blank) and their collapses."""
    paths = np.array(list(itertools.product(range(n_sym), repeat=n_slots)), dtype=np.int64)
    keys = [tuple(collapse(p, blank=0)) for p in paths]
    return paths, keys


def _brute_force(log_probs, target):
    """(log Σ, log max) over every alignment that collapses to ``target``."""
    paths, keys = _alignments(*log_probs.shape)
    scores = log_probs[np.arange(log_probs.shape[0]), paths].sum(axis=1)
    hit = np.array([k == tuple(target) for k in keys])
    chosen = scores[hit]
    return np.logaddexp.reduce(chosen), chosen.max()


class TestCollapse:
    @pytest.mark.parametrize("align, want", [
        ("__aabb_c", "abc"),
        ("____", ""),
        ("a_a", "aa"),
        ("aaa", "a"),
        ("ab", "ab"),
        ("", ""),
    ])
    def test_examples(self, align, want):
        assert collapse(ids(align)) == ids(want)

    @pytest.mark.parametrize("seq", ["abc", "abab", "cab"])
    def test_idempotent_on_clean_sequences(self, seq):
        assert collapse(collapse(ids(seq))) == collapse(ids(seq)) == ids(seq)

    def test_min_slots_counts_separators(self):
        assert min_slots(ids("abc")) == 3
        assert min_slots(ids("aab")) == 4
        assert min_slots(ids("aaa")) == 5


class TestLoss:
    def test_single_slot(self, rng):
        lg = rng.normal(size=(1, 7))
        loss = float(ctc_loss(Tensor(lg), ids("a")).data)
        assert loss == pytest.approx(-_log_softmax_np(lg, -1)[0, SYM["a"]], rel=1e-13)

    def test_two_slots_three_paths(self, rng):
        lg = rng.normal(size=(2, 7))
        p = np.exp(_log_softmax_np(lg, -1))
        a, blank = SYM["a"], BLANK
        want = -np.log(p[0, a] * p[1, a] + p[0, blank] * p[1, a] + p[0, a] * p[1, blank])
        assert float(ctc_loss(Tensor(lg), [a]).data) == pytest.approx(want, rel=1e-13)

    def test_dp_matches_brute_force(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for trial in range(1000):
            n_slots = int(rng.integers(1, 6))
            n_sym = int(rng.integers(2, 5))
            lp = _log_softmax_np(rng.normal(size=(n_slots, n_sym)) * 2, -1)
            _, keys = _alignments(n_slots, n_sym)
            target = []
            while not target:
                target = list(keys[rng.integers(len(keys))])
            want_sum, want_max = _brute_force(lp, target)
            got = float(ctc_loss(Tensor(lp), target, blank=0).data)
            worst = max(worst, abs(got + want_sum))
            _, score = viterbi_alignment(lp, target, blank=0)
            assert score == pytest.approx(want_max, abs=1e-9)
        assert worst < 1e-9

    def test_dp_matches_brute_force_long(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            lp = _log_softmax_np(rng.normal(size=(8, 4)), -1)
            _, keys = _alignments(8, 4)
            target = keys[rng.integers(len(keys))] or (1,)
            want_sum, want_max = _brute_force(lp, target)
            assert float(ctc_loss(Tensor(lp), target, blank=0).data) == pytest.approx(-want_sum, abs=1e-9)
            assert viterbi_alignment(lp, target, blank=0)[1] == pytest.approx(want_max, abs=1e-9)

    @pytest.mark.parametrize("n_slots", [1, 2, 3, 4])
    def test_probabilities_sum_below_one(self, rng, n_slots):
        lp = _log_softmax_np(rng.normal(size=(n_slots, 3)), -1)
        _, keys = _alignments(n_slots, 3)
        total = 0.0
        for target in set(keys):
            if target:
                p = np.exp(-float(ctc_loss(Tensor(lp), target, blank=0).data))
                assert 0.0 < p <= 1.0
                total += p
        all_blank = np.exp(lp[:, 0].sum())
        assert total <= 1.0
        assert total == pytest.approx(1.0 - all_blank, abs=1e-12)

    def test_gradient(self, rng):
        lg = Tensor(rng.normal(size=(6, 7)), requires_grad=True)
        assert check_gradients(lambda: ctc_loss(lg, ids("aba")), [lg]) < 1e-4

    def test_batch_gradient_and_normalisation(self, rng):
        lg = Tensor(rng.normal(size=(2, 6, 7)), requires_grad=True)
        targets = [ids("ab"), ids("aca")]
        lens = np.array([4, 6])
        assert check_gradients(lambda: ctc_loss_batch(lg, lens, targets), [lg]) < 1e-4
        each = [float(ctc_loss(Tensor(lg.data[b, : lens[b]]), targets[b]).data) for b in range(2)]
        assert float(ctc_loss_batch(lg, lens, targets).data) == pytest.approx(sum(each) / 5, rel=1e-13)

    @pytest.mark.parametrize("n_slots, target", [(2, "abc"), (3, "aab"), (1, "aa")])
    def test_infeasible_raises(self, rng, n_slots, target):
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(Tensor(rng.normal(size=(n_slots, 7))), ids(target))
        with pytest.raises(InfeasibleAlignmentError):
            best_alignment(rng.normal(size=(n_slots, 7)), ids(target))


class TestAlignment:
    def test_dominant_path_is_returned(self):
        path = ids("_aab_b")
        lg = np.full((6, 7), -5.0)
        lg[np.arange(6), path] = 5.0
        assert best_alignment(lg, ids("abb")) == path

    def test_collapses_to_target(self, rng):
        for _ in range(50):
            lg = rng.normal(size=(8, 7)) * 3
            target = ids("".join(rng.choice(list("abc"), size=rng.integers(1, 4))))
            if min_slots(target) <= 8:
                assert collapse(best_alignment(lg, target)) == target


class TestDecode:
    def test_argmax_row_example(self):
        lg = np.zeros((8, 7))
        lg[np.arange(8), ids("__aabb_c")] = 1.0
        assert ctc_decode(lg) == ids("abc")

    def test_all_blank_is_empty_and_fallback_skips_reserved(self):
        lg = np.zeros((4, 7))
        lg[:, BLANK] = 5.0
        lg[:, 0] = 4.0
        lg[2, 5] = 1.0
        assert ctc_decode(lg) == []
        assert fallback_token(lg) == 5

    def test_tie_break_is_stable(self):
        lg = np.zeros((3, 7))
        assert ctc_decode(lg) == [0]
        assert ctc_decode(lg) == ctc_decode(lg.copy())

    def test_batch_decode_never_empty(self, tiny_params, rng):
        srcs = [list(rng.integers(4, 12, size=n)) for n in (2, 4, 5)]
        outs, trace, slot_lens = ctc_decode_batch(tiny_params, srcs, DslpConfig(enable_lp=False), CtcConfig(),
                                                 full_trace=True)
        assert slot_lens.tolist() == [4, 8, 10]
        assert all(len(o) >= 1 for o in outs)
        assert trace.final_tokens.shape == (3, 10)


class TestStep:
    @pytest.fixture
    def setup(self, tiny_config, rng):
        params = init_params(replace(tiny_config, with_fusion=True), seed=4)
        pairs = [(list(rng.integers(4, 12, size=4)), list(rng.integers(4, 12, size=3))) for _ in range(3)]
        return params, make_batch(pairs)

    def test_upsample_validation(self):
        with pytest.raises(ConfigError):
            CtcConfig(upsample=1).validate()
        assert slot_mask(np.array([2, 3]), 2).tolist() == [[False] * 4 + [True] * 2, [False] * 6]

    def test_zero_ratio_is_plain_training(self, setup):
        params, batch = setup
        cfg = DslpConfig()
        loss, per_layer, keep = ctc_dslp_step(params, batch, cfg, CtcConfig(), 0.0, np.random.default_rng(0))
        tmask = slot_mask(batch.src_lens, 2)
        trace = dslp_forward(params, batch.src, tmask, cfg, src_mask=batch.src_mask, training=True)
        targets = [list(batch.tgt[i, : batch.tgt_lens[i]]) for i in range(3)]
        want = [float(ctc_loss_batch(lg, batch.src_lens * 2, targets).data) for lg in trace.logits]
        assert per_layer == want
        assert float(loss.data) == sum(want)
        assert keep == [0, 1, 2]

    def test_full_ratio_feeds_viterbi_alignment(self, setup):
        params, batch = setup
        cfg = DslpConfig()
        loss, _, _ = ctc_dslp_step(params, batch, cfg, CtcConfig(), 1.0, np.random.default_rng(0))
        tmask = slot_mask(batch.src_lens, 2)
        with T.no_grad():
            first = dslp_forward(params, batch.src, tmask, cfg, src_mask=batch.src_mask).final_logits.data
        pseudo = np.full(tmask.shape, BLANK)
        for b in range(3):
            n = int(batch.src_lens[b]) * 2
            pseudo[b, :n] = best_alignment(first[b, :n], list(batch.tgt[b, : batch.tgt_lens[b]]))
        trace = dslp_forward(params, batch.src, tmask, cfg, pseudo, ~tmask, src_mask=batch.src_mask)
        for fb in trace.feedback:
            np.testing.assert_array_equal(fb[~tmask], pseudo[~tmask])
        targets = [list(batch.tgt[i, : batch.tgt_lens[i]]) for i in range(3)]
        want = sum(float(ctc_loss_batch(lg, batch.src_lens * 2, targets).data) for lg in trace.logits)
        assert float(loss.data) == pytest.approx(want, rel=1e-13)

    def test_infeasible_samples_are_skipped(self, tiny_config, caplog):
        params = init_params(tiny_config, seed=1)
        batch = make_batch([([4], [5, 5, 6]), ([4, 5], [6])])
        loss, _, keep = ctc_dslp_step(params, batch, DslpConfig(enable_lp=False), CtcConfig(), 0.0,
                                      np.random.default_rng(0))
        assert keep == [1]
        assert "infeasible" in caplog.text
        assert np.isfinite(float(loss.data))
