from dataclasses import replace

import numpy as np
import pytest

from dslp import tensor as T
from dslp.dslp import VANILLA, dslp_forward
from dslp.errors import ContractError, LengthError
from dslp.nat import length_logits, length_loss, nat_decode, nat_decode_batch, nat_forward, nat_loss, predict_length
from dslp.tensor import Tensor
from dslp.transformer import encode, init_params


@pytest.fixture
def nat_params(tiny_config):
    return init_params(replace(tiny_config, with_length_head=True), seed=5)


def _smoothed_nll_oracle(logits, target, eps, mask=None):
    """Per-token label-smoothed NLL by explicit loops."""
    B, L, V = logits.shape
    total, count = 0.0, 0
    for b in range(B):
        for t in range(L):
            if mask is not None and mask[b, t]:
                continue
            row = logits[b, t]
            lse = np.log(sum(np.exp(x) for x in row))
            logp = [x - lse for x in row]
            total += -(1 - eps) * logp[target[b, t]] - eps / V * sum(logp)
            count += 1
    return total / count


class TestLength:
    def test_untrained_prediction_in_range(self, nat_params, rng):
        src = rng.integers(4, 12, size=(6, 5))
        lens = predict_length(nat_params, encode(src, nat_params))
        assert lens.min() >= 1 and lens.max() <= nat_params.config.max_len

    def test_tie_goes_to_shorter_length(self, nat_params):
        p = nat_params.copy()
        p["len.W"].data[:] = 0.0
        p["len.b"].data[:] = 0.0
        p["len.b"].data[[4, 7]] = 1.0
        assert predict_length(p, encode([5, 6], p)).tolist() == [5]

    def test_length_loss_rejects_out_of_range(self, nat_params):
        lg = length_logits(nat_params, encode([5, 6], nat_params))
        with pytest.raises(LengthError):
            length_loss(lg, np.array([0]))
        with pytest.raises(LengthError):
            length_loss(lg, np.array([nat_params.config.max_len + 1]))


class TestForward:
    def test_logits_shape(self, nat_params, rng):
        src = rng.integers(4, 12, size=(2, 5))
        hidden, logits = nat_forward(nat_params, src, [7, 4])
        assert logits.shape == (2, 7, nat_params.config.vocab_size)
        assert len(hidden) == nat_params.config.num_decoder_layers

    def test_doubling_target_length_leaves_encoder_alone(self, nat_params, rng):
        src = rng.integers(4, 12, size=(1, 5))
        enc_before = encode(src, nat_params).E.data.copy()
        h3, l3 = nat_forward(nat_params, src, [3])
        h6, l6 = nat_forward(nat_params, src, [6])
        assert l3.shape[1] == 3 and l6.shape[1] == 6
        np.testing.assert_array_equal(encode(src, nat_params).E.data, enc_before)

    def test_deterministic(self, nat_params, rng):
        src = rng.integers(4, 12, size=(2, 5))
        a = nat_forward(nat_params, src, [4, 6])[1].data
        b = nat_forward(nat_params, src, [4, 6])[1].data
        np.testing.assert_array_equal(a, b)

    def test_over_length_target_rejected(self, nat_params):
        with pytest.raises(LengthError):
            nat_forward(nat_params, [5, 6], [nat_params.config.max_len + 1])

    def test_positions_are_conditionally_independent(self, nat_params, rng):
        # Without feedback, no token chosen at any slot can reach another slot's logits.
        src = rng.integers(4, 12, size=(1, 5))
        tmask = np.zeros((1, 6), dtype=bool)
        base = dslp_forward(nat_params, src, tmask, VANILLA).final_logits.data
        for forced in (4, 9):
            gt = np.full((1, 6), forced)
            mix = np.zeros((1, 6), dtype=bool)
            mix[0, 2] = True
            out = dslp_forward(nat_params, src, tmask, VANILLA, groundtruth=gt, mix=mix).final_logits.data
            np.testing.assert_array_equal(out, base)


class TestLoss:
    def test_perfect_logits_reach_smoothing_floor(self):
        V, eps = 6, 0.1
        target = np.array([[1, 4, 2]])
        q = np.full((1, 3, V), eps / V)
        q[0, np.arange(3), target[0]] += 1 - eps
        floor = -(q[0, 0] * np.log(q[0, 0])).sum()
        assert float(nat_loss(Tensor(np.log(q)), target, eps).data) == pytest.approx(floor, rel=1e-12)
        hard = np.where(q > 0.5, 50.0, -50.0)
        assert float(nat_loss(Tensor(hard), target, 0.0).data) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("eps", [0.0, 0.1, 0.3])
    def test_uniform_logits_give_log_v(self, eps):
        V = 9
        loss = nat_loss(Tensor(np.zeros((2, 4, V))), np.full((2, 4), 5), eps)
        assert float(loss.data) == pytest.approx(np.log(V), rel=1e-14)

    def test_matches_direct_summation(self, rng):
        logits = rng.normal(size=(2, 5, 7)) * 3
        target = rng.integers(0, 7, size=(2, 5))
        mask = np.zeros((2, 5), dtype=bool)
        mask[1, 3:] = True
        got = float(nat_loss(Tensor(logits), target, 0.1, mask).data)
        assert got == pytest.approx(_smoothed_nll_oracle(logits, target, 0.1, mask), abs=1e-12)

    def test_length_term_is_weighted(self, nat_params, rng):
        enc = encode(rng.integers(4, 12, size=(1, 4)), nat_params)
        lg = length_logits(nat_params, enc)
        logits, target = Tensor(np.zeros((1, 3, 12))), np.full((1, 3), 5)
        plain = float(nat_loss(logits, target).data)
        with_len = float(nat_loss(logits, target, length_lg=lg, lengths=np.array([3])).data)
        assert with_len - plain == pytest.approx(0.1 * float(length_loss(lg, np.array([3])).data), rel=1e-12)

    def test_length_mismatch_is_a_contract_error(self):
        with pytest.raises(ContractError):
            nat_loss(Tensor(np.zeros((1, 4, 6))), np.zeros((1, 3), dtype=int))


def test_untrained_decode_emits_valid_ids_of_predicted_length(nat_params, rng):
    srcs = [list(rng.integers(4, 12, size=n)) for n in (2, 5, 7)]
    outs, _, lens = nat_decode_batch(nat_params, srcs)
    for o, n in zip(outs, lens):
        assert len(o) == n
        assert all(0 <= x < nat_params.config.vocab_size for x in o)
    assert nat_decode(srcs[1], nat_params) == outs[1]


def test_decode_does_not_record_gradients(nat_params):
    with T.fresh_tape() as tape:
        nat_decode([5, 6, 7], nat_params)
    assert len(tape) == 0
