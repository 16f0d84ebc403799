import json

import pytest

from dslp.data import gen_length_task, gen_multimodal_task
from dslp.dslp import DslpConfig
from dslp.errors import ContractError
from dslp.metrics import bleu
from dslp.train import TrainConfig, decode, train
from dslp.traces import collect_traces, read_traces, render, render_many, trace_metrics, write_traces
from dslp.transformer import ModelConfig

SMALL = ModelConfig(num_encoder_layers=1, num_decoder_layers=3, model_dim=16, ffn_dim=32, num_heads=2, max_len=24)


@pytest.fixture(scope="module", params=["nat", "ctc"])
def traced(request):
    # Length-task targets can outgrow twice the source, which CTC cannot emit.
    corpus = gen_length_task(40, seed=2) if request.param == "nat" else gen_multimodal_task(40, seed=2)
    cfg = TrainConfig(model=SMALL, base=request.param, max_steps=15, lr=3e-3, warmup_steps=5, max_tokens=64,
                      dslp=DslpConfig(mixing_ratio=0.3))
    params, _ = train(cfg, corpus)
    return params, corpus, collect_traces(params, corpus)


def test_records_match_decoding(traced):
    params, corpus, records = traced
    outs = decode(params, [s for s, _ in corpus.encoded()]).outputs
    assert len(records) == len(corpus)
    for r, o in zip(records, outs):
        assert r["final"] == corpus.vocab.decode(o)
        assert r["outputs"][-1] == r["final"]
        assert len(r["layers"]) == 3
        assert len({len(l) for l in r["layers"]}) == 1


def test_ctc_layers_show_blanks_and_collapse(traced):
    params, corpus, records = traced
    if params.meta["base"] != "ctc":
        pytest.skip("blank rendering is specific to CTC models")
    for r in records:
        assert len(r["layers"][0]) == 2 * len(r["src"])
        assert all(tok not in ("<pad>", "<s>", "</s>") for tok in r["outputs"][0])


def test_file_round_trip(traced, tmp_path):
    _, _, records = traced
    assert write_traces(records, tmp_path / "t.jsonl") == len(records)
    assert read_traces(tmp_path / "t.jsonl") == records


def test_metrics_final_row_matches_bleu(traced):
    _, _, records = traced
    rows = trace_metrics(records, "m")
    assert [r.layer for r in rows] == ["1", "2", "3", "final"]
    assert rows[0].change_rate is None and rows[1].change_rate is not None
    refs = [r["ref"] for r in records]
    assert rows[-1].bleu == bleu([r["final"] for r in records], refs)
    assert rows[-2].bleu == rows[-1].bleu


def test_strict_bleu_never_exceeds_smoothed(traced):
    _, _, records = traced
    smooth = trace_metrics(records, "m")
    strict = trace_metrics(records, "m", smooth=False)
    assert all(a.bleu >= b.bleu for a, b in zip(smooth, strict))


@pytest.mark.parametrize("content, message", [
    ("", "empty"),
    ("{not json\n", "not a JSON record"),
    (json.dumps({"src": [], "ref": []}) + "\n", "lacks"),
])
def test_bad_trace_files(tmp_path, content, message):
    path = tmp_path / "t.jsonl"
    path.write_text(content)
    with pytest.raises(ContractError, match=message):
        read_traces(path)


def test_reference_count_mismatch(traced):
    _, _, records = traced
    with pytest.raises(ContractError):
        trace_metrics(records, "m", references=[["x"]])


def test_render_layout():
    record = {"index": 4, "src": ["d2", "d1"], "ref": ["u2", "u2", "u1"],
              "layers": [["u2", "u2", "u2"], ["u2", "u2", "u1"]], "outputs": [], "final": []}
    assert render(record).splitlines() == [
        "Source:    d2 d1",
        "Layer 1:   u2 u2 u2",
        "Layer 2:   u2 u2 u1",
        "Reference: u2 u2 u1",
    ]
    assert render_many([record]).startswith("# sentence 4\nSource:")
    long = dict(record, src=["d1"] * 60)
    assert render(long, max_width=20).splitlines()[0].endswith("...")
