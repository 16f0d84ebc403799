from dataclasses import replace

import numpy as np
import pytest

from dslp.checkpoint import load_checkpoint, save_checkpoint
from dslp.errors import CheckpointError
from dslp.transformer import init_params


@pytest.fixture
def saved(tiny_params, tmp_path):
    tiny_params.vocab = ["<pad>", "<s>", "</s>", "_", "a", "b"]
    tiny_params.meta = {"base": "nat", "enable_lp": "True"}
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_params, path)
    return tiny_params, path


def test_round_trip_is_bitwise(saved):
    params, path = saved
    back = load_checkpoint(path, expected=params)
    assert back.config == params.config
    assert back.vocab == params.vocab
    assert back.meta == params.meta
    assert back.names() == params.names()
    for name in params.names():
        assert np.array_equal(back[name].data, params[name].data)
        assert back[name].data.tobytes() == params[name].data.tobytes()


def test_header_is_plain_text(saved):
    _, path = saved
    head = path.read_bytes().split(b"\nEND\n")[0].decode()
    assert head.startswith("DSLP-CHECKPOINT 1")
    assert "config.model_dim=16" in head
    assert "param head.W 12,16 " in head


@pytest.mark.parametrize("damage", ["magic", "header", "payload", "truncate"])
def test_corruption_rejected(saved, damage):
    _, path = saved
    blob = bytearray(path.read_bytes())
    if damage == "magic":
        blob[0:4] = b"XXXX"
    elif damage == "header":
        blob = blob.replace(b"config.model_dim=16", b"config.model_dim=1x")
    elif damage == "payload":
        blob[-3] ^= 0xFF
    else:
        blob = blob[:-8]
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_shape_mismatch_rejected(saved, tiny_config):
    _, path = saved
    other = init_params(replace(tiny_config, model_dim=8))
    with pytest.raises(CheckpointError, match="do not match"):
        load_checkpoint(path, expected=other)


def test_missing_parameter_rejected(saved, tiny_config):
    _, path = saved
    other = init_params(replace(tiny_config, with_fusion=True))
    with pytest.raises(CheckpointError, match="fuse.Wc"):
        load_checkpoint(path, expected=other)
