import json
import struct

import numpy as np
import pytest

from checkpoint_utils import checkpoint_sha256, load_checkpoint, load_model, save_checkpoint
from errors import CheckpointError
from transformer import ModelConfig, init_weights, weight_shapes


@pytest.fixture
def saved(tmp_path):
    config = ModelConfig(n_layers=1, n_heads=2, d_model=8, vocab_size=12, max_seq=16)
    path = tmp_path / "model.bin"
    save_checkpoint(init_weights(config, 1), config, path)
    return path, config


def test_save_load_save_is_byte_identical(saved, tmp_path):
    path, _ = saved
    weights, config = load_checkpoint(path)
    again = tmp_path / "again.bin"
    save_checkpoint(weights, config, again)
    assert again.read_bytes() == path.read_bytes()
    assert checkpoint_sha256(again) == checkpoint_sha256(path)


def test_loaded_weights_match(saved):
    path, config = saved
    weights, loaded_config = load_checkpoint(path)
    assert loaded_config == config
    expected = init_weights(config, 1)
    assert all(np.array_equal(weights[name], expected[name]) for name in expected)
    assert load_model(path).config == config


def test_truncated_payload(saved, tmp_path):
    path, _ = saved
    short = tmp_path / "short.bin"
    short.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="W_U"):
        load_checkpoint(short)


def test_trailing_bytes(saved, tmp_path):
    path, _ = saved
    longer = tmp_path / "long.bin"
    longer.write_bytes(path.read_bytes() + b"\0\0\0\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(longer)


def rewrite_header(path, target, edit):
    blob = path.read_bytes()
    (length,) = struct.unpack_from("<Q", blob)
    header = json.loads(blob[8:8 + length])
    edit(header)
    header_bytes = json.dumps(header).encode("utf-8")
    target.write_bytes(struct.pack("<Q", len(header_bytes)) + header_bytes + blob[8 + length:])
    return header


def test_header_entries_carry_one_byte_offset(saved, tmp_path):
    path, config = saved
    header = rewrite_header(path, tmp_path / "copy.bin", lambda h: None)
    expected = 0
    for name, shape in weight_shapes(config).items():
        assert set(header[name]) == {"dtype", "shape", "offset"}
        assert header[name]["offset"] == expected
        expected += 4 * int(np.prod(shape))


def test_header_shape_mismatch(saved, tmp_path):
    path, _ = saved
    broken = tmp_path / "broken.bin"
    rewrite_header(path, broken, lambda h: h["W_U"].update(shape=[12, 9]))
    with pytest.raises(CheckpointError) as excinfo:
        load_checkpoint(broken)
    assert excinfo.value.tensor == "W_U"


@pytest.mark.parametrize("offset", [-4, "0", None, True])
def test_malformed_offset(saved, tmp_path, offset):
    path, _ = saved
    broken = tmp_path / "broken.bin"
    rewrite_header(path, broken, lambda h: h["ln_final.gain"].update(offset=offset))
    with pytest.raises(CheckpointError, match="offset") as excinfo:
        load_checkpoint(broken)
    assert excinfo.value.tensor == "ln_final.gain"


def test_offset_past_the_payload(saved, tmp_path):
    path, _ = saved
    broken = tmp_path / "broken.bin"
    rewrite_header(path, broken, lambda h: h["tok_embed"].update(offset=h["W_U"]["offset"] + 4))
    with pytest.raises(CheckpointError, match="truncated") as excinfo:
        load_checkpoint(broken)
    assert excinfo.value.tensor == "tok_embed"


def test_garbage_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"\x03")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
