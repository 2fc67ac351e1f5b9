import numpy as np
import pytest
import torch

from carl import checkpoint


def test_roundtrip_preserves_values_and_dtypes(tmp_path, rng):
    tensors = {"b": torch.from_numpy(rng.normal(size=(3, 2))).float(), "a": torch.arange(5),
               "c": torch.zeros(())}
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, {"kind": "test", "n": 3}, tensors)
    meta, back = checkpoint.load(path)
    assert meta == {"kind": "test", "n": 3}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and torch.equal(back[k], v)


def test_bytes_are_deterministic(rng):
    t = {"w": torch.from_numpy(rng.normal(size=4))}
    assert checkpoint.dumps({"z": 1, "a": 2}, t) == checkpoint.dumps({"a": 2, "z": 1}, dict(t))
    assert checkpoint.dumps({}, t).startswith(checkpoint.MAGIC)


def test_corrupt_inputs_rejected():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOTACKPT" + bytes(8))
    data = bytearray(checkpoint.dumps({}, {}))
    data[8] = 99
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(bytes(data))


def test_prefix_helpers():
    state = {"x": 1, "y": 2}
    pre = checkpoint.prefixed(state, "m.")
    assert checkpoint.strip_prefix({**pre, "other.z": 3}, "m.") == state
