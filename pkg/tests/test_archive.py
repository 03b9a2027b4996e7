import json
import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from biome import archive
from biome.archive import ArchiveError


def test_roundtrip_f32_f64(tmp_path):
    tensors = {
        "a": np.arange(12, dtype=np.float32).reshape(3, 4),
        "b": np.linspace(-1, 1, 7),
        "scalar": np.float64(2.5),
        "empty": np.zeros((0, 3), dtype=np.float32),
    }
    archive.save(tmp_path / "x.tarc", tensors)
    back = archive.load(tmp_path / "x.tarc")
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == np.asarray(v).dtype
        assert back[k].tobytes() == np.asarray(v).tobytes()
        assert back[k].shape == np.asarray(v).shape


def test_torch_state_dict(tmp_path):
    sd = torch.nn.Linear(3, 2).state_dict()
    archive.save(tmp_path / "m.tarc", sd)
    back = archive.load(tmp_path / "m.tarc")
    for k, v in sd.items():
        np.testing.assert_array_equal(back[k], v.numpy())


def test_layout():
    blob = archive.dumps({"x": np.array([1.0, 2.0], dtype=np.float32)})
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + n])
    assert header == {"x": {"shape": [2], "dtype": "f32", "offset": 0, "length": 8}}
    assert blob[8 + n :] == np.array([1.0, 2.0], dtype="<f4").tobytes()


def test_dumps_deterministic():
    t = {"b": np.ones(3), "a": np.zeros(2, dtype=np.float32)}
    assert archive.dumps(t) == archive.dumps(dict(reversed(list(t.items()))))


def _blob(header, payload=b""):
    head = json.dumps(header).encode()
    return struct.pack("<Q", len(head)) + head + payload


@pytest.mark.parametrize("blob", [
    b"",
    b"\x05\x00\x00",
    struct.pack("<Q", 100) + b"{}",
    struct.pack("<Q", 3) + b"{{{",
    _blob([1, 2]),
    _blob({"x": {"shape": [2], "dtype": "f16", "offset": 0, "length": 4}}, b"\0" * 4),
    _blob({"x": {"shape": [2], "dtype": "f32", "offset": 0, "length": 4}}, b"\0" * 8),
    _blob({"x": {"shape": [2], "dtype": "f32", "offset": 4, "length": 8}}, b"\0" * 8),
    _blob({"x": {"shape": [2], "dtype": "f32", "offset": 0, "length": 8},
           "y": {"shape": [1], "dtype": "f32", "offset": 4, "length": 4}}, b"\0" * 8),
    _blob({"x": {"shape": [2], "dtype": "f32"}}, b"\0" * 8),
])
def test_malformed(blob):
    with pytest.raises(ArchiveError):
        archive.loads(blob)


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(
    st.text(min_size=1, max_size=8),
    hnp.arrays(st.sampled_from([np.float32, np.float64]), hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
               elements=st.floats(allow_nan=False, width=32)),
    max_size=4,
))
def test_roundtrip_property(tensors):
    back = archive.loads(archive.dumps(tensors))
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        assert back[k].tobytes() == v.astype(v.dtype.newbyteorder("<")).tobytes()
        assert back[k].shape == v.shape
