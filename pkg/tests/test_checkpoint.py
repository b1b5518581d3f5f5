import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oafkit import checkpoint
from oafkit.errors import InvalidInput, ParseError, UnsupportedFormat

arrays_st = st.dictionaries(
    st.text(min_size=1, max_size=12),
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
               elements=st.floats(width=32, allow_nan=False)),
    max_size=5,
)


@given(arrays_st)
def test_round_trip_is_bit_exact(arrays):
    blob = checkpoint.dumps(arrays, {"model.K": 32, "variant": "oaf"})
    back, header = checkpoint.loads(blob)
    assert header == {"model.K": "32", "variant": "oaf"}
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.astype("<f4").tobytes()


def test_layout(tmp_path):
    blob = checkpoint.dumps({"w": np.array([1.0, 2.0], np.float32)}, {"a": "b"})
    assert blob[:8] == b"OAFKCKPT" and blob[8] == 1
    assert blob[9:13] == (3).to_bytes(4, "little") and blob[13:16] == b"a=b"
    assert blob.endswith(np.array([1.0, 2.0], "<f4").tobytes())
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, {"w": np.ones(3)})
    arrays, header = checkpoint.load(path)
    assert header == {} and arrays["w"].dtype == np.float32


def test_corruption_is_detected():
    blob = checkpoint.dumps({"w": np.ones((2, 2), np.float32)})
    with pytest.raises(ParseError):
        checkpoint.loads(b"NOTACKPT" + blob[8:])
    with pytest.raises(ParseError):
        checkpoint.loads(blob[:-1])
    with pytest.raises(ParseError):
        checkpoint.loads(blob + b"\0")
    with pytest.raises(UnsupportedFormat):
        checkpoint.loads(blob[:8] + b"\x02" + blob[9:])


def test_unencodable_header():
    with pytest.raises(InvalidInput):
        checkpoint.dumps({}, {"a=b": 1})
    with pytest.raises(InvalidInput):
        checkpoint.dumps({}, {"a": "x\ny"})
