import struct

import numpy as np
import pytest

from nlcen.checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from nlcen.segnet import ModelConfig, NLCEN


def test_round_trip_model(tmp_path):
    m = NLCEN(ModelConfig(seed=2))
    path = save_checkpoint(tmp_path / "m.nlck", m.state_dict())
    state = load_checkpoint(path)
    assert list(state) == list(m.state_dict())
    fresh = NLCEN(ModelConfig(seed=9))
    fresh.load_state_dict(state)
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(fresh.state_dict()[k], v)


def test_layout():
    buf = dumps({"a.b": np.array([[1.0, 2.0, 3.0]])})
    assert buf[:4] == b"NLCK"
    assert struct.unpack_from("<II", buf, 4) == (1, 1)
    assert struct.unpack_from("<I", buf, 12) == (3,)
    assert buf[16:19] == b"a.b"
    assert struct.unpack_from("<III", buf, 19) == (2, 1, 3)
    assert np.frombuffer(buf[31:], "<f8").tolist() == [1.0, 2.0, 3.0]


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"XXXX" + bytes(8))


def test_truncated():
    buf = dumps({"w": np.ones(4)})
    with pytest.raises(CheckpointError):
        loads(buf[:-3])


def test_mismatch_names_parameters():
    state = NLCEN(ModelConfig(variant="no-nlce")).state_dict()
    with pytest.raises(KeyError, match="missing: nlce2"):
        NLCEN(ModelConfig(variant="full")).load_state_dict(state)
