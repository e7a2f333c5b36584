import numpy as np
import pytest

from dlrt.checkpoint import MAGIC, CheckpointError, load_states, save_states
from dlrt.lowrank import init_lowrank


def test_round_trip_bit_exact(tmp_path):
    states = [init_lowrank(9, 7, 3, seed=0), init_lowrank(7, 5, 2, seed=1)]
    path = tmp_path / "states.dlrt"
    save_states(path, states)
    loaded = load_states(path)
    assert len(loaded) == 2
    for before, after in zip(states, loaded):
        assert np.array_equal(before.u, after.u)
        assert np.array_equal(before.s, after.s)
        assert np.array_equal(before.v, after.v)


def test_double_round_trip_same_bytes(tmp_path):
    states = [init_lowrank(6, 6, 4, seed=3)]
    p1 = tmp_path / "a.dlrt"
    p2 = tmp_path / "b.dlrt"
    save_states(p1, states)
    save_states(p2, load_states(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_header_layout(tmp_path):
    path = tmp_path / "one.dlrt"
    save_states(path, [init_lowrank(4, 3, 2, seed=5)])
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert int.from_bytes(raw[4:8], "little") == 1  # version
    assert int.from_bytes(raw[8:12], "little") == 1  # layer count
    assert int.from_bytes(raw[12:16], "little") == 4  # m
    assert int.from_bytes(raw[16:20], "little") == 3  # n
    assert int.from_bytes(raw[20:24], "little") == 2  # r
    payload = (4 * 2 + 2 * 2 + 3 * 2) * 8
    assert len(raw) == 24 + payload


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.dlrt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_states(path)


def test_truncated_rejected(tmp_path):
    path = tmp_path / "trunc.dlrt"
    save_states(path, [init_lowrank(5, 5, 2, seed=6)])
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(CheckpointError):
        load_states(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "extra.dlrt"
    save_states(path, [init_lowrank(5, 5, 2, seed=7)])
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError):
        load_states(path)
