import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odenet.data import Batch, Dataset, Trajectory, read_csv, write_csv
from odenet.errors import ConfigError, GridError, InvalidDimensionError


def test_trajectory_validation():
    with pytest.raises(InvalidDimensionError):
        Trajectory([0.0, 1.0], np.zeros((3, 2)))
    with pytest.raises(GridError):
        Trajectory([0.0, 1.0], [[np.nan], [1.0]])
    tr = Trajectory([0.0, 1.0], [[np.nan, 1.0], [np.nan, 2.0]], [False, True])
    assert tr.observed.tolist() == [False, True]


def test_dataset_dimension_mismatch():
    with pytest.raises(InvalidDimensionError):
        Dataset([Trajectory([0.0, 1.0], np.zeros((2, 2))), Trajectory([0.0, 1.0], np.zeros((2, 3)))])


def test_batch_piece_bounds():
    ds = Dataset([Trajectory(np.arange(6.0), np.zeros((6, 1)))])
    b = Batch.from_pieces(ds, [(0, 0), (0, 3)], 2)
    assert b.times[1].tolist() == [3.0, 4.0, 5.0]
    with pytest.raises(ConfigError):
        Batch.from_pieces(ds, [(0, 4)], 2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e300, 1e300, allow_nan=False), min_size=4, max_size=40))
def test_csv_round_trip_is_lossless(tmp_path_factory, vals):
    path = tmp_path_factory.mktemp("csv") / "x.csv"
    v = np.array(vals).reshape(-1, 1) if len(vals) % 2 else np.array(vals).reshape(-1, 2)
    t = np.arange(v.shape[0], dtype=float) * 0.1
    write_csv(path, t, v, [f"x{i + 1}" for i in range(v.shape[1])])
    names, t2, v2 = read_csv(path)
    assert names == [f"x{i + 1}" for i in range(v.shape[1])]
    assert np.array_equal(t, t2) and np.array_equal(v, v2)
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.startswith(b"t,x1")
