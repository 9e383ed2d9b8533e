import numpy as np
import pytest

from odenet.data import Dataset, Trajectory
from odenet.errors import InsufficientDataError
from odenet.noise import (HIST_BINS, NoiseField, initialize_noise_field, inject_noise, noise_gaussianity_report,
                          pearson, write_report_csv)
from odenet.systems import generate_dataset, make_lv
from odenet.train import TrainConfig, train


def _traj(rng, n=2000):
    t = np.linspace(0, 1, n)
    return Trajectory(t, np.stack([100 * np.sin(7 * t), 3 * np.cos(t)], axis=1))


def test_zero_noise_is_identity(rng):
    tr = _traj(rng)
    assert np.array_equal(inject_noise(tr, 0.0, rng).values, tr.values)


def test_noise_scale_and_reversibility(rng):
    tr = _traj(rng)
    noisy = inject_noise(tr, 0.01, np.random.default_rng(5))
    e = noisy.values - tr.values
    ref = np.abs(tr.values).max(axis=0)
    np.testing.assert_allclose(e.std(axis=0) / (0.01 * ref), 1.0, atol=0.1)
    again = inject_noise(tr, 0.01, np.random.default_rng(5))
    assert np.array_equal(noisy.values, again.values)
    from odenet.noise import draw_noise

    realization = draw_noise(tr.values, 0.01, np.random.default_rng(5))
    # (y + e) - e can differ from y by rounding, never by more than an ulp of y + e
    np.testing.assert_allclose(noisy.values - realization, tr.values, rtol=0,
                               atol=float(np.spacing(np.abs(noisy.values).max())))


def test_initial_field(rng):
    ds = Dataset([Trajectory(np.arange(5.0), np.full((5, 2), [42.0, -1.0])),
                  Trajectory(np.arange(3.0), np.full((3, 2), [1.0, 2.0]))])
    field = initialize_noise_field(ds, 0.1)
    assert field.offsets.shape == (8, 2) and np.all(field.offsets == 0)
    np.testing.assert_array_equal(field.scale_reference, [42.0, 2.0])
    hidden = Dataset([Trajectory(np.arange(5.0), np.ones((5, 2)), [True, False])])
    assert initialize_noise_field(hidden).offsets.shape == (5, 1)


def test_report_on_standard_normal(rng, tmp_path):
    field = rng.standard_normal((10_000, 1))
    (r,) = noise_gaussianity_report(field)
    assert abs(r.mean) < 0.05 and 0.95 <= r.std <= 1.05
    assert r.counts.size == HIST_BINS and r.counts.sum() <= 10_000
    write_report_csv(tmp_path / "n.csv", [r])
    assert (tmp_path / "n.csv").read_text().count("\n") == HIST_BINS + 1


def test_report_degenerate_and_small():
    (r,) = noise_gaussianity_report(np.zeros((50, 1)))
    assert r.degenerate and r.std == 0.0
    with pytest.raises(InsufficientDataError):
        noise_gaussianity_report(np.zeros((5, 1)))


def test_noise_field_round_trip(rng):
    f = NoiseField([3, 4], [True, True], [1.0, 2.0], rng.normal(size=(7, 2)))
    g = NoiseField.from_dict(f.to_dict())
    assert np.array_equal(f.offsets, g.offsets)
    assert np.array_equal(g.trajectory(1), f.offsets[3:])


def test_pearson():
    a = np.arange(10.0)
    assert pearson(a, 2 * a + 1) == pytest.approx(1.0)
    assert pearson(a, np.zeros(10)) == 0.0


def test_noise_mode_shrinks_on_clean_data():
    sys = make_lv("limit_cycle")
    ds, _ = generate_dataset(sys, horizon=10.0)
    cfg = TrainConfig(iterations=600, m=10, n=25, init="regression_warm_start", learn_noise=True,
                      noise_eps=0.01, scale_loss=True, lr=1e-3, mu_start=1e-4, mu_end=1e-6)
    fit = train(ds, sys.basis, cfg)
    ref = np.abs(ds[0].values).max(axis=0)
    assert np.all(np.abs(fit.noise.offsets).mean(axis=0) < 0.01 * ref)
