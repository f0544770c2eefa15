"""Mean-signal tables: statistical accuracy, interpolation, persistence."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from molcomdemod import (
    ConfigError,
    CoverageError,
    GridSpec,
    InternalModel,
    ModelSpec,
    Reaction,
    ReceiverSpec,
    TransmitterSpec,
    estimate_internal_model,
    superpose,
)
from molcomdemod.model import SIGNAL_SPECIES


def _single_voxel_spec(rate=6.0):
    grid = GridSpec.reflecting(1, 1, 1, 0.5, 1.0)
    tx = TransmitterSpec(voxel=1, symbols=(
        (Reaction((), (SIGNAL_SPECIES,), rate),),) * 2)
    rx = None
    return ModelSpec(grid=grid, transmitter=tx, receiver=rx)


def _linear_table(slope=2.0, t0=0.0, dt=0.25, n=9, symbol=0):
    times = t0 + dt * np.arange(n)
    return InternalModel.from_values(times, slope * times + 1.0, symbol=symbol)


# ---------------------------------------------------------------------------
# estimation accuracy
# ---------------------------------------------------------------------------

def test_pure_birth_mean_matches_rate_times_t():
    """For births only, E[count at t] = rate * t exactly."""
    model = _single_voxel_spec(rate=6.0).build(0)
    table = estimate_internal_model(model, 1.0, dt=0.25, n_runs=600, seed=4,
                                    sample_coord=0)
    for t in (0.25, 0.5, 1.0):
        err = abs(table.value(t) - 6.0 * t)
        assert err < 4 * max(table.stderr_at(t), 1e-9)
    assert table.value(0.0) == 0.0


def test_stderr_shrinks_with_run_count():
    model = _single_voxel_spec().build(0)
    small = estimate_internal_model(model, 1.0, dt=0.5, n_runs=200, seed=9,
                                    sample_coord=0)
    big = estimate_internal_model(model, 1.0, dt=0.5, n_runs=800, seed=9,
                                  sample_coord=0)
    ratio = small.stderr[-1] / big.stderr[-1]
    assert ratio == pytest.approx(2.0, rel=0.25)


def test_estimation_is_deterministic_and_seed_sensitive():
    model = _single_voxel_spec().build(0)
    a = estimate_internal_model(model, 0.5, dt=0.25, n_runs=50, seed=1,
                                sample_coord=0)
    b = estimate_internal_model(model, 0.5, dt=0.25, n_runs=50, seed=1,
                                sample_coord=0)
    c = estimate_internal_model(model, 0.5, dt=0.25, n_runs=50, seed=2,
                                sample_coord=0)
    assert np.array_equal(a.sigma, b.sigma)
    assert not np.array_equal(a.sigma, c.sigma)


def test_estimation_validation():
    model = _single_voxel_spec().build(0)
    with pytest.raises(ConfigError):
        estimate_internal_model(model, 1.0, n_runs=1, sample_coord=0)
    with pytest.raises(ConfigError):
        estimate_internal_model(model, 1.0, dt=-0.1, sample_coord=0)
    with pytest.raises(ConfigError):
        estimate_internal_model(model, 1.0, n_runs=5)  # no receiver voxel


def test_receiver_signal_self_consistent_across_seeds():
    """Two independent estimations of the same diffusing-signal model agree
    pointwise within the combined Monte-Carlo error, and the mean signal
    rises monotonically while the source keeps emitting."""
    from molcomdemod.harness import small_grid_spec

    model = small_grid_spec(rates=(10.0, 50.0), receptors=10).build(1)
    a = estimate_internal_model(model, 1.8, dt=0.05, n_runs=500, seed=0)
    b = estimate_internal_model(model, 1.8, dt=0.05, n_runs=500, seed=123)
    combined = np.sqrt(a.stderr**2 + b.stderr**2)
    pull = np.abs(a.sigma - b.sigma) / np.maximum(combined, 1e-12)
    assert np.max(pull[1:]) < 4.0          # pointwise agreement
    assert a.sigma[0] == 0.0
    assert np.all(np.diff(a.sigma[::6]) > 0)   # monotone growth trend


# ---------------------------------------------------------------------------
# interpolation and integration
# ---------------------------------------------------------------------------

def test_value_exact_on_linear_table():
    t = _linear_table(slope=2.0)
    for x in (0.0, 0.1, 0.625, 1.3, 2.0):
        assert t.value(x) == pytest.approx(2.0 * x + 1.0, abs=1e-12)
    arr = t.value(np.array([0.2, 1.7]))
    assert np.allclose(arr, 2.0 * np.array([0.2, 1.7]) + 1.0)


def test_integral_exact_on_linear_table():
    t = _linear_table(slope=2.0)

    def exact(a, b):
        return (b**2 - a**2) + (b - a)

    for a, b in ((0.0, 2.0), (0.1, 0.2), (0.3, 1.9), (0.5, 0.5)):
        assert t.integral(a, b) == pytest.approx(exact(a, b), abs=1e-12)
    with pytest.raises(ConfigError):
        t.integral(1.0, 0.5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 2.0), min_size=3, max_size=3).map(sorted))
def test_integral_is_additive(points):
    a, m, b = points
    t = _linear_table(slope=1.5, n=17, dt=0.125)
    assert t.integral(a, b) == pytest.approx(
        t.integral(a, m) + t.integral(m, b), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 8))
def test_grid_point_values_are_exact(k):
    t = _linear_table()
    assert t.value(t.time_grid[k]) == t.sigma[k]


def test_out_of_range_raises_coverage_error():
    t = _linear_table()
    with pytest.raises(CoverageError):
        t.value(2.5)
    with pytest.raises(CoverageError):
        t.integral(0.0, 3.0)
    with pytest.raises(CoverageError):
        t.value(-0.2)


# ---------------------------------------------------------------------------
# persistence and construction
# ---------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    model = _single_voxel_spec().build(1)
    table = estimate_internal_model(model, 0.5, dt=0.25, n_runs=20, seed=3,
                                    sample_coord=0)
    path = tmp_path / "sigma.csv"
    table.save_csv(path)
    loaded = InternalModel.load_csv(path)
    assert loaded.symbol == table.symbol
    assert loaded.dt == table.dt
    assert loaded.n_runs == 20
    assert np.array_equal(loaded.sigma, table.sigma)
    assert np.array_equal(loaded.stderr, table.stderr)


def test_from_values_validation():
    with pytest.raises(ConfigError):
        InternalModel.from_values([0.0, 0.1, 0.3], [1, 1, 1])  # uneven grid
    with pytest.raises(ConfigError):
        InternalModel.from_values([0.0], [1.0])
    with pytest.raises(ConfigError):
        InternalModel.from_values([0.0, 0.1], [1.0, -0.5])  # negative mean


# ---------------------------------------------------------------------------
# superposition
# ---------------------------------------------------------------------------

def test_superpose_adds_shifted_tables():
    base = _linear_table(slope=1.0, dt=0.25, n=17)    # covers [0, 4]
    combo = superpose([(base, 0.0), (base, 1.0)], duration=2.0)
    for t in (0.0, 0.5, 1.75, 2.0):
        assert combo.value(t) == pytest.approx(
            base.value(t) + base.value(t + 1.0), abs=1e-12)


def test_superpose_validation():
    base = _linear_table(dt=0.25, n=9)
    with pytest.raises(ConfigError):
        superpose([], duration=1.0)
    with pytest.raises(ConfigError):
        superpose([(base, 0.0)], duration=1.1, dt=0.25)
    with pytest.raises(CoverageError):
        superpose([(base, 1.5)], duration=1.0)  # shifted past the table end
