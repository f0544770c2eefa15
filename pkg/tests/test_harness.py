"""Experiment runner: statistics helpers, tables, configs, determinism."""

import numpy as np
import pytest

from molcomdemod import (
    BudgetExceeded,
    ConfigError,
    ExperimentConfig,
    SerTable,
    fit_loglog_slope,
    preset,
    run_experiment,
    wilson_interval,
)
from molcomdemod.harness import (
    KIND_SER_VS_TIME,
    MIN_TRIALS,
    PRESETS,
    SerRow,
    make_row,
    small_grid_spec,
)


# ---------------------------------------------------------------------------
# confidence intervals
# ---------------------------------------------------------------------------

def test_wilson_contains_point_estimate():
    for errors, n in ((0, 50), (1, 50), (25, 50), (50, 50), (7, 200)):
        lo, hi = wilson_interval(errors, n)
        assert 0.0 - 1e-12 <= lo <= errors / n <= hi <= 1.0 + 1e-12


def test_wilson_narrows_with_n():
    lo1, hi1 = wilson_interval(10, 100)
    lo2, hi2 = wilson_interval(100, 1000)
    assert hi2 - lo2 < hi1 - lo1


def test_wilson_coverage_on_synthetic_bernoulli():
    """~95% of intervals over repeated binomial draws should cover p."""
    rng = np.random.default_rng(7)
    p, n, reps = 0.3, 200, 400
    covered = 0
    for _ in range(reps):
        k = rng.binomial(n, p)
        lo, hi = wilson_interval(int(k), n)
        covered += lo <= p <= hi
    assert covered / reps > 0.90


def test_wilson_validation():
    with pytest.raises(ConfigError):
        wilson_interval(5, 0)
    with pytest.raises(ConfigError):
        wilson_interval(-1, 10)
    with pytest.raises(ConfigError):
        wilson_interval(11, 10)


# ---------------------------------------------------------------------------
# log-log slope fits
# ---------------------------------------------------------------------------

def test_slope_recovers_exact_power_laws():
    m = np.array([10.0, 20.0, 50.0, 100.0, 150.0])
    for p in (-1.0, -2.0):
        slope, intercept, residual = fit_loglog_slope(m, 0.7 * m**p)
        assert slope == pytest.approx(p, abs=1e-12)
        assert intercept == pytest.approx(np.log(0.7), abs=1e-10)
        assert residual == pytest.approx(0.0, abs=1e-20)


def test_slope_range_restriction():
    m = np.array([1.0, 10.0, 50.0, 100.0, 150.0])
    ser = 0.5 * m**-1.0
    ser[0] = 0.9          # saturated point outside the asymptotic regime
    slope, _, _ = fit_loglog_slope(m, ser, lo=10.0, hi=150.0)
    assert slope == pytest.approx(-1.0, abs=1e-12)


def test_slope_excludes_zero_ser_with_warning():
    m = np.array([10.0, 20.0, 50.0, 100.0])
    ser = np.array([0.1, 0.05, 0.02, 0.0])
    with pytest.warns(UserWarning, match="zero-SER"):
        slope, _, _ = fit_loglog_slope(m, ser)
    assert np.isfinite(slope)
    with pytest.raises(ConfigError):
        fit_loglog_slope(m[:3], np.array([0.1, 0.0, 0.0]))


# ---------------------------------------------------------------------------
# result tables
# ---------------------------------------------------------------------------

def _table():
    rows = [make_row(10, [3, 5], [100, 100], extra={"agreement": 0.99}),
            make_row(20, [1, 2], [100, 100], extra={"agreement": 1.0})]
    return SerTable(kind=KIND_SER_VS_TIME, sweep_name="m", rows=rows,
                    meta={"base_seed": 0})


def test_table_round_trip(tmp_path):
    table = _table()
    path = tmp_path / "out.csv"
    table.save_csv(path)
    loaded = SerTable.load_csv(path)
    assert loaded.kind == table.kind
    assert loaded.sweep_name == "m"
    assert np.array_equal(loaded.sweep, table.sweep)
    assert np.array_equal(loaded.average, table.average)
    for a, b in zip(loaded.rows, table.rows):
        assert np.array_equal(a.per_symbol, b.per_symbol)
        assert a.n == b.n
        assert a.extra == b.extra
        assert a.wilson_lo == b.wilson_lo


def test_table_csv_has_no_wall_clock():
    rows = [make_row(10, [3, 5], [100, 100], wall_s=123.456)]
    text = SerTable(kind=KIND_SER_VS_TIME, sweep_name="m", rows=rows).to_csv()
    assert "123.456" not in text
    assert "wall" not in text


def test_row_validation():
    with pytest.raises(ConfigError):
        SerRow(sweep=1.0, per_symbol=np.array([1.5]), counts=np.array([10]),
               average=0.5, n=10, wilson_lo=0.2, wilson_hi=0.8)
    with pytest.raises(ConfigError):
        SerRow(sweep=1.0, per_symbol=np.array([0.5]), counts=np.array([10]),
               average=0.9, n=10, wilson_lo=0.2, wilson_hi=0.8)


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

def _config(**overrides):
    kwargs = dict(name="demo", kind=KIND_SER_VS_TIME, spec=small_grid_spec(),
                  horizon=1.0, decision_times=(0.5, 1.0), replicates=50,
                  sigma_runs=20)
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs)


def test_config_yaml_round_trip(tmp_path):
    cfg = _config(m_sweep=(5, 10), priors=(0.4, 0.6), notes=("demo run",))
    path = tmp_path / "cfg.yaml"
    cfg.save(path)
    loaded = ExperimentConfig.load(path)
    assert loaded.to_dict() == cfg.to_dict()
    assert loaded.digest() == cfg.digest()
    # overrides change only what they name
    bumped = ExperimentConfig.load(path, seed=99)
    assert bumped.seed == 99
    assert bumped.m_sweep == cfg.m_sweep


def test_digest_ignores_output_paths_but_not_science(tmp_path):
    cfg = _config()
    assert _config(output_dir=str(tmp_path)).digest() == cfg.digest()
    assert _config(workers=4).digest() == cfg.digest()
    assert _config(replicates=60).digest() != cfg.digest()
    assert _config(seed=1).digest() != cfg.digest()


def test_min_trials_enforced():
    with pytest.raises(ConfigError, match=str(MIN_TRIALS)):
        _config(replicates=10)


def test_config_validation():
    with pytest.raises(ConfigError):
        _config(kind="nonsense")
    with pytest.raises(ConfigError):
        _config(decision_times=(2.0,))       # past the horizon
    with pytest.raises(ConfigError):
        _config(decision_times=())
    with pytest.raises(ConfigError):
        _config(priors=(1.0,))
    with pytest.raises(ConfigError):
        _config(m_sweep=(0,))


def test_all_presets_construct():
    for name in PRESETS:
        cfg = preset(name, seed=3)
        assert cfg.seed == 3
        assert cfg.replicates >= 1
        assert cfg.digest()
    with pytest.raises(ConfigError):
        preset("no-such-preset")


# ---------------------------------------------------------------------------
# running experiments
# ---------------------------------------------------------------------------

def _tiny_cfg(tmp_path, seed=0):
    return _config(replicates=50, sigma_runs=20, m_sweep=(5,),
                   decision_times=(1.0,), seed=seed,
                   output_dir=str(tmp_path))


def test_run_experiment_outputs_and_determinism(tmp_path):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    a_dir.mkdir(), b_dir.mkdir()
    t1 = run_experiment(_tiny_cfg(a_dir))
    t2 = run_experiment(_tiny_cfg(b_dir))
    assert (a_dir / "demo.csv").read_bytes() == (b_dir / "demo.csv").read_bytes()
    assert np.array_equal(t1.average, t2.average)
    assert all(r.n == 100 for r in t1.rows)
    manifest = (a_dir / "demo.manifest.json").read_text()
    assert "seed_hygiene" in manifest or "hygiene" in manifest


def test_run_experiment_seed_changes_results(tmp_path):
    from molcomdemod.harness import KIND_DEMOD_TRACE

    def cfg(seed):
        c = _tiny_cfg(tmp_path, seed=seed)
        return ExperimentConfig.from_dict(c.to_dict(), kind=KIND_DEMOD_TRACE,
                                          output_dir=str(tmp_path))

    t1 = run_experiment(cfg(0))
    t2 = run_experiment(cfg(1))
    z1 = [t1.rows[0].extra[k] for k in sorted(t1.rows[0].extra)
          if k.startswith("mean_z")]
    z2 = [t2.rows[0].extra[k] for k in sorted(t2.rows[0].extra)
          if k.startswith("mean_z")]
    assert z1 != z2


def test_budget_refusal(tmp_path):
    cfg = _config(replicates=200, sigma_runs=100, budget_s=1e-3,
                  output_dir=str(tmp_path))
    with pytest.raises(BudgetExceeded):
        run_experiment(cfg)
