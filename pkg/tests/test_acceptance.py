"""End-to-end acceptance checks.

Each test prints one PASS line with its headline numbers.  The receptor-count
scaling study has a quick default variant; set ``MOLCOM_FULL_SCALING=1`` to
run the full sweep with the log-log slope check (several hours).
"""

import os

import numpy as np
import pytest
from scipy import stats
from scipy.linalg import expm

from molcomdemod import (
    ExactFilter,
    GridSpec,
    Model,
    ReceiverSpec,
    estimate_internal_model,
    extract_binding_history,
    optimal_demodulate,
    pilot_caps,
    run_experiment,
    run_filter,
    simulate,
)
from molcomdemod.harness import fit_loglog_slope, preset, PRESETS, small_grid_spec
from molcomdemod.model import (Channel, KIND_BINDING, KIND_UNBINDING,
                               KIND_ZEROTH)
from molcomdemod.rng import DOMAIN_EVAL, derive_seed, substream

SEED = 20260824


def _report(num, name, detail):
    print(f"ACCEPTANCE {num:02d} {name}: PASS ({detail})")


def _birth_only_model(rate: float) -> Model:
    """Single voxel, constitutive source, no receiver."""
    grid = GridSpec.reflecting(1, 1, 1, 1.0 / 3.0, 1.0)
    birth = Channel(kind="reaction", label="src", code=KIND_ZEROTH,
                    rate=rate, delta=np.array([1, 0], dtype=np.int64))
    return Model(grid=grid, transmitter=None, receiver=None, symbol=0,
                 coord_names=("v1", "A"), channels=(birth,),
                 initial_counts=np.zeros(2, dtype=np.int64),
                 random_initial=(), receptor_count=0, lam=0.0, mu=0.0,
                 receiver_coord=-1)


def _one_voxel_receiver_model(rate: float, lam: float, mu: float,
                              receptors: int) -> Model:
    """Single voxel with a source and a co-located receptor pool."""
    grid = GridSpec.reflecting(1, 1, 1, 1.0 / 3.0, 1.0)
    birth = Channel(kind="reaction", label="src", code=KIND_ZEROTH,
                    rate=rate, delta=np.array([1, 0], dtype=np.int64))
    bind = Channel(kind="binding", label="bind", code=KIND_BINDING,
                   rate=lam, delta=np.array([-1, 0], dtype=np.int64),
                   db=+1, idx1=0)
    unbind = Channel(kind="unbinding", label="unbind", code=KIND_UNBINDING,
                     rate=mu, delta=np.array([1, 0], dtype=np.int64), db=-1)
    return Model(grid=grid, transmitter=None, receiver=None, symbol=0,
                 coord_names=("v1", "A"), channels=(birth, bind, unbind),
                 initial_counts=np.zeros(2, dtype=np.int64),
                 random_initial=(), receptor_count=receptors, lam=lam, mu=mu,
                 receiver_coord=0)


def test_criterion_01_ssa_exactness():
    """A constitutive source sampled at T=1 must follow Poisson(10)."""
    model = _birth_only_model(10.0)
    n_runs = 10_000
    counts = np.empty(n_runs, dtype=np.int64)
    for i in range(n_runs):
        counts[i] = simulate(model, 1.0, substream(SEED, DOMAIN_EVAL, i),
                             record="full").final_state.n[0]
    mean = counts.mean()
    var = counts.var(ddof=1)
    assert 9.7 <= mean <= 10.3
    assert 9.0 <= var <= 11.0
    # chi-square against Poisson(10), pooling bins with expectation < 5
    kmax = int(counts.max())
    observed = np.bincount(counts, minlength=kmax + 1).astype(float)
    expected = stats.poisson.pmf(np.arange(kmax + 1), 10.0) * n_runs
    expected[-1] += (1.0 - stats.poisson.cdf(kmax, 10.0)) * n_runs
    obs_p, exp_p = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(observed, expected):
        o_acc += o
        e_acc += e
        if e_acc >= 5.0:
            obs_p.append(o_acc)
            exp_p.append(e_acc)
            o_acc = e_acc = 0.0
    obs_p[-1] += o_acc
    exp_p[-1] += e_acc
    _, p = stats.chisquare(obs_p, np.array(exp_p) * sum(obs_p) / sum(exp_p))
    assert p > 0.001
    _report(1, "ssa-exactness",
            f"mean={mean:.3f} var={var:.3f} chi2_p={p:.3f}")


def test_criterion_02_conservation():
    """Without a source, molecules + complexes are conserved eventwise."""
    rng = np.random.default_rng(SEED)
    spec = small_grid_spec()
    n_traj = 1000
    worst = 0
    for i in range(n_traj):
        m = rng.integers(1, 12)
        rx = ReceiverSpec(voxel=3, receptor_count=int(m), binding_rate=0.005,
                          unbinding_rate=1.0)
        from molcomdemod.model import build_model
        model = build_model(spec.grid, None, rx)
        n0 = np.zeros(model.n_coords, dtype=np.int64)
        n0[:3] = rng.integers(0, 30, size=3)
        from molcomdemod import SystemState
        st = SystemState(n0.copy(), 0)
        tr = simulate(model, 0.5, int(rng.integers(0, 2**62)), record="full",
                      state=st)
        _, _, _, _, deltas, dbs = model.channel_arrays()
        path_n = n0[None, :] + np.cumsum(deltas[tr.channels], axis=0)
        path_b = 0 + np.cumsum(dbs[tr.channels])
        totals = path_n[:, :3].sum(axis=1) + path_b
        assert np.all(totals == n0.sum()), "molecule count not conserved"
        assert np.all((path_b >= 0) & (path_b <= m))
        worst = max(worst, tr.channels.size)
    _report(2, "conservation",
            f"{n_traj} trajectories, longest {worst} events")


def _brute_force_filter(model, hist, cap, h=1e-4):
    """Fine-time-discretized joint filter on a single voxel.

    Propagates the no-observable-event generator in steps of at most ``h``
    (each step an exact matrix exponential of the tiny generator), applies
    bind/unbind updates at the exact event times, and returns the normalized
    posterior over the molecule count plus the event-sequence log-likelihood.
    Truncation at ``cap`` mirrors the filter: transitions leaving the box are
    suppressed, mass that cannot move stays put.
    """
    lam, mu, big_m = model.lam, model.mu, model.receptor_count
    rate = model.channels[0].rate
    n = np.arange(cap + 1, dtype=np.float64)

    def q_no(b):
        q = np.zeros((cap + 1, cap + 1))
        for k in range(cap + 1):
            if k < cap:
                q[k + 1, k] += rate
                q[k, k] -= rate
            q[k, k] -= lam * k * (big_m - b) + mu * b
        return q

    cache = {}

    def step(pi, b, dt):
        key = (b, round(dt, 12))
        if key not in cache:
            cache[key] = expm(q_no(b) * dt)
        return cache[key] @ pi

    pi = np.zeros(cap + 1)
    pi[0] = 1.0
    loglik = 0.0
    t, b = 0.0, 0
    events = list(zip(hist.times, hist.kinds))
    for t_ev, kind in events + [(hist.horizon, 0)]:
        remaining = t_ev - t
        while remaining > 1e-15:
            dt = min(h, remaining)
            pi = step(pi, b, dt)
            remaining -= dt
        mass = pi.sum()
        loglik += np.log(mass)
        pi /= mass
        t = t_ev
        if kind > 0:
            w = lam * n * (big_m - b)
            pi = w * pi
            e = pi.sum()
            loglik += np.log(e)
            pi = np.roll(pi, -1)
            pi[-1] = 0.0
            pi /= e
            b += 1
        elif kind < 0:
            loglik += np.log(mu * b)
            moved = np.roll(pi, 1)
            moved[0] = 0.0
            moved[-1] += pi[-1]   # frozen at the cap, like the filter
            pi = moved
            b -= 1
    return pi, loglik


def test_criterion_03_filter_oracle():
    """The truncated filter matches brute-force time discretization."""
    cap = 5
    model = _one_voxel_receiver_model(rate=20.0, lam=5.0, mu=4.0, receptors=1)
    caps = np.array([cap, 0], dtype=np.int64)
    filt = ExactFilter(model, caps)
    worst_tv = worst_ll = 0.0
    n_events = 0
    for i in range(20):
        hist = extract_binding_history(
            simulate(model, 0.2, substream(SEED, DOMAIN_EVAL, 10_000 + i),
                     record="full"))
        tr = filt.run(hist, decision_times=(0.2,))
        pi_ref, ll_ref = _brute_force_filter(model, hist, cap)
        tv = 0.5 * np.abs(tr.final.pi.ravel() - pi_ref).sum()
        dll = abs(tr.loglik[-1] - ll_ref)
        worst_tv = max(worst_tv, tv)
        worst_ll = max(worst_ll, dll)
        n_events += hist.n_events
    assert worst_tv < 1e-4
    assert worst_ll < 1e-4
    _report(3, "filter-oracle",
            f"20 runs, {n_events} events, max TV={worst_tv:.2e} "
            f"max |dlogL|={worst_ll:.2e}")


def _preset_models_and_filters(receptors):
    spec = small_grid_spec(receptors=receptors)
    models = [spec.build(symbol=s) for s in range(2)]
    filters = []
    for s, m in enumerate(models):
        caps, total = pilot_caps(m, 1.8, seed=derive_seed(SEED, 77, s),
                                 margin=3.0, include_total=True)
        filters.append(ExactFilter(m, caps, total_cap=total))
    return models, filters


def test_criterion_04_substitution_identity():
    """Feeding the exact conditional mean to the lightweight filter must
    reproduce the exact log-posterior differences."""
    dts = tuple(round(1.0 + 0.05 * j, 9) for j in range(17))
    models, filters = _preset_models_and_filters(10)
    worst = 0.0
    for i in range(50):
        s_true = i % 2
        hist = extract_binding_history(
            simulate(models[s_true], 1.8,
                     substream(SEED, DOMAIN_EVAL, 20_000 + i),
                     record="receiver"))
        opt = optimal_demodulate(hist, models, decision_times=dts,
                                 filters=filters)
        z = [run_filter(hist, opt.traces[s].cond_mean, rx=models[0],
                        prior=0.5, decision_times=dts).z for s in range(2)]
        diff = (z[1] - z[0]) - opt.l_diff(1, 0)
        worst = max(worst, float(np.abs(diff).max()))
    assert worst < 1e-6
    _report(4, "substitution-identity",
            f"50 trajectories, max |mismatch|={worst:.2e}")


def test_criterion_05_law_of_total_expectation():
    """Averaging E[n_R | s, history] over histories recovers the
    unconditional mean signal."""
    spec = small_grid_spec(receptors=10)
    model = spec.build(symbol=1)
    sigma = estimate_internal_model(model, 1.8, n_runs=500,
                                    seed=derive_seed(SEED, 5))
    grid = tuple(round(0.1 * j, 9) for j in range(1, 19))
    caps, total = pilot_caps(model, 1.8, seed=derive_seed(SEED, 77, 1),
                             margin=3.0, include_total=True)
    filt = ExactFilter(model, caps, total_cap=total)
    n_traj = 200
    vals = np.empty((n_traj, len(grid)))
    for i in range(n_traj):
        hist = extract_binding_history(
            simulate(model, 1.8, substream(SEED, DOMAIN_EVAL, 30_000 + i),
                     record="receiver"))
        tr = filt.run(hist, decision_times=grid)
        vals[i] = [tr.cond_mean.value(t) for t in grid]
    mean_e = vals.mean(axis=0)
    se_e = vals.std(axis=0, ddof=1) / np.sqrt(n_traj)
    sig = np.array([sigma.value(t) for t in grid])
    se_s = np.array([sigma.stderr_at(t) for t in grid])
    pull = np.abs(mean_e - sig) / np.sqrt(se_e**2 + se_s**2)
    assert np.all(pull <= 3.0), f"worst pull {pull.max():.2f}"
    _report(5, "law-of-total-expectation",
            f"{n_traj} trajectories, {len(grid)} grid points, "
            f"max pull={pull.max():.2f} sigma")


def test_criterion_06_filter_comparison(tmp_path):
    """Optimal vs approximate demodulation on the small-grid study."""
    cfg = preset("filter-compare", seed=SEED, output_dir=str(tmp_path))
    table = run_experiment(cfg)
    gaps = []
    agrees = []
    for row in table.rows:
        gap = abs(row.average - row.extra["opt_avg"])
        gaps.append(gap)
        agrees.append(row.extra["agreement"])
        assert gap < 0.02, (
            f"SER gap {gap:.4f} at t={row.sweep} (m={row.extra.get('m')})")
        assert row.extra["agreement"] >= 0.97
    _report(6, "optimal-vs-approximate",
            f"max gap={max(gaps)*100:.2f} pp, "
            f"min agreement={min(agrees)*100:.1f}%")


def test_criterion_07_receptor_scaling(tmp_path):
    """SER improves with receptor count; full sweep checks the slope."""
    full = os.environ.get("MOLCOM_FULL_SCALING") == "1"
    name = "receptor-scaling" if full else "receptor-scaling-reduced"
    cfg = preset(name, seed=SEED, output_dir=str(tmp_path))
    table = run_experiment(cfg)
    ser = table.average
    m = table.sweep
    assert ser[-1] < ser[0], "SER did not improve with receptor count"
    inversions = int(np.sum(np.diff(ser) > 0))
    for j in np.flatnonzero(np.diff(ser) > 0):
        # any local increase must be within statistical resolution
        assert table.rows[j + 1].wilson_lo <= table.rows[j].wilson_hi
    detail = (f"SER {ser[0]:.3f} @M={m[0]:.0f} -> {ser[-1]:.3f} "
              f"@M={m[-1]:.0f}, {inversions} stat-covered inversion(s)")
    if full:
        slope, _, _ = fit_loglog_slope(m, ser, lo=50, hi=150)
        assert -1.13 - 0.35 <= slope <= -1.13 + 0.35
        detail += f", slope={slope:.3f}"
    _report(7, "receptor-scaling", detail)


def test_criterion_08_indistinguishable(tmp_path):
    """Matched-mean emission patterns are hard to tell apart."""
    cfg = preset("indistinguishable", seed=SEED, output_dir=str(tmp_path))
    table = run_experiment(cfg)
    ser = table.rows[0].average
    assert ser > 0.35
    assert ser <= 0.65, "worse than guessing suggests a sign error"
    _report(8, "indistinguishable-symbols",
            f"average SER={ser:.3f} over {table.rows[0].n} trials")


@pytest.mark.parametrize("name", ["isi", "isi-l5"])
def test_criterion_09_isi(tmp_path, name):
    """Sequence-decoding SER improves with receptor count."""
    cfg = preset(name, seed=SEED, output_dir=str(tmp_path))
    table = run_experiment(cfg)
    ser = table.average
    up = np.flatnonzero(np.diff(ser) > 0)
    assert up.size <= 1, f"{up.size} SER inversions across the M sweep"
    for j in up:
        assert table.rows[j + 1].wilson_lo <= table.rows[j].wilson_hi
    _report(9, f"isi-{cfg.memory_length}",
            "SER " + " -> ".join(f"{v:.3f}" for v in ser)
            + f" over M {table.sweep.astype(int).tolist()}")


#: scaled-down overrides per preset so the determinism check stays fast
_DET_OVERRIDES = {
    "filter-compare": dict(replicates=50, sigma_runs=50, m_sweep=(5,),
                           horizon=0.9, decision_times=(0.6, 0.9)),
    "ser-vs-time": dict(replicates=50, sigma_runs=50,
                        decision_times=(1.0, 2.0, 3.0)),
    "demod-trace": dict(replicates=50, sigma_runs=50,
                        decision_times=(1.0, 2.0, 3.0), save_traces=1),
    "receptor-scaling": dict(replicates=34, sigma_runs=50, m_sweep=(1, 10)),
    "receptor-scaling-reduced": dict(replicates=34, sigma_runs=50,
                                     m_sweep=(1, 10)),
    "indistinguishable": dict(replicates=50, sigma_runs=50),
    "isi": dict(replicates=5, sigma_runs=30, m_sweep=(25,)),
    "isi-l5": dict(replicates=5, sigma_runs=30, m_sweep=(25,)),
}


def test_criterion_10_determinism(tmp_path):
    """Rerunning any preset with the same seed gives identical CSV bytes."""
    checked = []
    for name in PRESETS:
        outputs = []
        for run in range(2):
            out = tmp_path / f"{name}-{run}"
            cfg = preset(name, seed=SEED, output_dir=str(out),
                         **_DET_OVERRIDES[name])
            run_experiment(cfg)
            outputs.append((out / f"{cfg.name}.csv").read_bytes())
        assert outputs[0] == outputs[1], f"preset {name} is not deterministic"
        checked.append(name)
    _report(10, "determinism", f"{len(checked)} presets byte-identical")
