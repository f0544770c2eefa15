"""Truncated-space Bayesian filter: oracles, event updates, diagnostics."""

import math

import numpy as np
import pytest
from scipy import stats

from molcomdemod import (
    BindingHistory,
    ConfigError,
    ExactFilter,
    GridSpec,
    ModelInconsistencyError,
    ModelSpec,
    Reaction,
    ReceiverSpec,
    TransmitterSpec,
    extract_binding_history,
    optimal_demodulate,
    pilot_caps,
    run_filter,
    simulate,
)
from molcomdemod.exact_filter import FilterState, StateSpace, hidden_coords
from molcomdemod.model import SIGNAL_SPECIES


def _two_voxel_spec(rates=(5.0, 20.0), receptors=2):
    grid = GridSpec.reflecting(2, 1, 1, 1.0 / 3.0, 1.0)
    tx = TransmitterSpec(voxel=1, symbols=tuple(
        (Reaction((), (SIGNAL_SPECIES,), r),) for r in rates))
    rx = ReceiverSpec(voxel=2, receptor_count=receptors, binding_rate=0.005,
                      unbinding_rate=1.0)
    return ModelSpec(grid=grid, transmitter=tx, receiver=rx)


def _birth_only_model(rate=3.0):
    grid = GridSpec.reflecting(1, 1, 1, 0.5, 1.0)
    tx = TransmitterSpec(voxel=1, symbols=(
        (Reaction((), (SIGNAL_SPECIES,), rate),),) * 2)
    return ModelSpec(grid=grid, transmitter=tx, receiver=None).build(0)


# ---------------------------------------------------------------------------
# propagation oracles
# ---------------------------------------------------------------------------

def test_no_observation_propagation_matches_truncated_poisson():
    """Pure birth with the box cap absorbing the tail: the count below the
    cap keeps the Poisson(rate*t) probabilities, the cap holds the rest."""
    rate, cap, t = 3.0, 8, 0.7
    model = _birth_only_model(rate)
    filt = ExactFilter(model, caps=np.array([cap, 0]))
    fs = filt.initial_filter_state()
    filt.propagate_no_event(fs, t)
    marg = fs.pi.reshape(-1)
    pois = stats.poisson.pmf(np.arange(cap), rate * t)
    assert np.allclose(marg[:cap], pois, atol=1e-10)
    assert marg[cap] == pytest.approx(1.0 - pois.sum(), abs=1e-10)
    assert fs.pi.sum() == pytest.approx(1.0, abs=1e-12)


def test_binding_survival_weighting_decays_likelihood():
    """With one molecule pinned at the receiver and no events, the exact
    no-event log-likelihood is -(lam (M-b) n_R + mu b) t."""
    model = _two_voxel_spec(rates=(0.0, 1.0), receptors=2).build(0)
    filt = ExactFilter(model, caps=np.array([0, 1, 0]))
    pi = np.zeros(filt.space.shape)
    pi[0, 1] = 1.0
    fs = FilterState(pi=pi, b=1, t=0.0)
    filt.propagate_no_event(fs, 0.5)
    lam = model.lam
    expect = -(lam * (2 - 1) * 1 + model.mu * 1) * 0.5
    assert fs.loglik == pytest.approx(expect, abs=1e-10)


def test_uniformization_matches_dense_expm():
    spec = _two_voxel_spec(rates=(8.0, 20.0))
    model = spec.build(1)
    hist = extract_binding_history(
        simulate(model, 1.0, 12, record="receiver"))
    caps = np.array([6, 6, 0])
    uni = ExactFilter(model, caps).run(hist, decision_times=(0.5, 1.0))
    den = ExactFilter(model, caps, propagator="expm").run(
        hist, decision_times=(0.5, 1.0))
    assert np.allclose(uni.loglik, den.loglik, atol=1e-8)
    tv = 0.5 * np.abs(uni.final.pi - den.final.pi).sum()
    assert tv < 1e-8


# ---------------------------------------------------------------------------
# event updates
# ---------------------------------------------------------------------------

def _filter_and_state(weights, b=0, receptors=2):
    model = _two_voxel_spec(receptors=receptors).build(0)
    filt = ExactFilter(model, caps=np.array([2, 3, 0]))
    pi = np.zeros(filt.space.shape)
    for idx, w in weights.items():
        pi[idx] = w
    return filt, FilterState(pi=pi, b=b, t=0.0), model


def test_bind_event_reweights_by_receiver_count():
    filt, fs, model = _filter_and_state({(0, 1): 0.5, (0, 2): 0.5})
    filt.apply_bind_event(fs)
    e = 0.5 * 1 + 0.5 * 2
    assert fs.pi[0, 0] == pytest.approx(0.5 * 1 / e)
    assert fs.pi[0, 1] == pytest.approx(0.5 * 2 / e)
    assert fs.pi.sum() == pytest.approx(1.0)
    assert fs.b == 1
    assert fs.loglik == pytest.approx(math.log(model.lam * 2 * e))


def test_bind_with_no_signal_probability_is_inconsistent():
    filt, fs, _ = _filter_and_state({(0, 0): 1.0})
    with pytest.raises(ModelInconsistencyError):
        filt.apply_bind_event(fs)


def test_bind_with_saturated_receptors_is_inconsistent():
    filt, fs, _ = _filter_and_state({(0, 1): 1.0}, b=2)
    with pytest.raises(ModelInconsistencyError):
        filt.apply_bind_event(fs)


def test_unbind_event_shifts_and_freezes_cap_mass():
    filt, fs, model = _filter_and_state({(0, 0): 0.7, (0, 3): 0.3}, b=1)
    filt.apply_unbind_event(fs)
    assert fs.pi[0, 1] == pytest.approx(0.7)
    assert fs.pi[0, 3] == pytest.approx(0.3)   # cap mass cannot shift
    assert fs.trunc == pytest.approx(0.3)
    assert fs.pi.sum() == pytest.approx(1.0)
    assert fs.b == 0
    assert fs.loglik == pytest.approx(math.log(model.mu * 1))


def test_unbind_with_no_bound_receptor_is_inconsistent():
    filt, fs, _ = _filter_and_state({(0, 0): 1.0}, b=0)
    with pytest.raises(ModelInconsistencyError):
        filt.apply_unbind_event(fs)


# ---------------------------------------------------------------------------
# conditional mean bookkeeping
# ---------------------------------------------------------------------------

def test_conditional_mean_reproduces_filter_drift():
    """Feeding the recorded conditional mean to the lightweight filter must
    reproduce the exact filter's log-likelihood up to the symbol-independent
    terms (per-event rate factors and the unbind-survival integral)."""
    model = _two_voxel_spec(rates=(8.0, 20.0)).build(0)
    hist = extract_binding_history(
        simulate(model, 1.0, 31, record="receiver"))
    trace = ExactFilter(model, np.array([6, 6, 0])).run(
        hist, prior=1.0, decision_times=(0.4, 1.0), grid_dt=0.1)
    sub = run_filter(hist, trace.cond_mean, lam=model.lam, prior=1.0,
                     decision_times=(0.4, 1.0))
    for j, t in enumerate(trace.times):
        assert trace.loglik[j] - sub.z[j] == pytest.approx(
            _common_terms(hist, t, model.lam, model.mu), abs=1e-9)


def _common_terms(hist, t, lam, mu):
    """Event-rate factors plus the unbind survival, shared by all symbols."""
    total = 0.0
    b = hist.b0
    t_prev = hist.t0
    M = hist.receptor_count
    for tk, kind in zip(hist.times, hist.kinds):
        if tk > t + 1e-12:
            break
        total -= mu * b * (tk - t_prev)
        if kind > 0:
            total += math.log(lam * (M - b))
        else:
            total += math.log(mu * b)
        b += int(kind)
        t_prev = tk
    total -= mu * b * (t - t_prev)
    return total


def test_conditional_mean_integral_additivity():
    model = _two_voxel_spec(rates=(8.0, 20.0)).build(1)
    hist = extract_binding_history(
        simulate(model, 1.0, 7, record="receiver"))
    cm = ExactFilter(model, np.array([6, 6, 0])).run(
        hist, decision_times=(1.0,), grid_dt=0.05).cond_mean
    assert cm.integral(0.0, 1.0) == pytest.approx(
        cm.integral(0.0, 0.37) + cm.integral(0.37, 1.0), abs=1e-10)
    assert cm.integral(0.2, 0.2) == 0.0
    assert cm.value(0.0) >= 0.0


# ---------------------------------------------------------------------------
# state space and caps
# ---------------------------------------------------------------------------

def test_hidden_coords_drop_pure_sinks():
    model = _two_voxel_spec().build(0)
    keep = hidden_coords(model)
    names = [model.coord_names[i] for i in keep]
    assert names == ["v1", "v2"]          # the absorbed tally is dropped


def test_total_count_cap_trims_corners():
    model = _two_voxel_spec().build(0)
    full = StateSpace(model, np.array([4, 4, 0]))
    capped = StateSpace(model, np.array([4, 4, 0]), total_cap=4)
    assert capped.region.sum() < full.region.sum()
    assert capped.region.sum() == 15      # pairs with n1 + n2 <= 4


def test_state_count_guard():
    model = _two_voxel_spec().build(0)
    with pytest.raises(ConfigError):
        StateSpace(model, np.array([10**4, 10**4, 0]))


def test_pilot_caps_deterministic_and_margin_monotone():
    model = _two_voxel_spec(rates=(10.0, 30.0)).build(1)
    a = pilot_caps(model, 1.0, n_runs=20, seed=5)
    b = pilot_caps(model, 1.0, n_runs=20, seed=5)
    assert np.array_equal(a, b)
    wide = pilot_caps(model, 1.0, n_runs=20, seed=5, margin=10.0)
    assert np.all(wide >= a)
    caps, total = pilot_caps(model, 1.0, n_runs=20, seed=5, include_total=True)
    assert total <= caps.sum()


def test_unknown_propagator_rejected():
    model = _two_voxel_spec().build(0)
    with pytest.raises(ConfigError):
        ExactFilter(model, np.array([3, 3, 0]), propagator="euler")


# ---------------------------------------------------------------------------
# end-to-end demodulation
# ---------------------------------------------------------------------------

def test_optimal_demodulate_smoke():
    spec = _two_voxel_spec(rates=(2.0, 30.0), receptors=3)
    models = [spec.build(s) for s in (0, 1)]
    hist = extract_binding_history(
        simulate(models[1], 1.5, 4, record="receiver"))
    out = optimal_demodulate(hist, models, decision_times=(0.75, 1.5),
                             pilot_seed=9)
    assert out.decisions.shape == (2,)
    assert out.loglik.shape == (2, 2)
    assert np.allclose(out.l_diff(1, 0), out.loglik[1] - out.loglik[0])
    assert out.reliable
    # widely separated rates: the true symbol should win at the horizon
    assert out.decisions[-1] == 1


def test_filter_run_rejects_mismatched_history():
    model = _two_voxel_spec(receptors=2).build(0)
    filt = ExactFilter(model, np.array([3, 3, 0]))
    bad = BindingHistory(np.empty(0), np.empty(0, dtype=np.int64),
                         receptor_count=5, horizon=1.0)
    with pytest.raises(ConfigError):
        filt.run(bad, decision_times=(1.0,))
