"""Log-posterior demodulation filters driven by the binding history.

For each candidate symbol ``s`` the filter integrates

    dZ_s/dt = dU/dt * log(sigma_s(t)) - lam * (M - b(t)) * sigma_s(t),

where ``U`` counts bind events, so ``Z_s`` jumps by ``log sigma_s(t_k)`` at
every bind time and drifts continuously in between.  The drift is computed
segment-exactly: ``b`` is constant between receiver events and ``sigma`` is
piecewise linear, so each segment contributes ``-lam (M - b)`` times a
closed-form integral of the tabulated model.  Up to a symbol-independent
additive term, ``Z_s(t)`` is the log posterior of ``s`` given the history,
and the MAP decision is its argmax.

The decision-feedback ISI decoder applies the same filter interval by
interval, replacing ``sigma_s`` with an effective mean signal that accounts
for the residue of previously decided symbols.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, CoverageError
from .internal_model import SIGMA_FLOOR, InternalModel, superpose
from .model import Model, ReceiverSpec
from .ssa import BindingHistory


def _binding_params(rx, history: BindingHistory, lam: float | None):
    """Resolve (lam, M) from a ReceiverSpec/Model/explicit value."""
    M = history.receptor_count
    if lam is None:
        if isinstance(rx, Model):
            lam = rx.lam
            M_rx = rx.receptor_count
        elif isinstance(rx, ReceiverSpec):
            if rx.binding_propensity is None:
                raise ConfigError(
                    "receiver spec has no pinned binding propensity; "
                    "pass lam explicitly or use a compiled model")
            lam = rx.binding_propensity
            M_rx = rx.receptor_count
        else:
            raise ConfigError("pass a ReceiverSpec/Model or an explicit lam")
        if M_rx != M:
            raise ConfigError(
                f"receptor count mismatch: history has {M}, receiver {M_rx}")
    if lam < 0:
        raise ConfigError("binding propensity must be nonnegative")
    return float(lam), M


@dataclass
class FilterTrace:
    """Z_s(t) of one symbol filter, sampled at events and decision times."""

    symbol: int
    prior: float
    times: np.ndarray          # requested decision times
    z: np.ndarray              # Z at the decision times
    event_times: np.ndarray
    z_events: np.ndarray       # Z just after each receiver event
    n_jumps: int               # number of bind events processed

    def z_at(self, t: float) -> float:
        i = int(np.searchsorted(self.times, t))
        if i >= self.times.size or abs(self.times[i] - t) > 1e-9:
            raise ConfigError(f"time {t} is not a recorded decision time")
        return float(self.z[i])


def run_filter(history: BindingHistory, sigma: InternalModel, rx=None,
               prior: float = 1.0, decision_times: Sequence[float] = (), *,
               lam: float | None = None, sigma_floor: float = SIGMA_FLOOR,
               extra_drift: Callable[[float, float], float] | None = None) -> FilterTrace:
    """Run one symbol filter over a binding history.

    ``rx`` supplies the binding parameters (a compiled :class:`Model`, or a
    :class:`ReceiverSpec` with a pinned propensity constant); ``lam``
    overrides it.  ``sigma_floor`` bounds the jump term ``log sigma`` away
    from -inf when a bind lands where the model predicts no signal.
    ``extra_drift(a, b)`` adds a symbol-independent increment per drift
    segment; decisions are invariant to it (posterior-difference identity).
    """
    lam_v, M = _binding_params(rx, history, lam)
    if prior <= 0:
        raise ConfigError("prior must be positive")
    dec = np.asarray(sorted(decision_times), dtype=np.float64)
    tol = 1e-9 * max(1.0, sigma.horizon)
    if dec.size and dec[0] < history.t0 - 1e-12:
        raise ConfigError("decision times precede the history start")
    if dec.size and dec[-1] > sigma.horizon + tol:
        raise CoverageError(
            f"internal model covers [0, {sigma.horizon}] but decisions "
            f"extend to {dec[-1]}")
    # events past the model horizon carry no usable evidence and are skipped
    t_stop = min(history.horizon, sigma.horizon + tol)
    n_ev = int(np.searchsorted(history.times, t_stop, side="right"))

    # merged walk: receiver events first at equal times, then decision reads
    z = math.log(prior)
    t_cur = history.t0
    b = history.b0
    z_dec = np.empty(dec.size)
    z_ev = np.empty(n_ev)
    n_jumps = 0
    di = 0
    for k in range(n_ev + 1):
        t_ev = history.times[k] if k < n_ev else np.inf
        while di < dec.size and dec[di] < t_ev:
            tau = dec[di]
            seg = lam_v * (M - b) * sigma.integral(t_cur, tau)
            extra = extra_drift(t_cur, tau) if extra_drift else 0.0
            # keep walking from tau so later reads reuse the partial segment
            z = z - seg + extra
            z_dec[di] = z
            t_cur = tau
            di += 1
        if k == n_ev:
            break
        z -= lam_v * (M - b) * sigma.integral(t_cur, t_ev)
        if extra_drift:
            z += extra_drift(t_cur, t_ev)
        t_cur = t_ev
        if history.kinds[k] > 0:
            z += math.log(max(sigma.value(t_ev), sigma_floor))
            n_jumps += 1
        b += int(history.kinds[k])
        z_ev[k] = z
    return FilterTrace(symbol=sigma.symbol, prior=prior, times=dec, z=z_dec,
                       event_times=history.times[:n_ev].copy(),
                       z_events=z_ev, n_jumps=n_jumps)


@dataclass
class DemodOutput:
    """K parallel filter traces with MAP decisions at the decision times."""

    times: np.ndarray          # decision times
    z: np.ndarray              # shape (K, n_times)
    decisions: np.ndarray      # argmax symbol per decision time
    ties: np.ndarray           # True where the argmax was not unique
    priors: np.ndarray         # normalized prior vector
    traces: tuple[FilterTrace, ...] = field(default=(), repr=False)

    @property
    def n_symbols(self) -> int:
        return self.z.shape[0]

    def decision_at(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t))
        if i >= self.times.size or abs(self.times[i] - t) > 1e-9:
            raise ConfigError(f"time {t} is not a recorded decision time")
        return int(self.decisions[i])


_TIE_RTOL = 1e-9


def _decide(z: np.ndarray):
    """Row-argmax with lowest-index tie break and a tie flag."""
    best = np.argmax(z, axis=0)
    zmax = z[best, np.arange(z.shape[1])]
    tol = _TIE_RTOL * np.maximum(1.0, np.abs(zmax))
    near = np.abs(z - zmax) <= tol
    decisions = near.argmax(axis=0)  # lowest index among the near-max set
    ties = near.sum(axis=0) > 1
    return decisions.astype(np.int64), ties


def demodulate(history: BindingHistory, models: Sequence[InternalModel],
               rx=None, priors: Sequence[float] | None = None,
               decision_times: Sequence[float] | float = (), *,
               lam: float | None = None,
               sigma_floor: float = SIGMA_FLOOR) -> DemodOutput:
    """MAP demodulation: run K filters and take the argmax at each time.

    ``priors`` need not be normalized (a common scale shifts every ``Z_s``
    equally).  Ties go to the lowest symbol index and are flagged.
    """
    if np.isscalar(decision_times):
        decision_times = (float(decision_times),)
    K = len(models)
    if K < 2:
        raise ConfigError("demodulation needs at least two candidate symbols")
    if priors is None:
        priors = np.full(K, 1.0 / K)
    priors = np.asarray(priors, dtype=np.float64)
    if priors.shape != (K,) or np.any(priors <= 0):
        raise ConfigError("priors must be K positive weights")
    priors = priors / priors.sum()
    traces = tuple(
        run_filter(history, m, rx, float(priors[s]), decision_times,
                   lam=lam, sigma_floor=sigma_floor)
        for s, m in enumerate(models))
    z = np.stack([tr.z for tr in traces])
    decisions, ties = _decide(z)
    return DemodOutput(times=traces[0].times, z=z, decisions=decisions,
                       ties=ties, priors=priors, traces=traces)


# ---------------------------------------------------------------------------
# decision-feedback ISI decoding
# ---------------------------------------------------------------------------

MODE_SUPERPOSITION = "superposition"
MODE_FULL_SEQUENCE = "full_sequence"


@dataclass
class IsiConfig:
    """Configuration of the decision-feedback sequence decoder.

    In superposition mode ``models`` holds one single-shot model per symbol,
    each covering ``memory_length * symbol_duration`` of local time; the
    effective mean signal of an interval is the sum of the current candidate
    and the aged contributions of the previous ``memory_length - 1`` decided
    symbols.  In full-sequence mode ``sequence_models`` maps every symbol
    tuple of length ``memory_length`` to a model of the final interval of
    that sequence (intervals before the frame has enough decided symbols pad
    the prefix with symbol 0).
    """

    symbol_duration: float
    memory_length: int
    mode: str = MODE_SUPERPOSITION
    models: tuple[InternalModel, ...] = ()
    sequence_models: Mapping[tuple, InternalModel] | None = None
    n_symbols: int = 2

    def __post_init__(self):
        if self.symbol_duration <= 0 or self.memory_length < 1:
            raise ConfigError("need positive symbol duration and memory >= 1")
        if self.mode == MODE_SUPERPOSITION:
            if len(self.models) != self.n_symbols:
                raise ConfigError(
                    f"superposition mode needs {self.n_symbols} single-shot "
                    f"models, got {len(self.models)}")
            need = self.memory_length * self.symbol_duration
            for m in self.models:
                if m.horizon + 1e-9 < need:
                    raise ConfigError(
                        f"single-shot models must cover {need} s of local time")
        elif self.mode == MODE_FULL_SEQUENCE:
            if self.sequence_models is None:
                raise ConfigError("full-sequence mode needs sequence_models")
            n_need = self.n_symbols**self.memory_length
            if len(self.sequence_models) < n_need:
                raise ConfigError(
                    f"full-sequence mode needs all {n_need} sequence models")
        else:
            raise ConfigError(f"unknown ISI mode {self.mode!r}")


@dataclass
class IsiResult:
    decisions: np.ndarray
    ties: np.ndarray
    correct: np.ndarray | None
    z_final: np.ndarray        # (n_intervals, K) Z at each interval end

    @property
    def n_errors(self) -> int:
        if self.correct is None:
            raise ConfigError("ground truth was not supplied")
        return int(np.sum(~self.correct))


def _effective_model(cfg: IsiConfig, past: list[int], candidate: int) -> InternalModel:
    """Mean-signal model of the current interval given decided feedback."""
    if cfg.mode == MODE_SUPERPOSITION:
        parts = [(cfg.models[candidate], 0.0)]
        for j, s_prev in enumerate(reversed(past[-(cfg.memory_length - 1):] if
                                            cfg.memory_length > 1 else [])):
            parts.append((cfg.models[s_prev], (j + 1) * cfg.symbol_duration))
        return superpose(parts, cfg.symbol_duration, cfg.models[0].dt)
    prefix = past[-(cfg.memory_length - 1):] if cfg.memory_length > 1 else []
    prefix = [0] * (cfg.memory_length - 1 - len(prefix)) + prefix
    key = tuple(prefix) + (candidate,)
    try:
        return cfg.sequence_models[key]
    except KeyError:
        raise ConfigError(f"missing sequence model for {key}") from None


def isi_decode(history: BindingHistory, cfg: IsiConfig, rx=None,
               priors: Sequence[float] | None = None, *,
               lam: float | None = None, truth: Sequence[int] | None = None,
               sigma_floor: float = SIGMA_FLOOR) -> IsiResult:
    """Decode a frame interval by interval with hard decision feedback.

    Interval ``k`` covers ``[k T_x, (k+1) T_x)``; its K filters start from
    fresh log-priors, see the sub-history of the interval (with the carried
    bound-receptor count), and decide at the interval end.  Decisions feed
    the effective models of subsequent intervals.
    """
    T_x = cfg.symbol_duration
    n_int = int(round(history.horizon / T_x))
    if abs(n_int * T_x - history.horizon) > 1e-9 or n_int < 1:
        raise ConfigError("history length must be a whole number of intervals")
    if truth is not None and len(truth) != n_int:
        raise ConfigError("ground truth length must match the frame")
    decided: list[int] = []
    ties = np.zeros(n_int, dtype=bool)
    z_final = np.empty((n_int, cfg.n_symbols))
    for k in range(n_int):
        win = history.window(k * T_x, (k + 1) * T_x, shift=True)
        models = [_effective_model(cfg, decided, s) for s in range(cfg.n_symbols)]
        out = demodulate(win, models, rx, priors, decision_times=(T_x,),
                         lam=lam, sigma_floor=sigma_floor)
        decided.append(int(out.decisions[0]))
        ties[k] = bool(out.ties[0])
        z_final[k] = out.z[:, 0]
    decisions = np.array(decided, dtype=np.int64)
    correct = None
    if truth is not None:
        correct = decisions == np.asarray(truth, dtype=np.int64)
    return IsiResult(decisions=decisions, ties=ties, correct=correct,
                     z_final=z_final)
