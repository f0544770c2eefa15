"""Exact Bayesian filtering of the hidden molecular state from bind events.

The receiver observes only the bound-receptor count ``b(t)``.  Conditional on
the transmitted symbol, the hidden state (per-voxel signalling counts plus
transmitter intermediates) is a continuous-time Markov process observed
through a counting process whose intensity is ``lam * (M - b) * n_R``; the
conditional law ``pi(t)`` over a truncated state space therefore evolves as

* between receiver events: hidden-generator evolution combined with the
  binding-survival weighting ``exp(-lam (M - b) n_R dt)`` per state (the
  unbind survival ``exp(-mu b dt)`` is state-independent and is added to the
  log-likelihood analytically), followed by renormalization, the discarded
  mass accruing to the log-likelihood;
* at a bind event: reweight each state by its receiver-voxel count, shift one
  signalling molecule out of the receiver voxel, add ``log(lam (M-b) E[n_R])``
  to the log-likelihood;
* at an unbind event: shift one signalling molecule back in (mass-preserving,
  no reweighting), add ``log(mu b)``.

The truncated space is a box with per-coordinate caps; transitions that would
leave the box are suppressed and their instantaneous rate mass accumulates in
a truncation diagnostic.  The cumulative absorbed count is a pure sink and is
marginalized out of the filtered state.  Between-event propagation uses
uniformization (nonnegativity-preserving), with a dense matrix-exponential
propagator available for small spaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, CoverageError, ModelInconsistencyError, NumericalFault
from .model import KIND_BINDING, KIND_FIRST, KIND_SECOND, KIND_UNBINDING, KIND_ZEROTH, Model
from .rng import DOMAIN_PILOT, substream
from .ssa import BindingHistory, simulate

#: refuse state spaces larger than this
MAX_STATES = 10**7

#: per-run truncation diagnostic above this flags the result unreliable
TRUNC_THRESHOLD = 1e-6

#: target number of uniformization terms per substep; large enough that the
#: Poisson-tail overhead is amortized, small enough that exp(-a) stays
#: representable
_LAMBDA_H = 400.0

#: Poisson-tail cutoff of the uniformization series
_SERIES_TOL = 1e-12

#: dense-expm propagator allowed below this state count
_DENSE_LIMIT = 5000


def _uniform_series(A_off, wdiag, inv, a, v0, tol):
    """Poisson-weighted power series of W = I + B/lam_u applied to v0.

    ``A_off`` is the off-diagonal generator (CSR) and ``wdiag`` the
    (nonnegative) diagonal of W; returns (result, converged).
    """
    v = v0.copy()
    w = math.exp(-a)
    acc = w * v
    cum = w
    m = 0
    m_max = int(10.0 * a + 200.0)
    buf = np.empty_like(v)
    while 1.0 - cum > tol:
        m += 1
        if m > m_max:
            return acc, False
        av = A_off @ v
        av *= inv
        np.multiply(wdiag, v, out=buf)
        av += buf
        v = av
        w *= a / m
        np.multiply(v, w, out=buf)
        acc += buf
        cum += w
    return acc, True


def hidden_coords(model: Model) -> np.ndarray:
    """Indices of the model coordinates that form the filtered hidden state.

    Pure-sink coordinates — only ever incremented, never read by any
    propensity, and not a voxel count (e.g. the cumulative absorbed count) —
    carry no information about future dynamics and are marginalized out.
    """
    dec = np.zeros(model.n_coords, dtype=bool)
    used = np.zeros(model.n_coords, dtype=bool)
    for ch in model.channels:
        dec |= ch.delta < 0
        if ch.idx1 >= 0:
            used[ch.idx1] = True
        if ch.idx2 >= 0:
            used[ch.idx2] = True
    keep = dec | used
    keep[:model.n_voxels] = True
    if model.receiver_coord >= 0:
        keep[model.receiver_coord] = True
    return np.flatnonzero(keep)


def pilot_caps(model: Model, horizon: float, n_runs: int = 100,
               seed: int = 0, margin: float = 5.0,
               include_total: bool = False):
    """Per-coordinate caps from pilot simulations: max count + margin*sqrt(max).

    With ``include_total`` also returns a cap on the summed hidden count
    (same rule applied to the empirical maximum of the total), which trims
    the unreachable high-count corners off the box.  Pilot seeds come from
    their own substream and never overlap evaluation seeds derived from the
    same base.
    """
    _, _, _, _, deltas, _ = model.channel_arrays()
    kept = hidden_coords(model)
    best = np.zeros(model.n_coords, dtype=np.int64)
    best_total = 0
    for i in range(n_runs):
        tr = simulate(model, horizon, substream(seed, DOMAIN_PILOT, i))
        path = tr.initial_state.n[None, :] + np.concatenate(
            [np.zeros((1, model.n_coords), dtype=np.int64),
             np.cumsum(deltas[tr.channels], axis=0)])
        np.maximum(best, path.max(axis=0), out=best)
        best_total = max(best_total, int(path[:, kept].sum(axis=1).max()))
    caps = best + np.ceil(margin * np.sqrt(np.maximum(best, 1))).astype(np.int64)
    caps = np.maximum(caps, 3)
    if not include_total:
        return caps
    total_cap = best_total + int(np.ceil(margin * math.sqrt(max(best_total, 1))))
    return caps, max(total_cap, 3)


@dataclass
class FilterState:
    """Conditional law over the truncated hidden space at one instant."""

    pi: np.ndarray
    b: int
    t: float
    loglik: float = 0.0
    trunc: float = 0.0

    def copy(self) -> "FilterState":
        return FilterState(self.pi.copy(), self.b, self.t, self.loglik, self.trunc)


class StateSpace:
    """Box-truncated enumeration of the hidden state with channel operators.

    Coordinates are the model's count coordinates minus any pure sinks
    (coordinates only ever incremented, e.g. the cumulative absorbed count);
    ``pi`` lives on the grid ``prod_i {0..cap_i}``.  Each hidden (b-preserving)
    channel becomes a pair of source/destination slice tuples plus a
    propensity array, so applying the generator is a handful of vectorized
    adds.
    """

    def __init__(self, model: Model, caps: Sequence[int],
                 total_cap: int | None = None):
        caps = np.asarray(caps, dtype=np.int64)
        if caps.size != model.n_coords:
            raise ConfigError("need one cap per model coordinate")
        self.keep = hidden_coords(model)
        self.model = model
        self.total_cap = total_cap
        self.caps = caps[self.keep]
        self.shape = tuple(int(c) + 1 for c in self.caps)
        self.n_states = int(np.prod([s for s in self.shape], dtype=np.int64))
        if self.n_states > MAX_STATES:
            raise ConfigError(
                f"state space has {self.n_states} states "
                f"(> {MAX_STATES}); reduce the caps or the model")
        self.coord_names = tuple(model.coord_names[i] for i in self.keep)
        self._axis_of = {c: a for a, c in enumerate(self.keep)}
        if model.receiver_coord >= 0:
            self.recv_axis = self._axis_of[model.receiver_coord]
        else:
            self.recv_axis = -1

        # receiver-count grid
        if self.recv_axis >= 0:
            ar = np.arange(self.shape[self.recv_axis], dtype=np.float64)
            sh = [1] * len(self.shape)
            sh[self.recv_axis] = self.shape[self.recv_axis]
            self.eta_r = np.broadcast_to(ar.reshape(sh), self.shape)
        else:
            self.eta_r = np.zeros(self.shape)

        self._build_operators()

    def _coord_grid(self, axis: int) -> np.ndarray:
        ar = np.arange(self.shape[axis], dtype=np.float64)
        sh = [1] * len(self.shape)
        sh[axis] = self.shape[axis]
        return np.broadcast_to(ar.reshape(sh), self.shape)

    def _build_operators(self):
        model = self.model
        # total hidden count per state, for the optional total-count cap
        totals = np.zeros(self.shape, dtype=np.int64)
        for axis in range(len(self.shape)):
            totals = totals + self._coord_grid(axis).astype(np.int64)
        if self.total_cap is not None:
            region = totals <= self.total_cap
        else:
            region = np.ones(self.shape, dtype=bool)
        self.region = region

        ops = []          # (rate array on src slice, src slices, dst slices)
        diag = np.zeros(self.shape)
        supp = np.zeros(self.shape)
        for ch in model.channels:
            if ch.code in (KIND_BINDING, KIND_UNBINDING):
                continue
            delta = ch.delta[self.keep]
            if ch.code == KIND_ZEROTH:
                rate = np.full(self.shape, ch.rate)
            elif ch.code == KIND_FIRST:
                rate = ch.rate * self._coord_grid(self._axis_of[ch.idx1])
            elif ch.code == KIND_SECOND:
                rate = (ch.rate * self._coord_grid(self._axis_of[ch.idx1])
                        * self._coord_grid(self._axis_of[ch.idx2]))
            else:
                raise ConfigError(f"unsupported channel code {ch.code}")
            src = [slice(None)] * len(self.shape)
            dst = [slice(None)] * len(self.shape)
            for axis, dv in enumerate(delta):
                if dv == 0:
                    continue
                cap = self.shape[axis] - 1
                if dv > 0:
                    src[axis] = slice(0, cap + 1 - dv)
                    dst[axis] = slice(dv, cap + 1)
                else:
                    src[axis] = slice(-dv, cap + 1)
                    dst[axis] = slice(0, cap + 1 + dv)
            if all(s == slice(None) for s in src):
                # no net effect on the kept coordinates: a null transition
                continue
            src_t, dst_t = tuple(src), tuple(dst)
            in_box = np.zeros(self.shape, dtype=bool)
            in_box[src_t] = True
            allowed = in_box & region
            if self.total_cap is not None and int(delta.sum()) > 0:
                allowed &= totals + int(delta.sum()) <= self.total_cap
            rate_allowed = np.where(allowed, rate, 0.0)
            diag += rate_allowed
            # rate mass of suppressed transitions out of reachable states
            supp += np.where(region & ~allowed, rate, 0.0)
            ops.append((np.ascontiguousarray(rate_allowed[src_t]), src_t, dst_t))
        self.ops = ops
        self.diag = diag
        self.supp = supp

    def apply_generator(self, pi: np.ndarray) -> np.ndarray:
        """A @ pi for the hidden (truncated, conservative) generator."""
        out = -self.diag * pi
        for rate, src, dst in self.ops:
            out[dst] += rate * pi[src]
        return out

    def sparse_generator(self):
        """The same generator as a CSR matrix over flattened states.

        Used by the propagation hot loop; one sparse matvec replaces the
        per-channel slice arithmetic.
        """
        from scipy import sparse

        A = self.sparse_offdiag() - sparse.diags(self.diag.reshape(-1))
        return A.tocsr()

    def sparse_offdiag(self):
        """Off-diagonal part of the generator as a CSR matrix.

        The propagation hot loop applies this with one sparse matvec and
        handles the (b-dependent) diagonal as a vector.
        """
        from scipy import sparse

        n = self.n_states
        idx = np.arange(n, dtype=np.int64).reshape(self.shape)
        rows, cols, vals = [], [], []
        for rate, src, dst in self.ops:
            rows.append(idx[dst].ravel())
            cols.append(idx[src].ravel())
            vals.append(rate.ravel())
        if not rows:
            return sparse.csr_matrix((n, n))
        A = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n)).tocsr()
        A.sum_duplicates()
        return A

    def point_distribution(self, counts: np.ndarray) -> np.ndarray:
        """Delta distribution at the (full-coordinate) count vector."""
        idx = tuple(int(counts[i]) for i in self.keep)
        for a, v in enumerate(idx):
            if not 0 <= v < self.shape[a]:
                raise ConfigError("initial counts outside the truncated box")
        if not self.region[idx]:
            raise ConfigError("initial counts outside the total-count cap")
        pi = np.zeros(self.shape)
        pi[idx] = 1.0
        return pi

    def dense_generator(self):
        """Dense (n, n) generator and flat receiver-count vector (tests)."""
        if self.n_states > _DENSE_LIMIT:
            raise ConfigError(
                f"dense generator limited to {_DENSE_LIMIT} states")
        n = self.n_states
        A = np.zeros((n, n))
        eye = np.eye(n).reshape((n,) + self.shape)
        for k in range(n):
            col = self.apply_generator(eye[k])
            A[:, k] = col.reshape(-1)
        # apply_generator maps column k's mass; transpose convention: A[i, k]
        # is the rate from flat state k to i (columns sum to zero)
        return A, self.eta_r.reshape(-1).copy()


@dataclass
class ConditionalMean:
    """E[n_R(t) | s, history] recorded at checkpoints, with exact integrals.

    Presents the same interface as a tabulated mean-signal model (``value``,
    ``integral``, ``horizon``), so it can be substituted into the
    log-posterior filter.  ``cumw`` is the exact accumulated continuous drift
    ``int lam (M - b) E dt`` (the filter's between-event mass decay), and
    ``integral`` divides the relevant increments by ``lam (M - b)`` segment
    by segment, so the substituted filter reproduces the exact filter's
    drift bit-for-bit at checkpoint boundaries.
    """

    times: np.ndarray       # checkpoint times (events + requested grid)
    values: np.ndarray      # E[n_R] just before any event at that time
    cumw: np.ndarray        # accumulated lam*(M-b)*E drift up to that time
    b_after: np.ndarray     # bound count on [times[i], times[i+1])
    lam: float
    receptor_count: int
    symbol: int = 0

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def t0(self) -> float:
        return float(self.times[0])

    def _cumw_at(self, t: float) -> float:
        return float(np.interp(t, self.times, self.cumw))

    def _b_at(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t + 1e-12, side="right")) - 1
        return int(self.b_after[max(i, 0)])

    def value(self, t):
        """E[n_R] at ``t`` (pre-event convention at event checkpoints)."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        tol = 1e-9 * max(1.0, self.horizon)
        if np.any(t_arr < self.times[0] - tol) or np.any(t_arr > self.horizon + tol):
            raise CoverageError("query outside the recorded range")
        i = np.searchsorted(self.times, t_arr - tol, side="left")
        i = np.minimum(i, self.times.size - 1)
        exact = np.abs(self.times[i] - t_arr) <= tol
        out = np.where(exact, self.values[i],
                       np.interp(t_arr, self.times, self.values))
        return float(out[0]) if np.ndim(t) == 0 else out

    def integral(self, a: float, b: float) -> float:
        """Exact integral of E[n_R] over [a, b]."""
        if b < a:
            raise ConfigError("integration bounds must be ordered")
        if b == a:
            return 0.0
        tol = 1e-9 * max(1.0, self.horizon)
        if a < self.times[0] - tol or b > self.horizon + tol:
            raise CoverageError("integration range outside the recorded range")
        inner = self.times[(self.times > a + tol) & (self.times < b - tol)]
        pts = np.concatenate(([a], inner, [b]))
        total = 0.0
        for u, v in zip(pts[:-1], pts[1:]):
            w = self.lam * (self.receptor_count - self._b_at(u))
            if w > 0:
                total += (self._cumw_at(v) - self._cumw_at(u)) / w
            else:
                # binding saturated: no mass decay; fall back to trapezoid
                total += 0.5 * (self.value(u) + self.value(v)) * (v - u)
        return total


@dataclass
class ExactTrace:
    """Output of one exact filter run."""

    symbol: int
    prior: float
    times: np.ndarray       # decision times
    loglik: np.ndarray      # log prior + event-sequence log-likelihood
    cond_mean: ConditionalMean
    trunc: float            # accumulated truncation diagnostic
    reliable: bool
    final: FilterState = field(repr=False, default=None)


class ExactFilter:
    """Filter engine for one symbol model over a fixed truncated space."""

    def __init__(self, model: Model, caps: Sequence[int], *,
                 total_cap: int | None = None,
                 propagator: str = "uniformization"):
        if propagator not in ("uniformization", "expm"):
            raise ConfigError(f"unknown propagator {propagator!r}")
        self.model = model
        self.space = StateSpace(model, caps, total_cap)
        self.lam = model.lam
        self.mu = model.mu
        self.M = model.receptor_count
        self.propagator = propagator
        self._flat = None
        self._b_cache: dict[int, tuple[np.ndarray, float]] = {}
        if propagator == "expm":
            if self.space.n_states > _DENSE_LIMIT:
                raise ConfigError("expm propagator limited to small spaces")
            self._A_dense, self._eta_flat = self.space.dense_generator()

    # -- state construction ------------------------------------------------
    def initial_filter_state(self) -> FilterState:
        model = self.model
        pi = np.zeros(self.space.shape)
        base = model.initial_counts
        mixtures = [(1.0, base)]
        for prob, add_if, add_else in model.random_initial:
            mixtures = [(w * p, v + a)
                        for w, v in mixtures
                        for p, a in ((prob, add_if), (1.0 - prob, add_else))
                        if p > 0]
        for w, counts in mixtures:
            pi += w * self.space.point_distribution(counts)
        return FilterState(pi=pi, b=0, t=0.0)

    def expected_nr(self, fs: FilterState) -> float:
        return float(np.sum(self.space.eta_r * fs.pi))

    # -- between-event propagation ----------------------------------------
    def propagate_no_event(self, fs: FilterState, dt: float) -> float:
        """Advance ``fs`` by ``dt`` with no receiver event observed.

        Mutates ``fs`` in place (pi, t, loglik, trunc) and returns the
        continuous drift increment ``-log(surviving mass)`` of the interval
        (the exact value of ``int lam (M - b) E[n_R] dt``).
        """
        if dt < 0:
            raise ConfigError("propagation interval must be nonnegative")
        if dt == 0:
            return 0.0
        c_bind = self.lam * (self.M - fs.b)
        drift = 0.0
        if self.propagator == "expm":
            from scipy.linalg import expm

            B = self._A_dense - np.diag(c_bind * self._eta_flat)
            pi = expm(B * dt) @ fs.pi.reshape(-1)
            mass = float(pi.sum())
            if not np.isfinite(mass) or mass <= 0:
                raise NumericalFault("propagation produced invalid mass")
            fs.trunc += dt * float(np.sum(self.space.supp.reshape(-1) * pi / mass))
            fs.pi = (pi / mass).reshape(self.space.shape)
            drift = -math.log(mass)
        else:
            A_off, supp_f = self._flat_operators()
            wdiag, lam_u = self._b_coefficients(fs.b)
            pi = fs.pi.reshape(-1)
            remaining = dt
            while remaining > 1e-15:
                h = remaining if lam_u * remaining <= _LAMBDA_H else _LAMBDA_H / lam_u
                pi = self._uniform_step(pi, A_off, wdiag, lam_u, h)
                mass = float(pi.sum())
                if not np.isfinite(mass) or mass <= 0:
                    raise NumericalFault("propagation produced invalid mass")
                drift += -math.log(mass)
                pi = pi / mass
                fs.trunc += h * float(supp_f @ pi)
                remaining -= h
            fs.pi = pi.reshape(self.space.shape)
        if np.any(fs.pi < -1e-12) or not np.all(np.isfinite(fs.pi)):
            raise NumericalFault(
                f"filter state corrupted at t={fs.t + dt} (b={fs.b})")
        np.clip(fs.pi, 0.0, None, out=fs.pi)
        fs.pi /= fs.pi.sum()
        fs.t += dt
        fs.loglik += -drift - self.mu * fs.b * dt
        return drift

    def _flat_operators(self):
        """Off-diagonal CSR generator and flat suppression-rate vector."""
        if self._flat is None:
            self._flat = (self.space.sparse_offdiag(),
                          self.space.supp.reshape(-1).copy())
        return self._flat

    def _b_coefficients(self, b: int):
        """Cached per-b diagonal of W = I + B/lam_u and the rate bound.

        B = A - diag(c_bind * eta_r) with c_bind = lam (M - b); lam_u bounds
        the total per-state outflow over the reachable region, which keeps
        every entry of W nonnegative.
        """
        hit = self._b_cache.get(b)
        if hit is not None:
            return hit
        c_bind = self.lam * (self.M - b)
        decay = (self.space.diag + c_bind * self.space.eta_r).reshape(-1)
        region = self.space.region.reshape(-1)
        lam_u = float(np.max(decay[region])) if region.any() else 0.0
        wdiag = 1.0 - decay / lam_u if lam_u > 0 else np.ones_like(decay)
        self._b_cache[b] = (wdiag, lam_u)
        return wdiag, lam_u

    def _uniform_step(self, pi, A_off, wdiag, lam_u, h):
        """exp(B h) @ pi by uniformization, W = I + B/lam_u."""
        if lam_u <= 0.0:
            return pi.copy()
        a = lam_u * h
        out, ok = _uniform_series(A_off, wdiag, 1.0 / lam_u, a, pi, _SERIES_TOL)
        if not ok:
            raise NumericalFault("uniformization series failed to converge")
        return out

    # -- event updates -----------------------------------------------------
    def apply_bind_event(self, fs: FilterState) -> None:
        if fs.b >= self.M:
            raise ModelInconsistencyError(
                f"bind observed with all {self.M} receptors already bound")
        if self.space.recv_axis < 0:
            raise ConfigError("model has no receiver voxel")
        e = self.expected_nr(fs)
        if e <= 0.0:
            raise ModelInconsistencyError(
                f"bind observed at t={fs.t} but the filter assigns zero "
                f"probability to any signalling molecule at the receiver")
        w = self.space.eta_r * fs.pi
        fs.pi = np.roll(w, -1, axis=self.space.recv_axis)
        # roll wraps the eta_R = 0 layer (weight 0) to the top; zero it
        idx = [slice(None)] * fs.pi.ndim
        idx[self.space.recv_axis] = -1
        fs.pi[tuple(idx)] = 0.0
        fs.pi /= e
        fs.loglik += math.log(self.lam * (self.M - fs.b) * e)
        fs.b += 1

    def apply_unbind_event(self, fs: FilterState) -> None:
        if fs.b <= 0:
            raise ModelInconsistencyError("unbind observed with no bound receptor")
        if self.space.recv_axis < 0:
            raise ConfigError("model has no receiver voxel")
        axis = self.space.recv_axis
        top = [slice(None)] * fs.pi.ndim
        top[axis] = -1
        # a state can absorb the released molecule if the receiver count is
        # below its cap and the shifted state stays inside the region
        can_move = np.ones(self.space.shape, dtype=bool)
        can_move[tuple(top)] = False
        dst_ok = np.roll(self.space.region, -1, axis=axis)
        dst_ok[tuple(top)] = False
        can_move &= dst_ok
        movable = np.where(can_move, fs.pi, 0.0)
        frozen = fs.pi - movable
        overflow = float(frozen.sum())
        fs.pi = np.roll(movable, 1, axis=axis) + frozen
        if overflow > 0:
            # mass that cannot shift stays in place (truncation policy) and
            # is counted in the diagnostic; total mass is still preserved
            fs.trunc += overflow
        fs.loglik += math.log(self.mu * fs.b)
        fs.b -= 1

    # -- full run ----------------------------------------------------------
    def run(self, history: BindingHistory, prior: float = 1.0,
            decision_times: Sequence[float] = (), *,
            grid_dt: float | None = None) -> ExactTrace:
        """Filter a full binding history, sampling at the decision times.

        ``grid_dt`` adds uniform checkpoints to the recorded conditional
        mean (useful for comparing against the Monte-Carlo mean signal).
        """
        if history.receptor_count != self.M:
            raise ConfigError("history and model disagree on receptor count")
        if history.b0 != 0:
            raise ConfigError("the filter starts from an all-unbound receiver")
        if prior <= 0:
            raise ConfigError("prior must be positive")
        dec = np.asarray(sorted(decision_times), dtype=np.float64)
        horizon = max([history.horizon] + list(dec[-1:]))
        checkpoints = set(np.round(dec, 12).tolist())
        if grid_dt:
            n = int(math.floor(horizon / grid_dt + 1e-9))
            checkpoints |= set(np.round(grid_dt * np.arange(n + 1), 12).tolist())
        checkpoints |= set(np.round(history.times, 12).tolist())
        checkpoints |= {0.0, round(horizon, 12)}
        points = sorted(checkpoints)

        fs = self.initial_filter_state()
        cum = 0.0
        rec_t, rec_e, rec_c, rec_b = [], [], [], []
        dec_ll = np.empty(dec.size)
        ll0 = math.log(prior)
        ei = 0
        for tau in points:
            cum += self.propagate_no_event(fs, tau - fs.t)
            rec_t.append(tau)
            rec_e.append(self.expected_nr(fs))
            rec_c.append(cum)
            while ei < history.n_events and abs(history.times[ei] - tau) <= 1e-12:
                if history.kinds[ei] > 0:
                    self.apply_bind_event(fs)
                else:
                    self.apply_unbind_event(fs)
                ei += 1
            rec_b.append(fs.b)
            for di in np.flatnonzero(np.abs(dec - tau) <= 1e-12):
                dec_ll[di] = ll0 + fs.loglik
        if ei != history.n_events:
            raise NumericalFault("some receiver events were not consumed")
        cm = ConditionalMean(times=np.array(rec_t), values=np.array(rec_e),
                             cumw=np.array(rec_c), b_after=np.array(rec_b),
                             lam=self.lam, receptor_count=self.M,
                             symbol=self.model.symbol)
        return ExactTrace(symbol=self.model.symbol, prior=prior, times=dec,
                          loglik=dec_ll, cond_mean=cm, trunc=fs.trunc,
                          reliable=fs.trunc < TRUNC_THRESHOLD, final=fs)


@dataclass
class OptimalOutput:
    """K exact filter traces with MAP decisions at the decision times."""

    times: np.ndarray
    loglik: np.ndarray      # (K, n_times)
    decisions: np.ndarray
    ties: np.ndarray
    priors: np.ndarray
    traces: tuple[ExactTrace, ...]
    reliable: bool

    def l_diff(self, s1: int, s2: int) -> np.ndarray:
        """L_{s1}(t) - L_{s2}(t); the only meaningful absolute quantity."""
        return self.loglik[s1] - self.loglik[s2]


def optimal_demodulate(history: BindingHistory, models: Sequence[Model],
                       priors: Sequence[float] | None = None,
                       decision_times: Sequence[float] | float = (), *,
                       caps: Sequence | None = None,
                       filters: Sequence[ExactFilter] | None = None,
                       grid_dt: float | None = None,
                       pilot_seed: int = 0) -> OptimalOutput:
    """Optimal MAP demodulation: one exact filter per candidate symbol.

    Pass prebuilt ``filters`` to amortize state-space construction across
    trajectories; otherwise caps come from ``caps`` (one vector per symbol)
    or from pilot simulations.
    """
    from .demod import _decide

    if np.isscalar(decision_times):
        decision_times = (float(decision_times),)
    if filters is None:
        if caps is None:
            horizon = max([history.horizon] + list(decision_times))
            caps = [pilot_caps(m, horizon, seed=pilot_seed, include_total=True)
                    for m in models]
        filters = []
        for m, c in zip(models, caps):
            if isinstance(c, tuple):
                c, total = c
            else:
                total = None
            filters.append(ExactFilter(m, c, total_cap=total))
    K = len(filters)
    if K < 2:
        raise ConfigError("demodulation needs at least two candidate symbols")
    if priors is None:
        priors = np.full(K, 1.0 / K)
    priors = np.asarray(priors, dtype=np.float64)
    if priors.shape != (K,) or np.any(priors <= 0):
        raise ConfigError("priors must be K positive weights")
    priors = priors / priors.sum()
    traces = tuple(f.run(history, float(priors[s]), decision_times,
                         grid_dt=grid_dt)
                   for s, f in enumerate(filters))
    ll = np.stack([tr.loglik for tr in traces])
    decisions, ties = _decide(ll)
    return OptimalOutput(times=traces[0].times, loglik=ll, decisions=decisions,
                         ties=ties, priors=priors, traces=traces,
                         reliable=all(tr.reliable for tr in traces))
