"""Exact event-driven stochastic simulation of a compiled model.

Direct-method simulation: draw an exponential waiting time at the total
propensity, then pick the firing channel proportionally to its propensity
(two uniforms per event).  Channel selection uses a linear scan for small
channel lists and a binary search over the cumulative propensities for large
ones; both consume the same uniforms and fire the same channel, so replay is
deterministic either way.

Per-trajectory randomness comes from a xoshiro256++ generator whose state is
seeded through splitmix64 from the trajectory's 64-bit seed, so trajectories
with disjoint seeds are independent substreams and every trajectory is
bit-reproducible from ``(model, horizon, seed)``.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .errors import ConfigError, NumericalFault
from .model import (
    Channel,
    KIND_BINDING,
    KIND_FIRST,
    KIND_SECOND,
    KIND_UNBINDING,
    KIND_ZEROTH,
    Model,
    SystemState,
)
from .rng import GENERATOR_NAME, derive_seed

SERIAL_VERSION = 1

# selection strategy switches to binary search at this channel count
_BINARY_THRESHOLD = 64

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S64 = np.uint64(64)
_S11 = np.uint64(11)
_S17 = np.uint64(17)
_S23 = np.uint64(23)
_S45 = np.uint64(45)
_TWO_M53 = 2.0**-53


@njit(cache=True, inline="always")
def _sm64_step(z):
    z = z + _GOLD
    x = z
    x = (x ^ (x >> _S30)) * _MIX1
    x = (x ^ (x >> _S27)) * _MIX2
    x = x ^ (x >> _S31)
    return z, x


@njit(cache=True)
def _xo_init(seed):
    s = np.empty(4, dtype=np.uint64)
    z = seed
    for i in range(4):
        z, v = _sm64_step(z)
        s[i] = v
    return s


@njit(cache=True, inline="always")
def _rotl(x, k):
    return (x << k) | (x >> (_S64 - k))


@njit(cache=True, inline="always")
def _xo_next(s):
    result = _rotl(s[0] + s[3], _S23) + s[0]
    t = s[1] << _S17
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], _S45)
    return result


@njit(cache=True, inline="always")
def _uniform(s):
    # in (0, 1]; safe as the argument of log
    return (np.float64(_xo_next(s) >> _S11) + 1.0) * _TWO_M53


@njit(cache=True)
def _ssa_core(x, b, M, kinds, rates, i1, i2, deltas, dbs,
              t0, t_end, seed, record_all, bind_id, unbind_id,
              grid_t0, grid_dt, n_grid, i_recv):
    """Simulate from ``t0`` to ``t_end``; mutates ``x`` in place.

    Returns (event times, event channels, final b, receiver-count samples on
    the uniform grid, status).  Status 0 is success, 1 a non-finite
    propensity, 2 a receptor-count violation, 3 a negative count.
    """
    n_ch = kinds.shape[0]
    use_binary = n_ch >= _BINARY_THRESHOLD
    rng = _xo_init(np.uint64(seed))
    props = np.empty(n_ch, dtype=np.float64)
    cum = np.empty(n_ch, dtype=np.float64)
    cap = 1024
    times = np.empty(cap, dtype=np.float64)
    chans = np.empty(cap, dtype=np.int32)
    n_ev = 0
    samples = np.empty(n_grid, dtype=np.int64)
    gi = 0
    status = 0
    t = t0

    while True:
        a0 = 0.0
        for c in range(n_ch):
            k = kinds[c]
            if k == KIND_ZEROTH:
                p = rates[c]
            elif k == KIND_FIRST:
                p = rates[c] * x[i1[c]]
            elif k == KIND_SECOND:
                p = rates[c] * x[i1[c]] * x[i2[c]]
            elif k == KIND_BINDING:
                p = rates[c] * x[i1[c]] * (M - b)
            else:
                p = rates[c] * b
            props[c] = p
            a0 += p
        if not np.isfinite(a0):
            status = 1
            break
        if a0 <= 0.0:
            t_next = t_end + 1.0
        else:
            t_next = t + (-np.log(_uniform(rng)) / a0)
        while gi < n_grid:
            gt = grid_t0 + gi * grid_dt
            if gt >= t_next or gt > t_end:
                break
            samples[gi] = x[i_recv] if i_recv >= 0 else 0
            gi += 1
        if t_next > t_end or a0 <= 0.0:
            break
        # channel selection on the shared cumulative ordering
        u = _uniform(rng) * a0
        if use_binary:
            acc = 0.0
            for c in range(n_ch):
                acc += props[c]
                cum[c] = acc
            lo = 0
            hi = n_ch - 1
            while lo < hi:
                mid = (lo + hi) // 2
                if cum[mid] < u:
                    lo = mid + 1
                else:
                    hi = mid
            chosen = lo
        else:
            acc = 0.0
            chosen = n_ch - 1
            for c in range(n_ch):
                acc += props[c]
                if u <= acc:
                    chosen = c
                    break
        # fire
        for k in range(x.shape[0]):
            x[k] += deltas[chosen, k]
            if x[k] < 0:
                status = 3
        b += dbs[chosen]
        if b < 0 or (M > 0 and b > M):
            status = 2
        if status != 0:
            break
        if record_all or chosen == bind_id or chosen == unbind_id:
            if n_ev == cap:
                cap *= 2
                new_t = np.empty(cap, dtype=np.float64)
                new_c = np.empty(cap, dtype=np.int32)
                new_t[:n_ev] = times[:n_ev]
                new_c[:n_ev] = chans[:n_ev]
                times = new_t
                chans = new_c
            times[n_ev] = t_next
            chans[n_ev] = chosen
            n_ev += 1
        t = t_next
    # flush remaining grid samples with the final state
    while gi < n_grid:
        samples[gi] = x[i_recv] if i_recv >= 0 else 0
        gi += 1
    return times[:n_ev].copy(), chans[:n_ev].copy(), b, samples, status


@dataclass
class BindingHistory:
    """The receiver observable: ordered bind/unbind event times.

    ``kinds`` holds +1 for a bind and -1 for an unbind; accumulating them on
    top of ``b0`` reconstructs the piecewise-constant bound-receptor count.
    """

    times: np.ndarray
    kinds: np.ndarray
    receptor_count: int
    horizon: float
    t0: float = 0.0
    b0: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.kinds = np.asarray(self.kinds, dtype=np.int64)
        if self.times.shape != self.kinds.shape:
            raise ConfigError("times and kinds must have equal length")
        if self.times.size and np.any(np.diff(self.times) < 0):
            raise ConfigError("event times must be nondecreasing")
        path = self.b0 + np.cumsum(self.kinds)
        if path.size and (path.min() < 0 or path.max() > self.receptor_count):
            raise ConfigError("bound-receptor path leaves [0, M]")

    @property
    def n_events(self) -> int:
        return int(self.times.size)

    def b_final(self) -> int:
        return int(self.b0 + self.kinds.sum())

    def b_at(self, t: float) -> int:
        """Bound count just after time ``t`` (right-continuous)."""
        i = np.searchsorted(self.times, t, side="right")
        return int(self.b0 + self.kinds[:i].sum())

    def bind_count(self, t: float) -> int:
        """Cumulative number of bind events in [t0, t] (the counting signal)."""
        i = np.searchsorted(self.times, t, side="right")
        return int(np.count_nonzero(self.kinds[:i] == 1))

    def window(self, a: float, bnd: float, shift: bool = True) -> "BindingHistory":
        """Sub-history on [a, bnd); optionally shifted to start at time 0."""
        sel = (self.times >= a) & (self.times < bnd)
        b_start = self.b_at(a - 1e-12) if a > self.t0 else self.b0
        t = self.times[sel]
        off = a if shift else 0.0
        return BindingHistory(t - off, self.kinds[sel], self.receptor_count,
                              horizon=bnd - off, t0=a - off, b0=b_start)

    # -- serialization -----------------------------------------------------
    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# binding-history v{SERIAL_VERSION}\n")
        buf.write(f"# receptors: {self.receptor_count}\n")
        buf.write(f"# horizon: {self.horizon!r}\n")
        buf.write(f"# t0: {self.t0!r}\n")
        buf.write(f"# b0: {self.b0}\n")
        for t, k in zip(self.times, self.kinds):
            buf.write(f"{float(t)!r}\t{'bind' if k > 0 else 'unbind'}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "BindingHistory":
        meta = {}
        times = []
        kinds = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    k, v = body.split(":", 1)
                    meta[k.strip()] = v.strip()
                continue
            t, ev = line.split("\t")
            times.append(float(t))
            kinds.append(1 if ev == "bind" else -1)
        return cls(np.array(times), np.array(kinds),
                   receptor_count=int(meta["receptors"]),
                   horizon=float(meta["horizon"]), t0=float(meta.get("t0", 0.0)),
                   b0=int(meta.get("b0", 0)))

    def to_binary(self, path) -> None:
        meta = json.dumps({"version": SERIAL_VERSION,
                           "receptors": self.receptor_count,
                           "horizon": self.horizon, "t0": self.t0,
                           "b0": self.b0})
        np.savez_compressed(path, times=self.times, kinds=self.kinds,
                            meta=np.frombuffer(meta.encode(), dtype=np.uint8))

    @classmethod
    def from_binary(cls, path) -> "BindingHistory":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            return cls(z["times"], z["kinds"],
                       receptor_count=meta["receptors"],
                       horizon=meta["horizon"], t0=meta.get("t0", 0.0),
                       b0=meta.get("b0", 0))


@dataclass
class Trajectory:
    """One exact realization: time-ordered events plus the final state."""

    times: np.ndarray
    channels: np.ndarray
    initial_state: SystemState
    final_state: SystemState
    horizon: float
    seed: int
    t0: float = 0.0
    rng_name: str = GENERATOR_NAME
    selection: str = "linear"
    record: str = "full"
    sample_times: np.ndarray | None = None
    sample_receiver: np.ndarray | None = None
    bind_channel: int = -1
    unbind_channel: int = -1
    model: Model | None = field(default=None, repr=False)

    @property
    def n_events(self) -> int:
        return int(self.times.size)

    def replay(self, model: Model | None = None) -> SystemState:
        """Re-apply all recorded deltas from the initial state.

        Only meaningful for full-event trajectories; used to validate that
        the event list reproduces the final state.
        """
        model = model or self.model
        if model is None:
            raise ConfigError("replay needs the generating model")
        _, _, _, _, deltas, dbs = model.channel_arrays()
        st = self.initial_state.copy()
        for c in self.channels:
            st.n += deltas[c]
            st.b += dbs[c]
        return st

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# trajectory v{SERIAL_VERSION}\n")
        buf.write(f"# rng: {self.rng_name}\n")
        buf.write(f"# selection: {self.selection}\n")
        buf.write(f"# seed: {self.seed}\n")
        buf.write(f"# horizon: {self.horizon!r}\n")
        for t, c in zip(self.times, self.channels):
            buf.write(f"{float(t)!r}\t{int(c)}\n")
        return buf.getvalue()


def _channel_arrays(channels: Sequence[Channel], n_coords: int):
    kinds = np.array([c.code for c in channels], dtype=np.int64)
    rates = np.array([c.rate for c in channels], dtype=np.float64)
    i1 = np.array([c.idx1 for c in channels], dtype=np.int64)
    i2 = np.array([c.idx2 for c in channels], dtype=np.int64)
    if len(channels):
        deltas = np.stack([c.delta for c in channels]).astype(np.int64)
    else:
        deltas = np.zeros((0, n_coords), dtype=np.int64)
    dbs = np.array([c.db for c in channels], dtype=np.int64)
    return kinds, rates, i1, i2, deltas, dbs


def _find_receiver_channels(channels: Sequence[Channel]) -> tuple[int, int]:
    bind_id = unbind_id = -1
    for i, c in enumerate(channels):
        if c.code == KIND_BINDING:
            bind_id = i
        elif c.code == KIND_UNBINDING:
            unbind_id = i
    return bind_id, unbind_id


def _grid(t0: float, horizon: float, sample_dt: float | None):
    if sample_dt is None:
        return 0.0, 0.0, 0
    if sample_dt <= 0:
        raise ConfigError("sample_dt must be positive")
    n = int(np.floor((horizon - t0) / sample_dt + 1e-9)) + 1
    return t0, sample_dt, n


def simulate(model: Model, horizon: float, seed: int, *,
             record: str = "full", sample_dt: float | None = None,
             state: SystemState | None = None, t0: float = 0.0,
             sample_coord: int | None = None) -> Trajectory:
    """Exact simulation of ``model`` over ``[t0, horizon]``.

    ``record`` is ``"full"`` (every event) or ``"receiver"`` (bind/unbind
    events only; bounds memory on large runs).  ``sample_dt`` additionally
    records the receiver-voxel signalling count on a uniform grid
    (``sample_coord`` overrides which coordinate is sampled).
    Deterministic: the same ``(model, horizon, seed)`` yields a bit-identical
    trajectory.
    """
    if horizon <= t0:
        raise ConfigError("horizon must exceed the start time")
    if record not in ("full", "receiver"):
        raise ConfigError(f"unknown record mode {record!r}")
    st = state.copy() if state is not None else model.initial_state(seed)
    initial = st.copy()
    kinds, rates, i1, i2, deltas, dbs = model.channel_arrays()
    bind_id, unbind_id = _find_receiver_channels(model.channels)
    g0, gdt, ng = _grid(t0, horizon, sample_dt)
    i_recv = model.receiver_coord if sample_coord is None else sample_coord
    times, chans, b, samples, status = _ssa_core(
        st.n, st.b, model.receptor_count, kinds, rates, i1, i2, deltas, dbs,
        t0, horizon, np.uint64(seed & 0xFFFFFFFFFFFFFFFF), record == "full",
        bind_id, unbind_id, g0, gdt, ng, i_recv)
    if status != 0:
        raise NumericalFault(
            f"simulation fault (status {status}) at t<= {horizon}, seed {seed}; "
            f"state {st.n.tolist()}, b={b}")
    st.b = int(b)
    sample_times = g0 + gdt * np.arange(ng) if ng else None
    return Trajectory(times=times, channels=chans, initial_state=initial,
                      final_state=st, horizon=horizon, seed=seed, t0=t0,
                      selection="binary" if len(model.channels) >= _BINARY_THRESHOLD
                      else "linear",
                      record=record, sample_times=sample_times,
                      sample_receiver=samples if ng else None,
                      bind_channel=bind_id, unbind_channel=unbind_id,
                      model=model)


def simulate_channels(channels: Sequence[Channel], x0: np.ndarray, b0: int,
                      receptor_count: int, horizon: float, seed: int, *,
                      receiver_coord: int = -1, sample_dt: float | None = None,
                      t0: float = 0.0):
    """Low-level simulation of a bare channel list (for small test systems).

    Returns ``(trajectory_times, trajectory_channels, final SystemState,
    samples)`` with the same semantics as :func:`simulate` in full-event mode.
    """
    x = np.asarray(x0, dtype=np.int64).copy()
    kinds, rates, i1, i2, deltas, dbs = _channel_arrays(channels, x.size)
    bind_id, unbind_id = _find_receiver_channels(channels)
    g0, gdt, ng = _grid(t0, horizon, sample_dt)
    times, chans, b, samples, status = _ssa_core(
        x, b0, receptor_count, kinds, rates, i1, i2, deltas, dbs,
        t0, horizon, np.uint64(seed & 0xFFFFFFFFFFFFFFFF), True,
        bind_id, unbind_id, g0, gdt, ng, receiver_coord)
    if status != 0:
        raise NumericalFault(f"simulation fault (status {status})")
    return times, chans, SystemState(x, int(b)), (samples if ng else None)


def extract_binding_history(traj: Trajectory) -> BindingHistory:
    """Project a trajectory onto the receiver-observable event sequence."""
    if traj.bind_channel < 0 or traj.unbind_channel < 0:
        raise ConfigError("trajectory comes from a model without a receiver")
    sel = (traj.channels == traj.bind_channel) | (traj.channels == traj.unbind_channel)
    kinds = np.where(traj.channels[sel] == traj.bind_channel, 1, -1)
    M = traj.model.receptor_count if traj.model is not None else kinds.clip(0).sum()
    return BindingHistory(traj.times[sel], kinds, receptor_count=int(M),
                          horizon=traj.horizon, t0=traj.t0,
                          b0=traj.initial_state.b)


@dataclass
class SequenceTrajectory:
    """Concatenated realization over consecutive symbol intervals."""

    intervals: tuple[Trajectory, ...]
    symbol_duration: float

    @property
    def horizon(self) -> float:
        return self.intervals[-1].horizon

    @property
    def final_state(self) -> SystemState:
        return self.intervals[-1].final_state

    def binding_history(self) -> BindingHistory:
        parts = [extract_binding_history(tr) for tr in self.intervals]
        times = np.concatenate([p.times for p in parts])
        kinds = np.concatenate([p.kinds for p in parts])
        return BindingHistory(times, kinds, receptor_count=parts[0].receptor_count,
                              horizon=self.horizon, t0=0.0, b0=parts[0].b0)

    def samples(self):
        ts = [tr.sample_times for tr in self.intervals if tr.sample_times is not None]
        vs = [tr.sample_receiver for tr in self.intervals if tr.sample_times is not None]
        if not ts:
            return None, None
        return np.concatenate(ts), np.concatenate(vs)


def simulate_sequence(models: Sequence[Model], symbol_duration: float,
                      seed: int, *, record: str = "receiver",
                      sample_dt: float | None = None) -> SequenceTrajectory:
    """Simulate back-to-back symbol intervals, carrying the state across.

    ``models[k]`` drives the dynamics on ``[k*T_x, (k+1)*T_x)``.  All models
    must share the coordinate layout and receiver.  Interval ``k`` uses the
    derived seed ``derive_seed(seed, k)`` so the whole frame is reproducible
    from one seed.
    """
    if not models:
        raise ConfigError("at least one symbol interval is required")
    layout = models[0].coord_names
    for m in models[1:]:
        if m.coord_names != layout or m.receptor_count != models[0].receptor_count:
            raise ConfigError("sequence models must share layout and receiver")
    out = []
    st = models[0].initial_state(seed)
    for k, m in enumerate(models):
        t0 = k * symbol_duration
        tr = simulate(m, horizon=t0 + symbol_duration,
                      seed=derive_seed(seed, k), record=record,
                      sample_dt=sample_dt, state=st, t0=t0)
        st = tr.final_state
        out.append(tr)
    return SequenceTrajectory(tuple(out), symbol_duration)
