"""Mean receiver-signal models estimated by Monte-Carlo averaging.

An :class:`InternalModel` tabulates sigma_s(t) = E[n_R(t) | s], the mean
number of signalling molecules in the receiver voxel under symbol ``s``, on a
uniform time grid.  Values between grid points are linearly interpolated and
integrals are computed segment-exactly, so the downstream demodulation filter
needs no further quadrature.

Estimation runs independent exact simulations on a dedicated seed substream
(disjoint from evaluation seeds) and averages the receiver-voxel samples in a
fixed order, which makes the tabulated model bit-reproducible.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CoverageError
from .model import Model
from .rng import DOMAIN_SIGMA, substream
from .ssa import simulate

CSV_VERSION = 1

#: default sampling step (s); interpolation error is negligible against
#: Monte-Carlo noise at event rates up to ~1e2 per second
DEFAULT_DT = 0.005

#: default replicate count for estimation
DEFAULT_RUNS = 500

#: floor applied to sigma inside log() by the demodulator; a bind event where
#: the model predicts no signal gets a large finite penalty instead of -inf
SIGMA_FLOOR = 1e-6


def model_digest(model: Model) -> str:
    """Short stable digest of a compiled model (for output metadata)."""
    h = hashlib.sha256()
    h.update(repr(model.coord_names).encode())
    h.update(np.float64([model.receptor_count, model.lam, model.mu,
                         model.receiver_coord, model.symbol]).tobytes())
    for ch in model.channels:
        h.update(np.int64([ch.code, ch.db, ch.idx1, ch.idx2]).tobytes())
        h.update(np.float64(ch.rate).tobytes())
        h.update(ch.delta.astype(np.int64).tobytes())
    h.update(model.initial_counts.astype(np.int64).tobytes())
    return h.hexdigest()[:16]


@dataclass
class InternalModel:
    """Tabulated mean signal for one symbol on a uniform time grid."""

    symbol: int
    t0: float
    dt: float
    sigma: np.ndarray
    stderr: np.ndarray
    n_runs: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.stderr = np.asarray(self.stderr, dtype=np.float64)
        if self.dt <= 0:
            raise ConfigError("grid step must be positive")
        if self.sigma.ndim != 1 or self.sigma.shape != self.stderr.shape:
            raise ConfigError("sigma and stderr must be equal-length vectors")
        if self.sigma.size < 2:
            raise ConfigError("a tabulated model needs at least two grid points")
        if np.any(self.sigma < 0):
            raise ConfigError("mean signal values must be nonnegative")

    @property
    def horizon(self) -> float:
        return self.t0 + (self.sigma.size - 1) * self.dt

    @property
    def time_grid(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.sigma.size)

    def _locate(self, t):
        t = np.asarray(t, dtype=np.float64)
        tol = 1e-9 * max(1.0, self.horizon)
        if np.any(t < self.t0 - tol) or np.any(t > self.horizon + tol):
            raise CoverageError(
                f"time outside the tabulated range "
                f"[{self.t0}, {self.horizon}] of symbol {self.symbol}")
        u = np.clip((t - self.t0) / self.dt, 0.0, self.sigma.size - 1.0)
        k = np.minimum(u.astype(np.int64), self.sigma.size - 2)
        return k, u - k

    def value(self, t):
        """sigma at ``t`` (scalar or array) by linear interpolation."""
        k, frac = self._locate(t)
        v = self.sigma[k] * (1.0 - frac) + self.sigma[k + 1] * frac
        return float(v) if np.isscalar(t) or np.ndim(t) == 0 else v

    def stderr_at(self, t):
        k, frac = self._locate(t)
        v = self.stderr[k] * (1.0 - frac) + self.stderr[k + 1] * frac
        return float(v) if np.isscalar(t) or np.ndim(t) == 0 else v

    def integral(self, a: float, b: float) -> float:
        """Exact integral of the piecewise-linear sigma over [a, b]."""
        if b < a:
            raise ConfigError("integration bounds must be ordered")
        if b == a:
            return 0.0
        ka, fa = self._locate(a)
        kb, fb = self._locate(b)
        ka, kb = int(ka), int(kb)

        def cell_integral(k, u0, u1):
            # integral over fractional span [u0, u1] of cell k
            s0, s1 = self.sigma[k], self.sigma[k + 1]
            return self.dt * ((u1 - u0) * s0 + 0.5 * (u1 * u1 - u0 * u0) * (s1 - s0))

        if ka == kb:
            return cell_integral(ka, fa, fb)
        total = cell_integral(ka, fa, 1.0)
        if kb > ka + 1:
            mids = self.sigma[ka + 1:kb]
            total += self.dt * float(np.sum(0.5 * (mids + self.sigma[ka + 2:kb + 1])))
        total += cell_integral(kb, 0.0, fb)
        return float(total)

    # -- persistence -------------------------------------------------------
    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# internal-model v{CSV_VERSION}\n")
        buf.write(f"# symbol: {self.symbol}\n")
        buf.write(f"# t0: {self.t0!r}\n")
        buf.write(f"# dt: {self.dt!r}\n")
        buf.write(f"# n_runs: {self.n_runs}\n")
        for k, v in sorted(self.meta.items()):
            buf.write(f"# {k}: {v}\n")
        buf.write("t,sigma,stderr\n")
        for t, s, e in zip(self.time_grid, self.sigma, self.stderr):
            buf.write(f"{float(t)!r},{float(s)!r},{float(e)!r}\n")
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "InternalModel":
        meta = {}
        rows = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line == "t,sigma,stderr":
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    k, v = body.split(":", 1)
                    meta[k.strip()] = v.strip()
                continue
            rows.append([float(x) for x in line.split(",")])
        arr = np.array(rows)
        symbol = int(meta.pop("symbol", 0))
        t0 = float(meta.pop("t0", 0.0))
        dt = float(meta.pop("dt"))
        n_runs = int(meta.pop("n_runs", 0))
        return cls(symbol=symbol, t0=t0, dt=dt, sigma=arr[:, 1],
                   stderr=arr[:, 2], n_runs=n_runs, meta=meta)

    @classmethod
    def load_csv(cls, path) -> "InternalModel":
        with open(path) as fh:
            return cls.from_csv(fh.read())

    @classmethod
    def from_values(cls, times, sigma, *, symbol: int = 0, stderr=None,
                    n_runs: int = 0, meta: dict | None = None) -> "InternalModel":
        """Build from an explicit uniform grid (mainly for tests/oracles)."""
        times = np.asarray(times, dtype=np.float64)
        dts = np.diff(times)
        if times.size < 2 or not np.allclose(dts, dts[0], rtol=1e-9, atol=1e-12):
            raise ConfigError("time grid must be uniform with >= 2 points")
        sigma = np.asarray(sigma, dtype=np.float64)
        if stderr is None:
            stderr = np.zeros_like(sigma)
        return cls(symbol=symbol, t0=float(times[0]), dt=float(dts[0]),
                   sigma=sigma, stderr=np.asarray(stderr, dtype=np.float64),
                   n_runs=n_runs, meta=meta or {})


def _one_run(args):
    model, horizon, dt, seed, coord = args
    tr = simulate(model, horizon, seed, record="receiver", sample_dt=dt,
                  sample_coord=coord)
    return tr.sample_receiver.astype(np.float64)


def estimate_internal_model(model: Model, horizon: float, dt: float = DEFAULT_DT,
                            n_runs: int = DEFAULT_RUNS, seed: int = 0, *,
                            map_fn=None, sample_coord: int | None = None) -> InternalModel:
    """Estimate sigma_s(t) by averaging ``n_runs`` independent simulations.

    Run ``i`` uses the seed ``substream(seed, DOMAIN_SIGMA, i)``; evaluation
    code must draw its seeds from a different substream of the same base seed
    so estimation and evaluation never share randomness.  ``map_fn`` may be a
    parallel order-preserving map (e.g. ``multiprocessing.Pool.map``); the
    reduction order is fixed either way, so results are bit-reproducible.
    """
    if n_runs < 2:
        raise ConfigError("estimation needs at least 2 runs")
    if dt <= 0:
        raise ConfigError("grid step must be positive")
    if sample_coord is None and model.receiver_coord < 0:
        raise ConfigError("model has no receiver voxel; pass sample_coord")
    jobs = [(model, horizon, dt, substream(seed, DOMAIN_SIGMA, i), sample_coord)
            for i in range(n_runs)]
    mapper = map_fn or (lambda f, xs: map(f, xs))
    total = None
    total_sq = None
    for samples in mapper(_one_run, jobs):
        if total is None:
            total = samples.copy()
            total_sq = samples**2
        else:
            total += samples
            total_sq += samples**2
    sigma = total / n_runs
    var = np.maximum(total_sq / n_runs - sigma**2, 0.0) * n_runs / (n_runs - 1)
    stderr = np.sqrt(var / n_runs)
    meta = {"model": model_digest(model), "base_seed": seed,
            "seed_domain": "sigma", "sigma_floor": SIGMA_FLOOR}
    return InternalModel(symbol=model.symbol, t0=0.0, dt=dt, sigma=sigma,
                         stderr=stderr, n_runs=n_runs, meta=meta)


def superpose(parts: list[tuple[InternalModel, float]], duration: float,
              dt: float | None = None) -> InternalModel:
    """Sum of shifted tabulated models on a fresh local grid [0, duration].

    Each entry is ``(model, age)``; the combined signal at local time ``t``
    is ``sum_j model_j.value(t + age_j)``.  Used to build the effective mean
    signal of a symbol interval from the single-shot models of the current
    and previous symbols.  All models must cover their shifted ranges.
    """
    if not parts:
        raise ConfigError("superposition of an empty model list")
    dt = dt or parts[0][0].dt
    n = int(round(duration / dt)) + 1
    if abs((n - 1) * dt - duration) > 1e-9:
        raise ConfigError("duration must be a multiple of the grid step")
    grid = dt * np.arange(n)
    sigma = np.zeros(n)
    var = np.zeros(n)
    for m, age in parts:
        sigma += m.value(grid + age)
        var += m.stderr_at(grid + age) ** 2
    return InternalModel(symbol=parts[0][0].symbol, t0=0.0, dt=dt, sigma=sigma,
                         stderr=np.sqrt(var), n_runs=parts[0][0].n_runs,
                         meta={"superposed": len(parts)})
