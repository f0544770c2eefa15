"""Seeded Monte-Carlo experiment harness.

Runs symbol-error-rate (SER) studies over the end-to-end model: sweeps of
decision time or receptor count, optimal-vs-approximate filter comparison,
indistinguishable-symbol stress tests and decision-feedback sequence decoding.
Every experiment is a pure function of its configuration and base seed:
internal-model estimation and trajectory evaluation draw from disjoint seed
substreams, reductions happen in a fixed order, and the emitted CSV tables are
bit-identical across reruns.  Wall-clock figures go into the run manifest, not
the data tables, so timing noise never touches the deterministic outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field
from multiprocessing import Pool

import numpy as np
import yaml
from scipy import stats

from .demod import IsiConfig, demodulate, isi_decode, MODE_SUPERPOSITION
from .errors import BudgetExceeded, ConfigError
from .exact_filter import ExactFilter, pilot_caps, optimal_demodulate
from .internal_model import (DEFAULT_DT, InternalModel, estimate_internal_model,
                             model_digest)
from .model import (BernoulliInitial, GridSpec, ModelSpec, Reaction,
                    ReceiverSpec, TransmitterSpec, SIGNAL_SPECIES, voxel_index)
from .rng import DOMAIN_EVAL, DOMAIN_PILOT, DOMAIN_SIGMA, derive_seed, substream, uniform01
from .ssa import extract_binding_history, simulate, simulate_sequence

TABLE_VERSION = 1
CONFIG_VERSION = 1

KIND_FILTER_COMPARE = "filter_compare"
KIND_DEMOD_TRACE = "demod_trace"
KIND_SER_VS_TIME = "ser_vs_time"
KIND_SER_VS_RECEPTORS = "ser_vs_receptors"
KIND_INDISTINGUISHABLE = "indistinguishable"
KIND_ISI = "isi"
KINDS = (KIND_FILTER_COMPARE, KIND_DEMOD_TRACE, KIND_SER_VS_TIME,
         KIND_SER_VS_RECEPTORS, KIND_INDISTINGUISHABLE, KIND_ISI)

#: minimum trial count behind any reported SER row
MIN_TRIALS = 100


# ---------------------------------------------------------------------------
# statistics helpers
# ---------------------------------------------------------------------------

def wilson_interval(errors: int, n: int, confidence: float = 0.95):
    """Wilson score interval for a binomial proportion.

    Returns ``(lo, hi)``; the interval always contains the point estimate
    ``errors / n`` and behaves sensibly at 0 and n.
    """
    if n < 1 or not 0 <= errors <= n:
        raise ConfigError("need 0 <= errors <= n with n >= 1")
    z = float(stats.norm.ppf(0.5 + confidence / 2.0))
    p = errors / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return center - half, center + half


def fit_loglog_slope(sweep, ser, lo: float | None = None,
                     hi: float | None = None):
    """Ordinary least squares of log(SER) against log(sweep value).

    Points outside ``[lo, hi]`` are ignored; points with SER = 0 are excluded
    with a warning (their logarithm is undefined).  Returns
    ``(slope, intercept, residual)`` where residual is the sum of squared
    fit errors.  At least 3 usable points are required.
    """
    sweep = np.asarray(sweep, dtype=np.float64)
    ser = np.asarray(ser, dtype=np.float64)
    if sweep.shape != ser.shape or sweep.ndim != 1:
        raise ConfigError("sweep and ser must be equal-length vectors")
    keep = np.ones(sweep.size, dtype=bool)
    if lo is not None:
        keep &= sweep >= lo
    if hi is not None:
        keep &= sweep <= hi
    zero = keep & (ser <= 0)
    if np.any(zero):
        warnings.warn(
            f"excluding {int(zero.sum())} zero-SER point(s) at sweep "
            f"{sweep[zero].tolist()} from the log-log fit")
        keep &= ser > 0
    if keep.sum() < 3:
        raise ConfigError("log-log fit needs at least 3 points with SER > 0")
    x = np.log(sweep[keep])
    y = np.log(ser[keep])
    coef, res, *_ = np.polyfit(x, y, 1, full=True)
    slope, intercept = float(coef[0]), float(coef[1])
    residual = float(res[0]) if res.size else 0.0
    return slope, intercept, residual


# ---------------------------------------------------------------------------
# result tables
# ---------------------------------------------------------------------------

@dataclass
class SerRow:
    """One sweep point: per-symbol and pooled symbol error rates."""

    sweep: float
    per_symbol: np.ndarray      # SER given each transmitted symbol
    counts: np.ndarray          # trials per transmitted symbol
    average: float              # pooled SER over all trials
    n: int                      # total trials
    wilson_lo: float
    wilson_hi: float
    wall_s: float = 0.0         # wall clock; manifest only, never in the CSV
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.per_symbol = np.asarray(self.per_symbol, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(self.per_symbol < 0) or np.any(self.per_symbol > 1):
            raise ConfigError("symbol error rates must lie in [0, 1]")
        if not self.wilson_lo <= self.average <= self.wilson_hi:
            raise ConfigError("confidence interval must contain the estimate")


def make_row(sweep: float, errors, counts, wall_s: float = 0.0,
             extra: dict | None = None) -> SerRow:
    errors = np.asarray(errors, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    n = int(counts.sum())
    lo, hi = wilson_interval(int(errors.sum()), n)
    return SerRow(sweep=float(sweep), per_symbol=errors / counts,
                  counts=counts, average=float(errors.sum() / n), n=n,
                  wilson_lo=lo, wilson_hi=hi, wall_s=wall_s,
                  extra=dict(extra or {}))


@dataclass
class SerTable:
    """Deterministic SER results of one experiment run."""

    kind: str
    sweep_name: str
    rows: list[SerRow]
    meta: dict = field(default_factory=dict)

    @property
    def sweep(self) -> np.ndarray:
        return np.array([r.sweep for r in self.rows])

    @property
    def average(self) -> np.ndarray:
        return np.array([r.average for r in self.rows])

    def to_csv(self) -> str:
        """Comma-separated table with '#' metadata lines (gnuplot-friendly).

        Wall-clock timings are deliberately omitted so reruns with the same
        seed produce byte-identical files.
        """
        if not self.rows:
            raise ConfigError("cannot serialize an empty table")
        k = self.rows[0].per_symbol.size
        extras = sorted(self.rows[0].extra)
        buf = io.StringIO()
        buf.write(f"# ser-table v{TABLE_VERSION}\n")
        buf.write(f"# kind: {self.kind}\n")
        buf.write(f"# sweep: {self.sweep_name}\n")
        for key in sorted(self.meta):
            buf.write(f"# {key}: {self.meta[key]}\n")
        cols = ([self.sweep_name] + [f"ser_{s}" for s in range(k)]
                + ["avg", "n", "wilson_lo", "wilson_hi"] + extras)
        buf.write(",".join(cols) + "\n")
        for r in self.rows:
            vals = [repr(float(r.sweep))]
            vals += [repr(float(v)) for v in r.per_symbol]
            vals += [repr(float(r.average)), str(int(r.n)),
                     repr(float(r.wilson_lo)), repr(float(r.wilson_hi))]
            vals += [repr(float(r.extra[key])) for key in extras]
            buf.write(",".join(vals) + "\n")
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "SerTable":
        meta = {}
        rows = []
        header: list[str] | None = None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, v = body.split(":", 1)
                    meta[key.strip()] = v.strip()
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append(dict(zip(header, line.split(","))))
        if header is None or not rows:
            raise ConfigError("malformed SER table")
        kind = meta.pop("kind", "unknown")
        sweep_name = meta.pop("sweep", header[0])
        meta.pop("ser-table v1", None)
        k = sum(1 for c in header if c.startswith("ser_"))
        fixed = {sweep_name, "avg", "n", "wilson_lo", "wilson_hi"}
        fixed |= {f"ser_{s}" for s in range(k)}
        out = []
        for r in rows:
            extra = {c: float(r[c]) for c in header if c not in fixed}
            out.append(SerRow(
                sweep=float(r[sweep_name]),
                per_symbol=np.array([float(r[f"ser_{s}"]) for s in range(k)]),
                counts=np.zeros(k, dtype=np.int64),
                average=float(r["avg"]), n=int(r["n"]),
                wilson_lo=float(r["wilson_lo"]), wilson_hi=float(r["wilson_hi"]),
                extra=extra))
        return cls(kind=kind, sweep_name=sweep_name, rows=out, meta=meta)

    @classmethod
    def load_csv(cls, path) -> "SerTable":
        with open(path) as fh:
            return cls.from_csv(fh.read())


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Declarative description of one experiment run.

    ``replicates`` counts evaluation trajectories per transmitted symbol and
    sweep point; symbols are transmitted with the (default uniform) ground
    truth distribution ``priors``.  ``budget_s``, when set, makes the runner
    refuse up front if the projected wall time exceeds it.
    """

    name: str
    kind: str
    spec: ModelSpec
    horizon: float
    decision_times: tuple[float, ...]
    replicates: int
    seed: int = 0
    m_sweep: tuple[int, ...] = ()          # receptor counts; () = spec value
    priors: tuple[float, ...] | None = None
    sigma_runs: int = 500
    sigma_dt: float = DEFAULT_DT
    output_dir: str | None = None
    workers: int = 1
    budget_s: float | None = None
    save_traces: int = 0                   # trajectories to dump per symbol
    # sequence-decoding settings (kind == "isi")
    symbol_duration: float = 1.0
    frame_symbols: int = 20
    memory_length: int = 4
    notes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.spec.transmitter is None or self.spec.receiver is None:
            raise ConfigError("experiments need a transmitter and a receiver")
        if self.horizon <= 0 or self.replicates < 1:
            raise ConfigError("need a positive horizon and replicate count")
        self.decision_times = tuple(float(t) for t in self.decision_times)
        if not self.decision_times and self.kind != KIND_ISI:
            raise ConfigError("at least one decision time is required")
        if any(t <= 0 or t > self.horizon + 1e-9 for t in self.decision_times):
            raise ConfigError("decision times must lie in (0, horizon]")
        self.m_sweep = tuple(int(m) for m in self.m_sweep) or \
            (self.spec.receiver.receptor_count,)
        if any(m < 1 for m in self.m_sweep):
            raise ConfigError("receptor counts must be positive")
        k = self.n_symbols
        if k < 2:
            raise ConfigError("experiments need at least 2 symbols")
        if self.priors is not None:
            self.priors = tuple(float(p) for p in self.priors)
            if len(self.priors) != k or any(p <= 0 for p in self.priors):
                raise ConfigError("priors must be K positive weights")
        trials = self.replicates * (self.frame_symbols if self.kind == KIND_ISI
                                    else k)
        if trials < MIN_TRIALS:
            raise ConfigError(
                f"a reported SER needs >= {MIN_TRIALS} trials; "
                f"this configuration yields {trials} per sweep point")

    @property
    def n_symbols(self) -> int:
        k = self.spec.n_symbols
        # a trailing empty reaction set is the silent filler used by the
        # sequence decoder, not a transmissible symbol
        if k and not self.spec.transmitter.symbols[-1]:
            k -= 1
        return k

    @property
    def silent_symbol(self) -> int | None:
        if self.spec.n_symbols and not self.spec.transmitter.symbols[-1]:
            return self.spec.n_symbols - 1
        return None

    def with_receptors(self, m: int) -> ModelSpec:
        rx = dataclasses.replace(self.spec.receiver, receptor_count=int(m))
        return dataclasses.replace(self.spec, receiver=rx)

    # -- persistence -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "name": self.name, "kind": self.kind,
            "model": self.spec.to_dict(),
            "horizon": self.horizon,
            "decision_times": list(self.decision_times),
            "replicates": self.replicates, "seed": self.seed,
            "m_sweep": list(self.m_sweep),
            "priors": list(self.priors) if self.priors else None,
            "sigma_runs": self.sigma_runs, "sigma_dt": self.sigma_dt,
            "save_traces": self.save_traces,
            "symbol_duration": self.symbol_duration,
            "frame_symbols": self.frame_symbols,
            "memory_length": self.memory_length,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, doc: dict, **overrides) -> "ExperimentConfig":
        try:
            if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
                raise ConfigError(f"unsupported config version {doc['version']}")
            kwargs = dict(
                name=doc["name"], kind=doc["kind"],
                spec=ModelSpec.from_dict(doc["model"]),
                horizon=float(doc["horizon"]),
                decision_times=tuple(doc.get("decision_times", ())),
                replicates=int(doc["replicates"]),
                seed=int(doc.get("seed", 0)),
                m_sweep=tuple(doc.get("m_sweep", ())),
                priors=tuple(doc["priors"]) if doc.get("priors") else None,
                sigma_runs=int(doc.get("sigma_runs", 500)),
                sigma_dt=float(doc.get("sigma_dt", DEFAULT_DT)),
                save_traces=int(doc.get("save_traces", 0)),
                symbol_duration=float(doc.get("symbol_duration", 1.0)),
                frame_symbols=int(doc.get("frame_symbols", 20)),
                memory_length=int(doc.get("memory_length", 4)),
                notes=tuple(doc.get("notes", ())),
            )
            kwargs.update(overrides)
            return cls(**kwargs)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed experiment config: {exc!r}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        with open(path) as fh:
            doc = yaml.safe_load(fh)
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} does not contain a mapping")
        return cls.from_dict(doc, **overrides)

    def digest(self) -> str:
        """Hash of the science-relevant parameters (not output paths)."""
        doc = self.to_dict()
        return hashlib.sha256(
            json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# seed plumbing and shared machinery
# ---------------------------------------------------------------------------

def _sigma_seed(cfg: ExperimentConfig, cell: int, symbol: int) -> int:
    return derive_seed(cfg.seed, DOMAIN_SIGMA, cell, symbol)


def _eval_seed(cfg: ExperimentConfig, cell: int, symbol: int, rep: int) -> int:
    return derive_seed(cfg.seed, DOMAIN_EVAL, cell, symbol, rep)


def _assert_seed_hygiene(cfg: ExperimentConfig) -> dict:
    """Sample both substreams and check they never overlap."""
    n = 256
    sig = {substream(_sigma_seed(cfg, 0, s), DOMAIN_SIGMA, i)
           for s in range(cfg.n_symbols) for i in range(n)}
    ev = {_eval_seed(cfg, 0, s, i)
          for s in range(cfg.n_symbols) for i in range(n)}
    if sig & ev:
        raise ConfigError("estimation and evaluation seed streams collide")
    return {"sigma_domain": hex(DOMAIN_SIGMA), "eval_domain": hex(DOMAIN_EVAL),
            "checked": n, "disjoint": True}


def _pool_map(workers: int):
    """An order-preserving map; a process pool when workers > 1."""
    if workers > 1:
        pool = Pool(workers)
        return pool, pool.map
    return None, (lambda f, xs: list(map(f, xs)))


def _estimate_models(cfg: ExperimentConfig, spec: ModelSpec, cell: int,
                     horizon: float, map_fn) -> list[InternalModel]:
    out = []
    for s in range(cfg.n_symbols):
        model = spec.build(symbol=s)
        out.append(estimate_internal_model(
            model, horizon, dt=cfg.sigma_dt, n_runs=cfg.sigma_runs,
            seed=_sigma_seed(cfg, cell, s), map_fn=map_fn))
    return out


class _Budget:
    """Projects total wall time from the first completed unit of work."""

    def __init__(self, budget_s: float | None, total_units: int):
        self.budget_s = budget_s
        self.total = total_units
        self.t0 = time.perf_counter()
        self.done = 0

    def tick(self):
        self.done += 1
        if self.budget_s is None or self.done != max(1, self.total // 50):
            return
        elapsed = time.perf_counter() - self.t0
        projected = elapsed * self.total / self.done
        if projected > self.budget_s:
            feasible = int(self.total * self.budget_s / projected)
            raise BudgetExceeded(
                f"projected runtime {projected:.0f} s exceeds the budget of "
                f"{self.budget_s:.0f} s after {self.done}/{self.total} "
                f"replicates; reduce the workload to about {feasible} "
                f"replicates in total, shrink the sweep, or raise the budget")


def _sub_worker(args):
    """One sub-optimal evaluation replicate (top level for pickling)."""
    model, sigmas, horizon, dts, seed = args
    traj = simulate(model, horizon, seed, record="receiver")
    hist = extract_binding_history(traj)
    out = demodulate(hist, sigmas, rx=model, decision_times=dts)
    return out.decisions, out.z


# ---------------------------------------------------------------------------
# experiment kinds
# ---------------------------------------------------------------------------

def _run_time_sweep(cfg: ExperimentConfig, with_optimal: bool,
                    with_traces: bool, map_fn, out_dir):
    """Shared engine of the decision-time sweeps.

    Covers plain SER-vs-time, filter-output tracing, the indistinguishable
    stress test (all sub-optimal only) and the optimal-vs-approximate
    comparison.  Rows are decision times; with several receptor counts in the
    sweep the per-M tables are concatenated with an ``m`` extra column.
    """
    dts = cfg.decision_times
    rows: list[SerRow] = []
    budget = _Budget(cfg.budget_s,
                     len(cfg.m_sweep) * cfg.n_symbols * cfg.replicates)
    for cell, m in enumerate(cfg.m_sweep):
        spec = cfg.with_receptors(m)
        sigmas = _estimate_models(cfg, spec, cell, cfg.horizon, map_fn)
        models = [spec.build(symbol=s) for s in range(cfg.n_symbols)]
        filters = None
        if with_optimal:
            filters = []
            for s, mod in enumerate(models):
                caps, total = pilot_caps(
                    mod, cfg.horizon, seed=derive_seed(cfg.seed, DOMAIN_PILOT,
                                                       cell, s),
                    margin=3.0, include_total=True)
                filters.append(ExactFilter(mod, caps, total_cap=total))
        t_cell = time.perf_counter()
        errors = np.zeros((cfg.n_symbols, len(dts)), dtype=np.int64)
        opt_errors = np.zeros_like(errors)
        agree = np.zeros(len(dts), dtype=np.int64)
        z_sum = np.zeros((cfg.n_symbols, cfg.n_symbols, len(dts)))
        for s in range(cfg.n_symbols):
            jobs = [(models[s], sigmas, cfg.horizon, dts,
                     _eval_seed(cfg, cell, s, i)) for i in range(cfg.replicates)]
            for i, (dec, z) in enumerate(map_fn(_sub_worker, jobs)):
                errors[s] += dec != s
                z_sum[s] += z
                if with_optimal:
                    hist = extract_binding_history(
                        simulate(models[s], cfg.horizon, jobs[i][4],
                                 record="receiver"))
                    opt = optimal_demodulate(hist, models, decision_times=dts,
                                             filters=filters)
                    opt_errors[s] += opt.decisions != s
                    agree += opt.decisions == dec
                if with_traces and i < cfg.save_traces and out_dir:
                    hist = extract_binding_history(
                        simulate(models[s], cfg.horizon, jobs[i][4],
                                 record="receiver"))
                    path = os.path.join(out_dir,
                                        f"trace_m{m}_s{s}_r{i}.tsv")
                    with open(path, "w") as fh:
                        fh.write(hist.to_text())
                budget.tick()
        wall = time.perf_counter() - t_cell
        n_rep = cfg.replicates
        counts = np.full(cfg.n_symbols, n_rep, dtype=np.int64)
        for j, t in enumerate(dts):
            extra = {}
            if len(cfg.m_sweep) > 1:
                extra["m"] = float(m)
            if with_optimal:
                extra["opt_avg"] = float(opt_errors[:, j].sum()
                                         / (cfg.n_symbols * n_rep))
                for s in range(cfg.n_symbols):
                    extra[f"opt_ser_{s}"] = float(opt_errors[s, j] / n_rep)
                extra["agreement"] = float(agree[j] / (cfg.n_symbols * n_rep))
            if with_traces:
                for s_tx in range(cfg.n_symbols):
                    for s_f in range(cfg.n_symbols):
                        extra[f"mean_z{s_f}_tx{s_tx}"] = \
                            float(z_sum[s_tx, s_f, j] / n_rep)
            rows.append(make_row(t, errors[:, j], counts,
                                 wall_s=wall / len(dts), extra=extra))
    return rows, "t"


def _run_receptor_sweep(cfg: ExperimentConfig, map_fn, out_dir):
    """SER at the final decision time as a function of receptor count."""
    t_dec = cfg.decision_times[-1]
    rows: list[SerRow] = []
    budget = _Budget(cfg.budget_s,
                     len(cfg.m_sweep) * cfg.n_symbols * cfg.replicates)
    for cell, m in enumerate(cfg.m_sweep):
        spec = cfg.with_receptors(m)
        sigmas = _estimate_models(cfg, spec, cell, cfg.horizon, map_fn)
        models = [spec.build(symbol=s) for s in range(cfg.n_symbols)]
        t_cell = time.perf_counter()
        errors = np.zeros(cfg.n_symbols, dtype=np.int64)
        for s in range(cfg.n_symbols):
            jobs = [(models[s], sigmas, cfg.horizon, (t_dec,),
                     _eval_seed(cfg, cell, s, i)) for i in range(cfg.replicates)]
            for dec, _ in map_fn(_sub_worker, jobs):
                errors[s] += int(dec[0] != s)
                budget.tick()
        counts = np.full(cfg.n_symbols, cfg.replicates, dtype=np.int64)
        rows.append(make_row(m, errors, counts,
                             wall_s=time.perf_counter() - t_cell))
    return rows, "m"


def _dedupe_frame_samples(values: np.ndarray, n_intervals: int) -> np.ndarray:
    """Concatenated per-interval sample grids share their boundary points;
    keep each boundary once to recover one uniform frame grid."""
    per = values.size // n_intervals
    parts = [values[:per]]
    for k in range(1, n_intervals):
        parts.append(values[k * per + 1:(k + 1) * per])
    return np.concatenate(parts)


def estimate_single_shot(cfg: ExperimentConfig, spec: ModelSpec, cell: int,
                         symbol: int, map_fn=None) -> InternalModel:
    """Mean receiver signal of one symbol sent once and then silence.

    The tabulated model covers ``memory_length`` symbol durations: the symbol
    drives the first interval, the silent filler symbol the rest.  These are
    the building blocks of the superposition decomposition used by the
    decision-feedback sequence decoder.
    """
    if cfg.silent_symbol is None:
        raise ConfigError("the model has no silent filler symbol")
    t_x = cfg.symbol_duration
    ell = cfg.memory_length
    frame = [spec.build(symbol=symbol)] + \
        [spec.build(symbol=cfg.silent_symbol)] * (ell - 1)
    base = _sigma_seed(cfg, cell, symbol)
    jobs = [(frame, t_x, substream(base, DOMAIN_SIGMA, i), cfg.sigma_dt, ell)
            for i in range(cfg.sigma_runs)]
    mapper = map_fn or (lambda f, xs: map(f, xs))
    total = total_sq = None
    for v in mapper(_single_shot_worker, jobs):
        if total is None:
            total, total_sq = v.copy(), v**2
        else:
            total += v
            total_sq += v**2
    n = cfg.sigma_runs
    sigma = total / n
    var = np.maximum(total_sq / n - sigma**2, 0.0) * n / (n - 1)
    return InternalModel(symbol=symbol, t0=0.0, dt=cfg.sigma_dt, sigma=sigma,
                         stderr=np.sqrt(var / n), n_runs=n,
                         meta={"single_shot": True, "memory_length": ell})


def _single_shot_worker(args):
    frame, t_x, seed, dt, ell = args
    seq = simulate_sequence(frame, t_x, seed, record="receiver", sample_dt=dt)
    _, vs = seq.samples()
    return _dedupe_frame_samples(vs.astype(np.float64), ell)


def _isi_frame_symbols(cfg: ExperimentConfig, rep_seed: int) -> list[int]:
    """Ground-truth symbols of one frame, drawn from the priors."""
    k = cfg.n_symbols
    p = np.asarray(cfg.priors, dtype=np.float64) if cfg.priors else \
        np.full(k, 1.0 / k)
    cdf = np.cumsum(p / p.sum())
    out = []
    for j in range(cfg.frame_symbols):
        u = uniform01(derive_seed(rep_seed, 0xF7A3, j))
        out.append(int(np.searchsorted(cdf, u, side="right").clip(0, k - 1)))
    return out


def _isi_worker(args):
    models, isi_cfg, t_x, seed, truth = args
    seq = simulate_sequence([models[s] for s in truth], t_x, seed,
                            record="receiver")
    hist = seq.binding_history()
    res = isi_decode(hist, isi_cfg, rx=models[0], truth=truth)
    return (~res.correct).astype(np.int64), np.asarray(truth, dtype=np.int64)


def _run_isi(cfg: ExperimentConfig, map_fn, out_dir):
    """Decision-feedback sequence decoding: SER over whole frames vs M."""
    t_x = cfg.symbol_duration
    rows: list[SerRow] = []
    budget = _Budget(cfg.budget_s, len(cfg.m_sweep) * cfg.replicates)
    for cell, m in enumerate(cfg.m_sweep):
        spec = cfg.with_receptors(m)
        shots = tuple(estimate_single_shot(cfg, spec, cell, s, map_fn)
                      for s in range(cfg.n_symbols))
        isi_cfg = IsiConfig(symbol_duration=t_x,
                            memory_length=cfg.memory_length,
                            mode=MODE_SUPERPOSITION, models=shots,
                            n_symbols=cfg.n_symbols)
        models = [spec.build(symbol=s) for s in range(cfg.n_symbols)]
        t_cell = time.perf_counter()
        errors = np.zeros(cfg.n_symbols, dtype=np.int64)
        counts = np.zeros(cfg.n_symbols, dtype=np.int64)
        jobs = []
        for i in range(cfg.replicates):
            seed = _eval_seed(cfg, cell, 0, i)
            truth = _isi_frame_symbols(cfg, seed)
            jobs.append((models, isi_cfg, t_x, seed, truth))
        for wrong, truth in map_fn(_isi_worker, jobs):
            np.add.at(errors, truth, wrong)
            np.add.at(counts, truth, 1)
            budget.tick()
        rows.append(make_row(m, errors, counts,
                             wall_s=time.perf_counter() - t_cell,
                             extra={"frames": float(cfg.replicates)}))
    return rows, "m"


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig) -> SerTable:
    """Run one experiment; deterministic given the configuration and seed.

    Writes ``<name>.csv`` (byte-stable across reruns), requested trajectory
    traces and ``<name>.manifest.json`` (config hash, seed bookkeeping,
    wall-clock timings, package version) into the output directory when one
    is configured.  Raises :class:`BudgetExceeded` with a scaling suggestion
    if the projected runtime exceeds ``budget_s``.
    """
    from . import __version__

    hygiene = _assert_seed_hygiene(cfg)
    out_dir = cfg.output_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    pool, map_fn = _pool_map(cfg.workers)
    t0 = time.perf_counter()
    try:
        if cfg.kind == KIND_SER_VS_TIME:
            rows, sweep = _run_time_sweep(cfg, False, False, map_fn, out_dir)
        elif cfg.kind == KIND_INDISTINGUISHABLE:
            rows, sweep = _run_time_sweep(cfg, False, False, map_fn, out_dir)
        elif cfg.kind == KIND_DEMOD_TRACE:
            rows, sweep = _run_time_sweep(cfg, False, True, map_fn, out_dir)
        elif cfg.kind == KIND_FILTER_COMPARE:
            rows, sweep = _run_time_sweep(cfg, True, False, map_fn, out_dir)
        elif cfg.kind == KIND_SER_VS_RECEPTORS:
            rows, sweep = _run_receptor_sweep(cfg, map_fn, out_dir)
        elif cfg.kind == KIND_ISI:
            rows, sweep = _run_isi(cfg, map_fn, out_dir)
        else:  # pragma: no cover - guarded by the config validator
            raise ConfigError(f"unknown experiment kind {cfg.kind!r}")
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    wall = time.perf_counter() - t0

    meta = {"name": cfg.name, "config": cfg.digest(), "seed": cfg.seed,
            "replicates": cfg.replicates,
            "model": model_digest(cfg.spec.build(symbol=0))}
    table = SerTable(kind=cfg.kind, sweep_name=sweep, rows=rows, meta=meta)
    if out_dir:
        table.save_csv(os.path.join(out_dir, f"{cfg.name}.csv"))
        manifest = {
            "name": cfg.name, "kind": cfg.kind,
            "config_hash": cfg.digest(), "config": cfg.to_dict(),
            "base_seed": cfg.seed, "seed_hygiene": hygiene,
            "version": __version__, "wall_s": wall,
            "row_wall_s": [r.wall_s for r in rows],
        }
        with open(os.path.join(out_dir, f"{cfg.name}.manifest.json"),
                  "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    return table


# ---------------------------------------------------------------------------
# built-in presets
# ---------------------------------------------------------------------------

#: shared physical constants of all presets
DIFFUSION = 1.0            # um^2/s
VOXEL_WIDTH = 1.0 / 3.0    # um
BINDING_RATE = 0.005       # um^3/s (volumetric)
UNBINDING_RATE = 1.0       # 1/s


def _birth_symbols(*rates: float) -> tuple:
    """One constitutive source reaction per symbol (S produced at ``rate``)."""
    return tuple((Reaction((), (SIGNAL_SPECIES,), r),) if r > 0 else ()
                 for r in rates)


def small_grid_spec(rates=(10.0, 50.0), receptors: int = 10) -> ModelSpec:
    """3x1x1 reflecting chain; transmitter in voxel 1, receiver in voxel 3."""
    grid = GridSpec.reflecting(3, 1, 1, VOXEL_WIDTH, DIFFUSION)
    tx = TransmitterSpec(voxel=1, symbols=_birth_symbols(*rates))
    rx = ReceiverSpec(voxel=3, receptor_count=receptors,
                      binding_rate=BINDING_RATE,
                      unbinding_rate=UNBINDING_RATE)
    return ModelSpec(grid=grid, transmitter=tx, receiver=rx)


def large_grid_spec(rates=(40.0, 80.0), receptors: int = 50,
                    silent: bool = False) -> ModelSpec:
    """6x6x3 lattice, all faces absorbing at hop_rate/50.

    Transmitter at voxel (2,3,2), receiver at voxel (5,3,2).  With ``silent``
    a trailing empty reaction set is appended for sequence decoding.
    """
    d = DIFFUSION / VOXEL_WIDTH**2
    grid = GridSpec.absorbing(6, 6, 3, VOXEL_WIDTH, DIFFUSION,
                              escape_rate=d / 50.0)
    symbols = _birth_symbols(*rates)
    if silent:
        symbols = symbols + ((),)
    tx = TransmitterSpec(voxel=voxel_index(2, 3, 2, grid), symbols=symbols)
    rx = ReceiverSpec(voxel=voxel_index(5, 3, 2, grid),
                      receptor_count=receptors, binding_rate=BINDING_RATE,
                      unbinding_rate=UNBINDING_RATE)
    return ModelSpec(grid=grid, transmitter=tx, receiver=rx)


def switching_source_spec(kappa: float = 40.0, switch_rate: float = 1.0,
                          receptors: int = 50) -> ModelSpec:
    """Two symbols with identical mean emission but different noise.

    Symbol 0 is a constant-rate source at ``kappa``.  Symbol 1 produces at
    ``2 * kappa`` only while a two-state gene switch is ON; the switch flips
    symmetrically at ``switch_rate`` and starts ON with probability 1/2, so
    the mean production rates coincide and only the emission statistics
    differ.
    """
    d = DIFFUSION / VOXEL_WIDTH**2
    grid = GridSpec.absorbing(6, 6, 3, VOXEL_WIDTH, DIFFUSION,
                              escape_rate=d / 50.0)
    sym0 = (Reaction((), (SIGNAL_SPECIES,), kappa),)
    sym1 = (
        Reaction(("Ron",), ("Roff",), switch_rate),
        Reaction(("Roff",), ("Ron",), switch_rate),
        Reaction(("Ron",), ("Ron", SIGNAL_SPECIES), 2.0 * kappa),
    )
    tx = TransmitterSpec(
        voxel=voxel_index(2, 3, 2, grid), symbols=(sym0, sym1),
        intermediates=("Ron", "Roff"),
        random_initial=(BernoulliInitial(0.5, (("Ron", 1),), (("Roff", 1),)),))
    rx = ReceiverSpec(voxel=voxel_index(5, 3, 2, grid),
                      receptor_count=receptors, binding_rate=BINDING_RATE,
                      unbinding_rate=UNBINDING_RATE)
    return ModelSpec(grid=grid, transmitter=tx, receiver=rx)


def _decision_grid(a: float, b: float, step: float) -> tuple[float, ...]:
    n = int(round((b - a) / step))
    return tuple(round(a + i * step, 9) for i in range(n + 1))


def preset(name: str, *, seed: int = 0, output_dir: str | None = None,
           workers: int = 1, **overrides) -> ExperimentConfig:
    """Build one of the named built-in experiment configurations.

    Any :class:`ExperimentConfig` field can be overridden by keyword, which
    is also how the scaled-down variants used in tests are produced.
    """
    builders = {
        # small-grid optimal-vs-approximate comparison
        "filter-compare": lambda: ExperimentConfig(
            name="filter-compare", kind=KIND_FILTER_COMPARE,
            spec=small_grid_spec(), horizon=1.8,
            decision_times=_decision_grid(1.0, 1.8, 0.05),
            replicates=400, m_sweep=(5, 10)),
        # large-grid decision-time sweep
        "ser-vs-time": lambda: ExperimentConfig(
            name="ser-vs-time", kind=KIND_SER_VS_TIME,
            spec=large_grid_spec(), horizon=3.0,
            decision_times=_decision_grid(0.25, 3.0, 0.25),
            replicates=200, m_sweep=(50,)),
        # large-grid mean filter-output traces
        "demod-trace": lambda: ExperimentConfig(
            name="demod-trace", kind=KIND_DEMOD_TRACE,
            spec=large_grid_spec(), horizon=3.0,
            decision_times=_decision_grid(0.25, 3.0, 0.25),
            replicates=200, m_sweep=(50,), save_traces=2),
        # three-symbol receptor-count scaling (slope study)
        "receptor-scaling": lambda: ExperimentConfig(
            name="receptor-scaling", kind=KIND_SER_VS_RECEPTORS,
            spec=large_grid_spec(rates=(40.0, 80.0, 120.0)),
            horizon=2.5, decision_times=(2.5,), replicates=200,
            m_sweep=(1,) + tuple(range(10, 151, 10))),
        # reduced scaling sweep for quick monotonicity checks
        "receptor-scaling-reduced": lambda: ExperimentConfig(
            name="receptor-scaling-reduced", kind=KIND_SER_VS_RECEPTORS,
            spec=large_grid_spec(rates=(40.0, 80.0, 120.0)),
            horizon=2.5, decision_times=(2.5,), replicates=67,
            m_sweep=(1, 10, 20, 40, 60)),
        # matched-mean emission patterns that differ only in noise
        "indistinguishable": lambda: ExperimentConfig(
            name="indistinguishable", kind=KIND_INDISTINGUISHABLE,
            spec=switching_source_spec(), horizon=3.0,
            decision_times=(2.5,), replicates=200, m_sweep=(50,)),
        # decision-feedback sequence decoding, memory 4
        "isi": lambda: ExperimentConfig(
            name="isi", kind=KIND_ISI,
            spec=large_grid_spec(silent=True), horizon=20.0,
            decision_times=(), replicates=100, m_sweep=(25, 50, 100, 150),
            symbol_duration=1.0, frame_symbols=20, memory_length=4),
        # decision-feedback sequence decoding, memory 5
        "isi-l5": lambda: ExperimentConfig(
            name="isi-l5", kind=KIND_ISI,
            spec=large_grid_spec(silent=True), horizon=20.0,
            decision_times=(), replicates=100, m_sweep=(25, 50, 100, 150),
            symbol_duration=1.0, frame_symbols=20, memory_length=5),
    }
    if name not in builders:
        raise ConfigError(
            f"unknown preset {name!r}; available: {sorted(builders)}")
    cfg = builders[name]()
    fields = {"seed": seed, "output_dir": output_dir, "workers": workers}
    fields.update(overrides)
    return dataclasses.replace(cfg, **fields)


PRESETS = ("filter-compare", "ser-vs-time", "demod-trace", "receptor-scaling",
           "receptor-scaling-reduced", "indistinguishable", "isi", "isi-l5")
