"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 numerical fault,
4 budget refusal.
"""

from __future__ import annotations

import functools
import json
import sys

import click
import numpy as np

from . import __version__
from .demod import demodulate
from .errors import BudgetExceeded, ConfigError, NumericalFault
from .exact_filter import optimal_demodulate
from .harness import (ExperimentConfig, PRESETS, SerTable, fit_loglog_slope,
                      preset, run_experiment)
from .internal_model import (DEFAULT_DT, DEFAULT_RUNS, InternalModel,
                             estimate_internal_model)
from .model import ModelSpec
from .ssa import extract_binding_history, simulate, BindingHistory

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_BUDGET = 4


def _mapped_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"configuration error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except BudgetExceeded as exc:
            click.echo(f"budget refusal: {exc}", err=True)
            sys.exit(EXIT_BUDGET)
        except NumericalFault as exc:
            click.echo(f"numerical fault: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)
    return wrapper


@click.group()
@click.version_option(__version__)
def main():
    """Simulation and demodulation toolkit for reaction-diffusion
    molecular communication links."""


@main.command("estimate-model")
@click.argument("model_file", type=click.Path(exists=True))
@click.option("--symbol", default=0, show_default=True,
              help="Transmission symbol to estimate.")
@click.option("--horizon", type=float, required=True,
              help="Length of the tabulated time range (s).")
@click.option("--dt", type=float, default=DEFAULT_DT, show_default=True)
@click.option("--runs", type=int, default=DEFAULT_RUNS, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output", "-o", type=click.Path(), required=True,
              help="Destination CSV path.")
@_mapped_errors
def estimate_model(model_file, symbol, horizon, dt, runs, seed, output):
    """Estimate the mean receiver signal of one symbol by simulation."""
    spec = ModelSpec.load(model_file)
    model = spec.build(symbol=symbol)
    table = estimate_internal_model(model, horizon, dt=dt, n_runs=runs,
                                    seed=seed)
    table.save_csv(output)
    click.echo(f"wrote {output} ({table.sigma.size} grid points, "
               f"{runs} runs)")


@main.command("simulate")
@click.argument("model_file", type=click.Path(exists=True))
@click.option("--symbol", default=0, show_default=True)
@click.option("--horizon", type=float, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output", "-o", type=click.Path(), default=None,
              help="Write the receiver event history here (default stdout).")
@_mapped_errors
def simulate_cmd(model_file, symbol, horizon, seed, output):
    """Sample one trajectory and emit its receiver event history."""
    spec = ModelSpec.load(model_file)
    model = spec.build(symbol=symbol)
    hist = extract_binding_history(
        simulate(model, horizon, seed, record="receiver"))
    text = hist.to_text()
    if output:
        with open(output, "w") as fh:
            fh.write(text)
        click.echo(f"wrote {output} ({hist.n_events} events)")
    else:
        click.echo(text, nl=False)


@main.command("demodulate")
@click.argument("model_file", type=click.Path(exists=True))
@click.argument("history_file", type=click.Path(exists=True))
@click.option("--sigma", "sigma_files", multiple=True, required=True,
              type=click.Path(exists=True),
              help="Tabulated mean-signal CSV, one per symbol in order.")
@click.option("--at", "decision_times", multiple=True, type=float,
              required=True, help="Decision time(s) in seconds.")
@_mapped_errors
def demodulate_cmd(model_file, history_file, sigma_files, decision_times):
    """Decide the transmitted symbol from a receiver event history."""
    spec = ModelSpec.load(model_file)
    model = spec.build(symbol=0)
    with open(history_file) as fh:
        hist = BindingHistory.from_text(fh.read())
    sigmas = [InternalModel.load_csv(p) for p in sigma_files]
    out = demodulate(hist, sigmas, rx=model, decision_times=decision_times)
    for j, t in enumerate(out.times):
        flag = " (tie)" if out.ties[j] else ""
        scores = " ".join(f"Z{s}={out.z[s, j]:.6f}"
                          for s in range(len(sigmas)))
        click.echo(f"t={t:g}\tsymbol={out.decisions[j]}{flag}\t{scores}")


@main.command("filter-compare")
@click.argument("model_file", type=click.Path(exists=True))
@click.option("--horizon", type=float, required=True)
@click.option("--at", "decision_times", multiple=True, type=float,
              required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--symbol", default=0, show_default=True,
              help="Symbol actually transmitted in the sampled trajectory.")
@click.option("--sigma-runs", type=int, default=DEFAULT_RUNS,
              show_default=True)
@_mapped_errors
def filter_compare(model_file, horizon, decision_times, seed, symbol,
                   sigma_runs):
    """Run the exact and the approximate filter on one fresh trajectory."""
    spec = ModelSpec.load(model_file)
    k = spec.n_symbols
    if k < 2:
        raise ConfigError("the model file must define at least two symbols")
    models = [spec.build(symbol=s) for s in range(k)]
    sigmas = [estimate_internal_model(m, horizon, n_runs=sigma_runs, seed=seed)
              for m in models]
    hist = extract_binding_history(
        simulate(models[symbol], horizon, seed + 1, record="receiver"))
    sub = demodulate(hist, sigmas, rx=models[0],
                     decision_times=decision_times)
    opt = optimal_demodulate(hist, models, decision_times=decision_times)
    for j, t in enumerate(sub.times):
        click.echo(f"t={t:g}\tapprox={sub.decisions[j]}"
                   f"\toptimal={opt.decisions[j]}"
                   f"\tagree={'yes' if sub.decisions[j] == opt.decisions[j] else 'no'}")


@main.command("experiment")
@click.option("--preset", "preset_name", type=click.Choice(PRESETS),
              default=None, help="Run a built-in experiment configuration.")
@click.option("--config", "config_file", type=click.Path(exists=True),
              default=None, help="Run an experiment config file (YAML).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output-dir", "-o", type=click.Path(), default=None)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--replicates", type=int, default=None,
              help="Override the replicate count.")
@click.option("--budget", "budget_s", type=float, default=None,
              help="Refuse if the projected runtime exceeds this (s).")
@_mapped_errors
def experiment(preset_name, config_file, seed, output_dir, workers,
               replicates, budget_s):
    """Run a Monte-Carlo symbol-error-rate experiment."""
    if (preset_name is None) == (config_file is None):
        raise ConfigError("pass exactly one of --preset or --config")
    overrides = {"seed": seed, "output_dir": output_dir, "workers": workers,
                 "budget_s": budget_s}
    if replicates is not None:
        overrides["replicates"] = replicates
    if preset_name:
        cfg = preset(preset_name, **overrides)
    else:
        cfg = ExperimentConfig.load(config_file, **overrides)
    table = run_experiment(cfg)
    click.echo(table.to_csv(), nl=False)
    if output_dir:
        click.echo(f"# wrote {output_dir}/{cfg.name}.csv")


@main.command("fit-slope")
@click.argument("table_file", type=click.Path(exists=True))
@click.option("--lo", type=float, default=None,
              help="Lower end of the sweep range used for the fit.")
@click.option("--hi", type=float, default=None,
              help="Upper end of the sweep range used for the fit.")
@_mapped_errors
def fit_slope(table_file, lo, hi):
    """Least-squares slope of log(SER) vs log(sweep) from a results table."""
    table = SerTable.load_csv(table_file)
    slope, intercept, residual = fit_loglog_slope(
        table.sweep, table.average, lo=lo, hi=hi)
    click.echo(json.dumps({"slope": slope, "intercept": intercept,
                           "residual": residual,
                           "points": int(np.sum(
                               ((lo is None) | (table.sweep >= (lo or -np.inf)))
                               & ((hi is None) | (table.sweep <= (hi or np.inf)))
                               & (table.average > 0)))}))


if __name__ == "__main__":
    main()
