"""Command-line surface: price spot checks, path simulation, training,
evaluation, cross-frequency comparison tables, and policy slices."""

# Small matmuls dominate training; multi-threaded BLAS only adds contention.
import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from .agents import DdpgAgent, RlPolicy
from .config import FREQUENCY_DAYS, load_config
from .errors import ValidationError
from .evaluate import evaluate_policy, policy_slice, simulate_eval_paths, write_slice_csv
from .experiment import load_agent, run_experiment, train_agent, write_learning_curve
from .market import simulate_batch, write_paths_csv
from .pricing import (
    OptionSpec,
    RateSpec,
    bartlett_delta,
    bs_delta,
    bs_price,
    hagan_implied_vol,
    practitioner_delta,
    sabr_price,
)


def _fail(exc: Exception, code: int = 2):
    payload = {"error": {"type": exc.__class__.__name__, "message": str(exc)}}
    click.echo(json.dumps(payload), err=True)
    sys.exit(code)


def _load(ctx) -> tuple:
    path = ctx.obj.get("config")
    if not path:
        _fail(ValidationError("--config is required for this command"))
    try:
        config, doc = load_config(path)
    except ValidationError as exc:
        _fail(exc)
    if ctx.obj.get("seed") is not None:
        config = replace(config, eval_seed=ctx.obj["seed"])
    return config, doc


def _out_dir(ctx, default: str = "out") -> Path:
    out = Path(ctx.obj.get("out") or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


@click.group()
@click.option("--config", type=click.Path(), default=None, help="Experiment config (JSON).")
@click.option("--seed", type=int, default=None, help="Override the evaluation seed.")
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@click.option("--threads", type=int, default=1, show_default=True,
              help="Worker threads for path simulation fan-out.")
@click.pass_context
def main(ctx, config, seed, out, threads):
    """Hedging-cost engine: learned policies vs delta hedging baselines."""
    ctx.obj = {"config": config, "seed": seed, "out": out, "threads": threads}


@main.command()
@click.option("--spot", type=float, required=True)
@click.option("--strike", type=float, required=True)
@click.option("--tau", type=float, required=True, help="Time to maturity in years.")
@click.option("--sigma", type=float, default=None, help="Black-Scholes volatility.")
@click.option("--rate", type=float, default=0.0)
@click.option("--div-yield", type=float, default=0.0)
@click.option("--sigma0", type=float, default=None, help="Initial SABR volatility.")
@click.option("--vol-of-vol", type=float, default=0.0)
@click.option("--rho", type=float, default=0.0)
def price(spot, strike, tau, sigma, rate, div_yield, sigma0, vol_of_vol, rho):
    """Analytic spot checks (Black-Scholes, or SABR when --sigma0 is given)."""
    try:
        option = OptionSpec(strike=strike, expiry=max(tau, 1e-12))
        rates = RateSpec(risk_free=rate, dividend_yield=div_yield)
        if sigma0 is not None:
            fwd = spot * np.exp((rate - div_yield) * tau)
            out = {
                "model": "sabr",
                "implied_vol": hagan_implied_vol(fwd, strike, sigma0, vol_of_vol, rho, tau),
                "price": sabr_price(spot, option, rates, sigma0, vol_of_vol, rho, tau),
                "practitioner_delta": practitioner_delta(
                    spot, option, rates, sigma0, vol_of_vol, rho, tau
                ),
                "bartlett_delta": bartlett_delta(
                    spot, option, rates, sigma0, vol_of_vol, rho, tau
                ),
            }
        else:
            if sigma is None:
                raise ValidationError("provide --sigma (Black-Scholes) or --sigma0 (SABR)")
            out = {
                "model": "black_scholes",
                "price": bs_price(spot, option, rates, sigma, tau),
                "delta": bs_delta(spot, option, rates, sigma, tau),
            }
    except ValidationError as exc:
        _fail(exc)
    click.echo(json.dumps(out, indent=2, sort_keys=True))


@main.command()
@click.option("--frequency", type=click.Choice(sorted(FREQUENCY_DAYS)), default="daily",
              show_default=True)
@click.option("--n-paths", type=int, default=10, show_default=True)
@click.pass_context
def simulate(ctx, frequency, n_paths):
    """Simulate price paths and dump them as CSV (path_id,step,price,vol)."""
    config, _ = _load(ctx)
    out = _out_dir(ctx)
    try:
        paths = simulate_batch(
            config.market, config.grid_for(frequency), n_paths, config.eval_seed,
            threads=ctx.obj["threads"],
        )
    except ValidationError as exc:
        _fail(exc)
    target = out / "paths.csv"
    with open(target, "w") as fh:
        write_paths_csv(paths, fh)
    click.echo(f"wrote {target}")


@main.command()
@click.option("--frequency", type=click.Choice(sorted(FREQUENCY_DAYS)), default=None,
              help="Train one frequency only (default: all in the config).")
@click.pass_context
def train(ctx, frequency):
    """Train the learned policy and write checkpoints plus learning curves."""
    config, _ = _load(ctx)
    out = _out_dir(ctx)
    frequencies = [frequency] if frequency else list(config.frequencies)
    for freq in frequencies:
        click.echo(f"training {freq} ({config.grid_for(freq).n_steps} steps/episode) ...")
        train_agent(config, freq, out)
        click.echo(f"saved checkpoint under {out / 'checkpoints' / freq}")


@main.command()
@click.option("--frequency", type=click.Choice(sorted(FREQUENCY_DAYS)), default=None,
              help="Frequency to evaluate (default: first in the config).")
@click.pass_context
def evaluate(ctx, frequency):
    """Evaluate the configured policies at one frequency; print JSON reports."""
    config, _ = _load(ctx)
    out = _out_dir(ctx)
    freq = frequency or config.frequencies[0]
    env_config = config.env_for(freq)
    try:
        paths = simulate_eval_paths(env_config, config.eval_n_paths, config.eval_seed,
                                    threads=ctx.obj["threads"])
        reports = []
        for label in config.policies:
            if label == "rl_ddpg":
                policy = load_agent(out, freq).policy()
            else:
                policy = config.baseline_policy(label)
            rep = evaluate_policy(policy, env_config, config.eval_n_paths,
                                  config.eval_seed, c=config.objective_c, paths=paths)
            reports.append(rep.to_dict())
    except ValidationError as exc:
        _fail(exc)
    click.echo(json.dumps({"frequency": freq, "reports": reports}, indent=2, sort_keys=True))


@main.command()
@click.pass_context
def compare(ctx):
    """Run the full experiment: train if enabled, evaluate every policy at
    every frequency on paired paths, write table.csv and report.json."""
    config, doc = _load(ctx)
    out = _out_dir(ctx)
    try:
        run_experiment(config, doc, out, threads=ctx.obj["threads"])
    except ValidationError as exc:
        _fail(exc)
    click.echo(f"wrote {out / 'table.csv'} and {out / 'report.json'}")


@main.command(name="slice")
@click.option("--checkpoint", type=click.Path(exists=True), required=True,
              help="Agent checkpoint directory.")
@click.option("--tau", type=float, required=True)
@click.option("--price-min", type=float, default=80.0, show_default=True)
@click.option("--price-max", type=float, default=120.0, show_default=True)
@click.option("--price-steps", type=int, default=41, show_default=True)
@click.option("--holding-steps", type=int, default=11, show_default=True)
@click.option("--sigma", type=float, default=None,
              help="Volatility for the reference Black-Scholes delta column.")
@click.pass_context
def slice_cmd(ctx, checkpoint, tau, price_min, price_max, price_steps, holding_steps, sigma):
    """Dump the learned policy's action over a (price, holding) grid."""
    out = _out_dir(ctx)
    try:
        agent = DdpgAgent.load(checkpoint)
        policy: RlPolicy = agent.policy()
        prices = np.linspace(price_min, price_max, price_steps)
        holdings = np.linspace(0.0, 1.0, holding_steps)
        bs_context = None
        if sigma is not None:
            option = OptionSpec(strike=agent.strike, expiry=agent.expiry)
            bs_context = (option, RateSpec(), sigma)
        rows = policy_slice(policy, prices, holdings, tau, bs_context=bs_context)
    except ValidationError as exc:
        _fail(exc)
    target = out / "slice.csv"
    with open(target, "w") as fh:
        write_slice_csv(rows, fh)
    click.echo(f"wrote {target}")


if __name__ == "__main__":
    main()
