"""Policy evaluation over Monte Carlo path batches: cost statistics as a
percent of the initial option price, paired multi-policy comparisons, and
policy-slice dumps.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import asdict, dataclass
from typing import IO, Sequence

import numpy as np

from .env import EnvConfig, batch_episode_costs
from .errors import ValidationError
from .market import MixtureSpec, sample_mixture, simulate_batch, stack_paths, substream
from .pricing import bs_delta


@dataclass(frozen=True)
class EvalReport:
    """Cost statistics normalized by the initial option price (x100)."""

    policy: str
    n_paths: int
    mean_cost_pct: float
    sd_cost_pct: float
    y0_pct: float
    se_mean: float
    se_sd: float
    se_y0: float
    seed: int
    premium: float
    path_checksum: str

    def to_dict(self) -> dict:
        return asdict(self)


def _path_checksum(prices: np.ndarray, vols: np.ndarray | None) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(prices).tobytes())
    if vols is not None:
        digest.update(np.ascontiguousarray(vols).tobytes())
    return digest.hexdigest()


def _cost_statistics(totals_pct: np.ndarray, c: float) -> dict:
    """Sample mean/sd (n-1 denominator), Y(0) = mean + c*sd, and delta-method
    standard errors (covariance of mean and sd included via the third moment)."""
    n = len(totals_pct)
    mean = float(np.mean(totals_pct))
    sd = float(np.std(totals_pct, ddof=1))
    centered = totals_pct - mean
    m2 = float(np.mean(centered**2))
    m3 = float(np.mean(centered**3))
    m4 = float(np.mean(centered**4))
    var_mean = m2 / n
    var_sd = max(m4 - m2**2, 0.0) / (4.0 * m2 * n) if m2 > 0 else 0.0
    cov_mean_sd = m3 / (2.0 * np.sqrt(m2) * n) if m2 > 0 else 0.0
    var_y0 = max(var_mean + c**2 * var_sd + 2.0 * c * cov_mean_sd, 0.0)
    return {
        "mean": mean,
        "sd": sd,
        "y0": mean + c * sd,
        "se_mean": float(np.sqrt(var_mean)),
        "se_sd": float(np.sqrt(var_sd)),
        "se_y0": float(np.sqrt(var_y0)),
    }


def _batch_costs_any_model(config: EnvConfig, prices, vols, policy, components):
    """Totals and premium for a stacked batch; mixtures are evaluated per
    sampled component and each path is normalized by its component's premium."""
    if not isinstance(config.model, MixtureSpec):
        totals, premium = batch_episode_costs(config, None, prices, vols, policy)
        return totals / premium * 100.0, premium
    totals_pct = np.zeros(prices.shape[0])
    premiums = np.zeros(prices.shape[0])
    for component in {id(c): c for c in components}.values():
        mask = np.array([c is component for c in components])
        sub_vols = None if vols is None else vols[mask]
        totals, premium = batch_episode_costs(config, component, prices[mask], sub_vols, policy)
        totals_pct[mask] = totals / premium * 100.0
        premiums[mask] = premium
    return totals_pct, float(np.mean(premiums))


def simulate_eval_paths(config: EnvConfig, n_paths: int, seed: int, threads: int = 1):
    """Stacked evaluation batch plus per-path mixture components (None for
    plain models). Path i comes from substream (seed, i)."""
    model = config.model
    if isinstance(model, MixtureSpec):
        # simulate_path draws the component then the path from one substream,
        # exactly as HedgingEnv.reset does; re-deriving the component from a
        # fresh copy of the same substream recovers the identical choice.
        components = [sample_mixture(model, substream(seed, i)) for i in range(n_paths)]
        paths = simulate_batch(model, config.grid, n_paths, seed, threads=threads)
        prices = np.stack([p.prices for p in paths])
        if all(p.vols is not None for p in paths):
            vols = np.stack([p.vols for p in paths])
        else:
            vols = None
        return prices, vols, components
    paths = simulate_batch(model, config.grid, n_paths, seed, threads=threads)
    prices, vols = stack_paths(paths)
    return prices, vols, [None] * n_paths


def evaluate_policy(
    policy,
    config: EnvConfig,
    n_paths: int,
    seed: int,
    c: float,
    paths: tuple | None = None,
) -> EvalReport:
    """Run `n_paths` episodes under a deterministic policy and report mean,
    standard deviation, and Y(0) of the total cost as percent of the initial
    option price. Pass `paths` (from simulate_eval_paths) to reuse a batch."""
    if n_paths < 2:
        raise ValidationError(f"n_paths must be >= 2, got {n_paths}")
    if paths is None:
        paths = simulate_eval_paths(config, n_paths, seed)
    prices, vols, components = paths
    totals_pct, premium = _batch_costs_any_model(config, prices, vols, policy, components)
    stats = _cost_statistics(totals_pct, c)
    return EvalReport(
        policy=getattr(policy, "label", policy.__class__.__name__),
        n_paths=n_paths,
        mean_cost_pct=stats["mean"],
        sd_cost_pct=stats["sd"],
        y0_pct=stats["y0"],
        se_mean=stats["se_mean"],
        se_sd=stats["se_sd"],
        se_y0=stats["se_y0"],
        seed=seed,
        premium=premium,
        path_checksum=_path_checksum(prices, vols),
    )


@dataclass(frozen=True)
class ComparisonRow:
    frequency: str
    reports: tuple[EvalReport, ...]
    improvements: dict  # policy -> {baseline -> improvement pct}

    def to_dict(self) -> dict:
        return {
            "frequency": self.frequency,
            "reports": [r.to_dict() for r in self.reports],
            "improvements": self.improvements,
        }


def improvement_pct(y0_base: float, y0_other: float) -> float:
    return (y0_base - y0_other) / y0_base * 100.0


def compare(
    policies: Sequence,
    config: EnvConfig,
    n_paths: int,
    seed: int,
    c: float,
    baselines: Sequence[str] | None = None,
    frequency: str = "",
) -> ComparisonRow:
    """Evaluate every policy on the same path batch (paired design) and
    compute Y(0) improvements against each baseline policy."""
    if len(policies) < 2:
        raise ValidationError("compare needs at least two policies")
    paths = simulate_eval_paths(config, n_paths, seed)
    reports = tuple(
        evaluate_policy(p, config, n_paths, seed, c, paths=paths) for p in policies
    )
    labels = [r.policy for r in reports]
    if baselines is None:
        baselines = [lb for lb in labels if lb.startswith("delta_")]
    by_label = dict(zip(labels, reports))
    improvements = {
        label: {
            base: improvement_pct(by_label[base].y0_pct, by_label[label].y0_pct)
            for base in baselines
            if base in by_label
        }
        for label in labels
    }
    return ComparisonRow(frequency=frequency, reports=reports, improvements=improvements)


def policy_slice(
    policy,
    price_grid: Sequence[float],
    holding_grid: Sequence[float],
    tau: float,
    bs_context: tuple | None = None,
    vol: float | None = None,
) -> list[dict]:
    """Policy action at every (price, holding_prev) for a fixed tau, with a
    reference Black-Scholes delta column when a (option, rates, sigma)
    context is supplied."""
    if len(price_grid) == 0 or len(holding_grid) == 0:
        raise ValidationError("price and holding grids must be nonempty")
    rows = []
    for price in price_grid:
        actions = {}
        for h in holding_grid:
            vol_arr = None if vol is None else np.asarray([vol])
            a = policy(np.asarray([h]), np.asarray([float(price)]), tau, vol_arr)
            actions[h] = float(np.asarray(a).reshape(()))
        row = {"price": float(price), "actions": actions}
        if bs_context is not None:
            option, rates, sigma = bs_context
            row["bs_delta"] = float(bs_delta(price, option, rates, sigma, tau))
        rows.append(row)
    return rows


def write_slice_csv(rows: list[dict], fh: IO[str]) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    holdings = sorted(rows[0]["actions"].keys())
    header = ["price"] + [f"h={h:g}" for h in holdings]
    if "bs_delta" in rows[0]:
        header.append("bs_delta")
    writer.writerow(header)
    for row in rows:
        out = [f"{row['price']:.6f}"] + [f"{row['actions'][h]:.6f}" for h in holdings]
        if "bs_delta" in row:
            out.append(f"{row['bs_delta']:.6f}")
        writer.writerow(out)
