"""Price-path simulation: GBM, lognormal stochastic volatility (SABR, beta=1),
and mixtures of the two, on a uniform rebalancing grid.

Randomness is managed with counter-based per-path substreams keyed by
(seed, path index), so batches are reproducible under any evaluation order.
Normals come from inverse-CDF transformed uniforms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Sequence, Union

import numpy as np
from scipy.special import ndtri

from .errors import ValidationError

TRADING_DAYS_PER_YEAR = 252


@dataclass(frozen=True)
class PathGrid:
    """Uniform time grid: `n_steps` rebalancing intervals over `expiry` years."""

    expiry: float
    n_steps: int

    def __post_init__(self):
        if not (self.expiry > 0):
            raise ValidationError(f"expiry must be positive, got {self.expiry}")
        if self.n_steps < 1:
            raise ValidationError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.expiry / self.n_steps

    def tau_at(self, step: int) -> float:
        """Time to maturity at grid node `step` (exactly 0 at the last node)."""
        if step >= self.n_steps:
            return 0.0
        return self.expiry - step * self.dt


@dataclass(frozen=True)
class GbmSpec:
    """Geometric Brownian motion: dS = mu*S dt + sigma*S dz."""

    s0: float
    mu: float
    sigma: float

    def __post_init__(self):
        if not (self.s0 > 0):
            raise ValidationError(f"s0 must be positive, got {self.s0}")
        if self.sigma < 0:
            raise ValidationError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class SabrSpec:
    """Lognormal SABR (beta=1): dS = mu*S dt + sigma*S dz1, dsigma = v*sigma dz2,
    corr(dz1, dz2) = rho."""

    s0: float
    mu: float
    sigma0: float
    vol_of_vol: float
    rho: float

    def __post_init__(self):
        if not (self.s0 > 0):
            raise ValidationError(f"s0 must be positive, got {self.s0}")
        if not (self.sigma0 > 0):
            raise ValidationError(f"sigma0 must be positive, got {self.sigma0}")
        if self.vol_of_vol < 0:
            raise ValidationError(f"vol_of_vol must be >= 0, got {self.vol_of_vol}")
        if not (-1.0 <= self.rho <= 1.0):
            raise ValidationError(f"rho must lie in [-1, 1], got {self.rho}")


@dataclass(frozen=True)
class MixtureSpec:
    """A set of candidate processes; one is drawn per episode before any step."""

    components: tuple[tuple[float, Union[GbmSpec, SabrSpec]], ...]

    def __post_init__(self):
        if len(self.components) == 0:
            raise ValidationError("components must be nonempty")
        weights = [w for w, _ in self.components]
        if any(w < 0 for w in weights):
            raise ValidationError(f"weights must be nonnegative, got {weights}")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ValidationError(f"weights must sum to 1, got sum {sum(weights)}")


MarketModel = Union[GbmSpec, SabrSpec, MixtureSpec]


@dataclass(frozen=True)
class PricePath:
    """n_steps+1 prices; vols present for stochastic-volatility paths."""

    prices: np.ndarray
    vols: np.ndarray | None = None


def substream(seed: int, index: int, lane: int = 0) -> np.random.Generator:
    """Independent counter-based stream for (seed, index); `lane` separates
    uses of the same seed (paths, exploration, replay, ...)."""
    ss = np.random.SeedSequence(seed, spawn_key=(lane, index))
    return np.random.Generator(np.random.Philox(ss))


def standard_normals(rng: np.random.Generator, n: int) -> np.ndarray:
    # Uniforms strictly inside (0,1) so ndtri never sees an endpoint.
    u = (rng.integers(0, 1 << 53, size=n) + 0.5) * 2.0**-53
    return ndtri(u)


def gbm_path_from_normals(spec: GbmSpec, grid: PathGrid, z: np.ndarray) -> PricePath:
    """Exact lognormal stepping: S_{i+1} = S_i * exp((mu - sigma^2/2) dt + sigma sqrt(dt) z_i)."""
    dt = grid.dt
    log_incr = (spec.mu - 0.5 * spec.sigma**2) * dt + spec.sigma * np.sqrt(dt) * z
    prices = spec.s0 * np.exp(np.concatenate(([0.0], np.cumsum(log_incr))))
    return PricePath(prices=prices)


def sabr_path_from_normals(
    spec: SabrSpec, grid: PathGrid, z1: np.ndarray, z2: np.ndarray
) -> PricePath:
    """Volatility stepped exactly lognormally; price stepped log-Euler with the
    period-start volatility frozen over each interval."""
    dt = grid.dt
    v = spec.vol_of_vol
    vol_incr = -0.5 * v**2 * dt + v * np.sqrt(dt) * z2
    vols = spec.sigma0 * np.exp(np.concatenate(([0.0], np.cumsum(vol_incr))))
    sig = vols[:-1]  # volatility at the start of each period
    log_incr = (spec.mu - 0.5 * sig**2) * dt + sig * np.sqrt(dt) * z1
    prices = spec.s0 * np.exp(np.concatenate(([0.0], np.cumsum(log_incr))))
    return PricePath(prices=prices, vols=vols)


def simulate_gbm_path(spec: GbmSpec, grid: PathGrid, rng: np.random.Generator) -> PricePath:
    z = standard_normals(rng, grid.n_steps)
    return gbm_path_from_normals(spec, grid, z)


def simulate_sabr_path(spec: SabrSpec, grid: PathGrid, rng: np.random.Generator) -> PricePath:
    # One block of draws for the price shocks, then one for the vol shocks, so a
    # v=0 SABR path consumes the same leading draws as the matching GBM path.
    z1 = standard_normals(rng, grid.n_steps)
    w = standard_normals(rng, grid.n_steps)
    z2 = spec.rho * z1 + np.sqrt(1.0 - spec.rho**2) * w
    return sabr_path_from_normals(spec, grid, z1, z2)


def sample_mixture(spec: MixtureSpec, rng: np.random.Generator) -> Union[GbmSpec, SabrSpec]:
    u = rng.random()
    acc = 0.0
    for weight, model in spec.components:
        acc += weight
        if u < acc:
            return model
    return spec.components[-1][1]


def simulate_path(model: MarketModel, grid: PathGrid, rng: np.random.Generator) -> PricePath:
    if isinstance(model, MixtureSpec):
        model = sample_mixture(model, rng)
    if isinstance(model, GbmSpec):
        return simulate_gbm_path(model, grid, rng)
    if isinstance(model, SabrSpec):
        return simulate_sabr_path(model, grid, rng)
    raise ValidationError(f"unknown market model type: {type(model).__name__}")


def simulate_batch(
    model: MarketModel, grid: PathGrid, n_paths: int, seed: int, threads: int = 1
) -> list[PricePath]:
    """Path i is generated from substream (seed, i); the result does not depend
    on evaluation order or parallel scheduling, so thread fan-out is safe."""
    if n_paths < 1:
        raise ValidationError(f"n_paths must be >= 1, got {n_paths}")
    if threads <= 1 or n_paths < 2 * threads:
        return [simulate_path(model, grid, substream(seed, i)) for i in range(n_paths)]

    from concurrent.futures import ThreadPoolExecutor

    out: list[PricePath | None] = [None] * n_paths

    def fill(chunk: range) -> None:
        for i in chunk:
            out[i] = simulate_path(model, grid, substream(seed, i))

    step = -(-n_paths // threads)
    chunks = [range(k, min(k + step, n_paths)) for k in range(0, n_paths, step)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(fill, chunks))
    return out


def stack_paths(paths: Sequence[PricePath]) -> tuple[np.ndarray, np.ndarray | None]:
    """Stack a homogeneous batch into (prices, vols) matrices of shape
    (n_paths, n_steps+1); vols is None when no path carries them."""
    prices = np.stack([p.prices for p in paths])
    if all(p.vols is not None for p in paths):
        vols = np.stack([p.vols for p in paths])
    else:
        vols = None
    return prices, vols


def write_paths_csv(paths: Sequence[PricePath], fh: IO[str]) -> None:
    """Dump one row per grid node: path_id,step,price,vol (vol empty for GBM)."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["path_id", "step", "price", "vol"])
    for pid, path in enumerate(paths):
        for step, price in enumerate(path.prices):
            vol = "" if path.vols is None else f"{path.vols[step]:.10g}"
            writer.writerow([pid, step, f"{price:.10g}", vol])
