"""The hedging decision process for a short European call.

One episode spans the option's life on a uniform grid. The state is
(previous holding, asset price, time to maturity); the action is the holding
for the coming period, a fraction of the underlying in [0, 1]. Costs are
negative rewards. Two cost formulations are supported:

* accounting: per-period change in the marked-to-model hedged-position value,
  plus trading costs;
* cashflow: actual cash in/outflows from trading, with the option payoff at
  expiry.

Each trade is charged at the price at which it executes, on the step of the
action that causes it: the time-0 setup cost lands in the first step and the
expiry liquidation in the last, so every cost is attributable to an action.
The full path is pre-simulated at reset; stepping is a deterministic replay.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import IO, Union

import numpy as np

from .errors import EpisodeStateError, ValidationError
from .market import (
    GbmSpec,
    MarketModel,
    MixtureSpec,
    PathGrid,
    PricePath,
    SabrSpec,
    sample_mixture,
    simulate_gbm_path,
    simulate_sabr_path,
)
from .pricing import OptionSpec, RateSpec, bs_price, sabr_price

FORMULATIONS = ("accounting", "cashflow")
PRICER_KINDS = ("matched", "constant_vol_bs")


@dataclass(frozen=True)
class PricerChoice:
    """Valuation model for the accounting formulation: `matched` uses the same
    family as the path generator; `constant_vol_bs` marks with a fixed
    Black-Scholes volatility regardless of the generator."""

    kind: str = "matched"
    sigma_bar: float | None = None

    def __post_init__(self):
        if self.kind not in PRICER_KINDS:
            raise ValidationError(f"pricer kind must be one of {PRICER_KINDS}, got {self.kind!r}")
        if self.kind == "constant_vol_bs":
            if self.sigma_bar is None or self.sigma_bar < 0:
                raise ValidationError("constant_vol_bs requires sigma_bar >= 0")


@dataclass(frozen=True)
class EnvConfig:
    option: OptionSpec
    model: MarketModel
    grid: PathGrid
    kappa: float
    formulation: str = "accounting"
    pricer: PricerChoice = PricerChoice()
    gamma: float = 1.0
    rates: RateSpec = RateSpec()

    def __post_init__(self):
        if self.kappa < 0:
            raise ValidationError(f"kappa must be >= 0, got {self.kappa}")
        if not (0.0 < self.gamma <= 1.0):
            raise ValidationError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.formulation not in FORMULATIONS:
            raise ValidationError(
                f"formulation must be one of {FORMULATIONS}, got {self.formulation!r}"
            )


@dataclass(frozen=True)
class HedgeState:
    holding_prev: float
    price: float
    tau: float


@dataclass(frozen=True)
class StepOutcome:
    cost: float
    next_state: HedgeState
    terminal: bool


def payoff(price_at_expiry, option: OptionSpec):
    return np.maximum(price_at_expiry - option.strike, 0.0)


def _price_nodes(config: EnvConfig, component, prices, vols, taus) -> np.ndarray:
    """Option price under the configured pricer; arrays broadcast."""
    pricer = config.pricer
    if pricer.kind == "constant_vol_bs":
        return np.asarray(bs_price(prices, config.option, config.rates, pricer.sigma_bar, taus))
    if isinstance(component, GbmSpec):
        return np.asarray(bs_price(prices, config.option, config.rates, component.sigma, taus))
    if vols is None:
        raise ValidationError("matched SABR pricer needs the path's volatilities")
    return np.asarray(
        sabr_price(
            prices, config.option, config.rates,
            vols, component.vol_of_vol, component.rho, taus,
        )
    )


def node_values(
    config: EnvConfig, component: Union[GbmSpec, SabrSpec], path: PricePath
) -> np.ndarray:
    """Option price at grid nodes 0..n-1 under the configured pricer
    (node n is pinned to the payoff by the stepping logic)."""
    grid = config.grid
    n = grid.n_steps
    taus = config.option.expiry - grid.dt * np.arange(n)
    vols = None if path.vols is None else path.vols[:n]
    return _price_nodes(config, component, path.prices[:n], vols, taus)


@dataclass
class Episode:
    """Single-owner handle over one pre-simulated option life."""

    config: EnvConfig
    component: Union[GbmSpec, SabrSpec]
    path: PricePath
    values: np.ndarray
    _i: int = 0
    _holding_prev: float = 0.0
    _costs: list = field(default_factory=list)
    clamp_count: int = 0
    _trace: list = field(default_factory=list)

    @property
    def state(self) -> HedgeState:
        grid = self.config.grid
        return HedgeState(
            holding_prev=self._holding_prev,
            price=float(self.path.prices[self._i]),
            tau=grid.tau_at(self._i),
        )

    @property
    def terminal(self) -> bool:
        return self._i >= self.config.grid.n_steps

    @property
    def premium(self) -> float:
        """Initial option price under the configured pricer."""
        return float(self.values[0])

    def step(self, action: float) -> StepOutcome:
        if self.terminal:
            raise EpisodeStateError("episode is already terminal")
        holding = float(action)
        if holding < 0.0 or holding > 1.0:
            holding = min(max(holding, 0.0), 1.0)
            self.clamp_count += 1

        cfg = self.config
        grid = cfg.grid
        i = self._i
        last = i == grid.n_steps - 1
        s_now = float(self.path.prices[i])
        s_next = float(self.path.prices[i + 1])
        h_prev = self._holding_prev
        trade_cost = cfg.kappa * s_now * abs(holding - h_prev)

        if cfg.formulation == "accounting":
            v_now = -float(self.values[i])
            v_next = -float(payoff(s_next, cfg.option)) if last else -float(self.values[i + 1])
            pnl = v_next - v_now + holding * (s_next - s_now)
            cash = trade_cost - pnl
            if last:
                cash += cfg.kappa * s_next * abs(holding)
        else:
            cash = s_now * (holding - h_prev) + trade_cost
            if last:
                cash += -s_next * holding + cfg.kappa * s_next * abs(holding)
                cash += float(payoff(s_next, cfg.option))

        # Eq.-style convention: each step's cash amount is discounted one period.
        cost = cfg.gamma * cash
        vol = "" if self.path.vols is None else float(self.path.vols[i])
        self._trace.append((i, s_now, vol, holding, cost, float(self.values[i])))
        self._costs.append(cost)
        self._holding_prev = holding
        self._i += 1
        next_state = HedgeState(holding, s_next, grid.tau_at(self._i))
        return StepOutcome(cost=cost, next_state=next_state, terminal=last)

    def total_cost(self) -> float:
        """Discounted sum of all per-step costs including boundary terms."""
        if not self.terminal:
            raise EpisodeStateError("episode is not terminal yet")
        gamma = self.config.gamma
        return float(sum(c * gamma**i for i, c in enumerate(self._costs)))

    def write_trace(self, fh: IO[str]) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "price", "vol", "holding", "cost", "option_value"])
        for row in self._trace:
            writer.writerow(row)


def batch_episode_costs(
    config: EnvConfig,
    component: Union[GbmSpec, SabrSpec, None],
    prices: np.ndarray,
    vols: np.ndarray | None,
    policy,
) -> tuple[np.ndarray, float]:
    """Vectorized twin of `Episode.step` over a stacked path batch.

    `policy(holding_prev, price, tau, vol)` maps arrays to an action array;
    actions are clamped to [0, 1] exactly as the stepping environment does.
    Returns (total discounted cost per path, initial option price).
    """
    if component is None:
        if isinstance(config.model, MixtureSpec):
            raise ValidationError("mixture models need an explicit component per batch")
        component = config.model
    grid = config.grid
    n = grid.n_steps
    expiry = config.option.expiry
    kappa = config.kappa
    gamma = config.gamma
    n_paths = prices.shape[0]

    taus = expiry - grid.dt * np.arange(n)
    vols_nodes = None if vols is None else vols[:, :n]
    values = _price_nodes(config, component, prices[:, :n], vols_nodes, taus[None, :])

    h_prev = np.zeros(n_paths)
    total = np.zeros(n_paths)
    accounting = config.formulation == "accounting"
    for i in range(n):
        last = i == n - 1
        s_now = prices[:, i]
        s_next = prices[:, i + 1]
        vol_i = None if vols is None else vols[:, i]
        a = np.clip(np.asarray(policy(h_prev, s_now, taus[i], vol_i), dtype=float), 0.0, 1.0)
        trade = kappa * s_now * np.abs(a - h_prev)
        if accounting:
            v_now = -values[:, i]
            v_next = -payoff(s_next, config.option) if last else -values[:, i + 1]
            cash = trade - (v_next - v_now + a * (s_next - s_now))
            if last:
                cash = cash + kappa * s_next * np.abs(a)
        else:
            cash = s_now * (a - h_prev) + trade
            if last:
                cash = cash - s_next * a + kappa * s_next * np.abs(a)
                cash = cash + payoff(s_next, config.option)
        total += gamma ** (i + 1) * cash
        h_prev = a
    return total, float(values[0, 0])


class HedgingEnv:
    def __init__(self, config: EnvConfig):
        self.config = config

    def reset(self, rng: np.random.Generator) -> Episode:
        """Sample the episode's process (for mixtures), pre-simulate the full
        path, and return a fresh unhedged episode. No cost is charged yet; the
        setup cost belongs to the first action."""
        cfg = self.config
        model = cfg.model
        if isinstance(model, MixtureSpec):
            model = sample_mixture(model, rng)
        if isinstance(model, GbmSpec):
            path = simulate_gbm_path(model, cfg.grid, rng)
        else:
            path = simulate_sabr_path(model, cfg.grid, rng)
        values = node_values(cfg, model, path)
        return Episode(config=cfg, component=model, path=path, values=values)
