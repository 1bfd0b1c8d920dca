"""Experiment configuration: a nested JSON document validated strictly
(unknown keys are errors, missing required keys are named) and mapped onto
environment configs, policies, and training hyperparameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .agents import (
    BartlettDeltaPolicy,
    BsDeltaPolicy,
    DdpgHyper,
    NoHedgePolicy,
    ObjectiveSpec,
    PractitionerDeltaPolicy,
)
from .env import EnvConfig, PricerChoice
from .errors import ValidationError
from .market import (
    TRADING_DAYS_PER_YEAR,
    GbmSpec,
    MarketModel,
    MixtureSpec,
    PathGrid,
    SabrSpec,
)
from .pricing import OptionSpec, RateSpec

FREQUENCY_DAYS = {"daily": 1, "2day": 2, "3day": 3, "weekly": 5}
POLICY_LABELS = ("no_hedge", "delta_bs", "delta_practitioner", "delta_bartlett", "rl_ddpg")


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ValidationError(f"missing required key '{where}.{key}'" if where else
                              f"missing required key '{key}'")
    return section[key]


def _reject_unknown(section: dict, allowed: set[str], where: str):
    unknown = set(section) - allowed
    if unknown:
        name = sorted(unknown)[0]
        path = f"{where}.{name}" if where else name
        raise ValidationError(f"unknown key '{path}'")


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"'{where}' must be a number, got {value!r}")
    return float(value)


def _integer(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"'{where}' must be an integer, got {value!r}")
    return value


def parse_market(section: dict, where: str = "market") -> MarketModel:
    kind = _require(section, "kind", where)
    if kind == "gbm":
        _reject_unknown(section, {"kind", "s0", "mu", "sigma"}, where)
        return GbmSpec(
            s0=_number(_require(section, "s0", where), f"{where}.s0"),
            mu=_number(_require(section, "mu", where), f"{where}.mu"),
            sigma=_number(_require(section, "sigma", where), f"{where}.sigma"),
        )
    if kind == "sabr":
        _reject_unknown(section, {"kind", "s0", "mu", "sigma0", "vol_of_vol", "rho"}, where)
        return SabrSpec(
            s0=_number(_require(section, "s0", where), f"{where}.s0"),
            mu=_number(_require(section, "mu", where), f"{where}.mu"),
            sigma0=_number(_require(section, "sigma0", where), f"{where}.sigma0"),
            vol_of_vol=_number(_require(section, "vol_of_vol", where), f"{where}.vol_of_vol"),
            rho=_number(_require(section, "rho", where), f"{where}.rho"),
        )
    if kind == "mixture":
        _reject_unknown(section, {"kind", "components"}, where)
        comps = _require(section, "components", where)
        if not isinstance(comps, list):
            raise ValidationError(f"'{where}.components' must be a list")
        parsed = []
        for i, comp in enumerate(comps):
            cw = f"{where}.components[{i}]"
            _reject_unknown(comp, {"weight", "model"}, cw)
            weight = _number(_require(comp, "weight", cw), f"{cw}.weight")
            model = parse_market(_require(comp, "model", cw), f"{cw}.model")
            parsed.append((weight, model))
        return MixtureSpec(components=tuple(parsed))
    raise ValidationError(f"'{where}.kind' must be gbm, sabr, or mixture, got {kind!r}")


@dataclass(frozen=True)
class TrainingConfig:
    enabled: bool = False
    episodes: int = 50_000
    seed: int = 1
    hyper: DdpgHyper = field(default_factory=DdpgHyper)


@dataclass(frozen=True)
class RunConfig:
    name: str
    option: OptionSpec
    expiry_days: int
    market: MarketModel
    rates: RateSpec
    kappa: float
    formulation: str
    pricer: PricerChoice
    gamma: float
    objective_c: float
    frequencies: tuple[str, ...]
    policies: tuple[str, ...]
    eval_n_paths: int
    eval_seed: int
    training: TrainingConfig

    def grid_for(self, frequency: str) -> PathGrid:
        days = FREQUENCY_DAYS[frequency]
        n_steps = max(1, round(self.expiry_days / days))
        return PathGrid(self.expiry_days / TRADING_DAYS_PER_YEAR, n_steps)

    def env_for(self, frequency: str) -> EnvConfig:
        return EnvConfig(
            option=self.option,
            model=self.market,
            grid=self.grid_for(frequency),
            kappa=self.kappa,
            formulation=self.formulation,
            pricer=self.pricer,
            gamma=self.gamma,
            rates=self.rates,
        )

    def objective(self) -> ObjectiveSpec:
        return ObjectiveSpec(c=self.objective_c, gamma=self.gamma)

    def baseline_policy(self, label: str):
        """Instantiate a non-RL policy by label for this market."""
        if label == "no_hedge":
            return NoHedgePolicy()
        if isinstance(self.market, MixtureSpec):
            raise ValidationError(
                f"policy '{label}' is not available for mixture markets (no single "
                "pricing context); use no_hedge or rl_ddpg"
            )
        if label == "delta_bs":
            sigma = self.market.sigma if isinstance(self.market, GbmSpec) else self.market.sigma0
            return BsDeltaPolicy(self.option, self.rates, sigma)
        if label == "delta_practitioner" or label == "delta_bartlett":
            if not isinstance(self.market, SabrSpec):
                raise ValidationError(
                    f"policy '{label}' needs a stochastic-volatility market"
                )
            cls = PractitionerDeltaPolicy if label == "delta_practitioner" else BartlettDeltaPolicy
            return cls(self.option, self.rates, self.market.vol_of_vol, self.market.rho)
        raise ValidationError(f"unknown policy label {label!r}")


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ValidationError("config root must be an object")
    _reject_unknown(
        doc,
        {"name", "option", "market", "rates", "hedging", "objective",
         "frequencies", "policies", "evaluation", "training"},
        "",
    )
    name = doc.get("name", "experiment")

    option_sec = _require(doc, "option", "")
    _reject_unknown(option_sec, {"strike", "expiry_days"}, "option")
    expiry_days = _integer(_require(option_sec, "expiry_days", "option"), "option.expiry_days")
    if expiry_days < 1:
        raise ValidationError(f"'option.expiry_days' must be >= 1, got {expiry_days}")
    option = OptionSpec(
        strike=_number(_require(option_sec, "strike", "option"), "option.strike"),
        expiry=expiry_days / TRADING_DAYS_PER_YEAR,
    )

    market = parse_market(_require(doc, "market", ""))

    rates_sec = doc.get("rates", {})
    _reject_unknown(rates_sec, {"risk_free", "dividend_yield"}, "rates")
    rates = RateSpec(
        risk_free=_number(rates_sec.get("risk_free", 0.0), "rates.risk_free"),
        dividend_yield=_number(rates_sec.get("dividend_yield", 0.0), "rates.dividend_yield"),
    )

    hedging = _require(doc, "hedging", "")
    _reject_unknown(hedging, {"kappa", "formulation", "pricer", "pricer_sigma", "gamma"}, "hedging")
    kappa = _number(_require(hedging, "kappa", "hedging"), "hedging.kappa")
    formulation = hedging.get("formulation", "accounting")
    pricer_kind = hedging.get("pricer", "matched")
    sigma_bar = hedging.get("pricer_sigma")
    pricer = PricerChoice(
        kind=pricer_kind, sigma_bar=None if sigma_bar is None else _number(sigma_bar, "hedging.pricer_sigma")
    )
    gamma = _number(hedging.get("gamma", 1.0), "hedging.gamma")

    objective_sec = _require(doc, "objective", "")
    _reject_unknown(objective_sec, {"c"}, "objective")
    c = _number(_require(objective_sec, "c", "objective"), "objective.c")

    frequencies = _require(doc, "frequencies", "")
    if not isinstance(frequencies, list) or not frequencies:
        raise ValidationError("'frequencies' must be a nonempty list")
    for f in frequencies:
        if f not in FREQUENCY_DAYS:
            raise ValidationError(
                f"unknown frequency {f!r}; expected one of {sorted(FREQUENCY_DAYS)}"
            )

    policies = _require(doc, "policies", "")
    if not isinstance(policies, list) or not policies:
        raise ValidationError("'policies' must be a nonempty list")
    for p in policies:
        if p not in POLICY_LABELS:
            raise ValidationError(f"unknown policy {p!r}; expected one of {POLICY_LABELS}")

    evaluation = _require(doc, "evaluation", "")
    _reject_unknown(evaluation, {"n_paths", "seed"}, "evaluation")
    n_paths = _integer(_require(evaluation, "n_paths", "evaluation"), "evaluation.n_paths")
    eval_seed = _integer(_require(evaluation, "seed", "evaluation"), "evaluation.seed")

    training_sec = doc.get("training", {})
    hyper_keys = set(DdpgHyper().to_dict())
    _reject_unknown(training_sec, {"enabled", "episodes", "seed"} | hyper_keys, "training")
    hyper_kwargs = {k: training_sec[k] for k in hyper_keys if k in training_sec}
    training = TrainingConfig(
        enabled=bool(training_sec.get("enabled", False)),
        episodes=_integer(training_sec.get("episodes", 50_000), "training.episodes"),
        seed=_integer(training_sec.get("seed", 1), "training.seed"),
        hyper=DdpgHyper.from_dict(hyper_kwargs),
    )

    return RunConfig(
        name=name,
        option=option,
        expiry_days=expiry_days,
        market=market,
        rates=rates,
        kappa=kappa,
        formulation=formulation,
        pricer=pricer,
        gamma=gamma,
        objective_c=c,
        frequencies=tuple(frequencies),
        policies=tuple(policies),
        eval_n_paths=n_paths,
        eval_seed=eval_seed,
        training=training,
    )


def load_config(path: str | Path) -> tuple[RunConfig, dict]:
    """Parse and validate a config file; returns (config, raw document echo)."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}") from exc
    return parse_config(doc), doc
