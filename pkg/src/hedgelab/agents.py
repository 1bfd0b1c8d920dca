"""Hedging policies: twin-critic deterministic policy gradient over a
continuous holding, a discrete-action twin-Q learner, delta-hedging baselines,
and the risk-adjusted objective that combines the two critics.

The learner tracks two action-value functions: Q1 estimates the expected
remaining hedging cost and Q2 its expected square, combined through

    F(s, a) = Q1(s, a) + c * sqrt(max(Q2(s, a) - Q1(s, a)^2, 0))

which the policy minimizes. Exploration replaces the policy's action with a
uniform draw on [0, 1] with probability epsilon.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import EnvConfig, HedgeState, HedgingEnv, batch_episode_costs
from .errors import TrainingDiverged, ValidationError
from .market import simulate_batch, stack_paths, substream
from .nets import (
    AdamState,
    Mlp,
    ReplayBuffer,
    Transition,
    adam_step,
    load_mlp,
    load_sidecar,
    save_mlp,
    save_sidecar,
    soft_update,
)
from .pricing import OptionSpec, RateSpec, bartlett_delta, bs_delta, practitioner_delta

ACTION_GRID = np.round(np.linspace(0.0, 1.0, 11), 1)


@dataclass(frozen=True)
class ObjectiveSpec:
    """Risk-adjusted cost: mean plus `c` standard deviations, discount `gamma`."""

    c: float
    gamma: float = 1.0

    def __post_init__(self):
        if self.c < 0:
            raise ValidationError(f"c must be >= 0, got {self.c}")


def f_objective(q1, q2, c):
    """q1 + c*sqrt(q2 - q1^2), with the variance argument clamped at zero to
    absorb approximation noise."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    out = q1 + c * np.sqrt(np.maximum(q2 - q1**2, 0.0))
    return float(out) if out.ndim == 0 else out


def critic_targets(cost, terminal, q1_next, q2_next, gamma):
    """Bootstrapped regression targets for the two critics; terminal
    transitions never reference the next state."""
    x = np.asarray(cost, dtype=float)
    live = 1.0 - np.asarray(terminal, dtype=float)
    q1n = np.asarray(q1_next, dtype=float)
    q2n = np.asarray(q2_next, dtype=float)
    y1 = x + gamma * q1n * live
    y2 = x**2 + (gamma**2 * q2n + 2.0 * gamma * x * q1n) * live
    return y1, y2


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.05
    decay_episodes: int = 1

    def __post_init__(self):
        if not (1.0 >= self.start >= self.end >= 0.0):
            raise ValidationError(
                f"need 1 >= start >= end >= 0, got start={self.start}, end={self.end}"
            )

    def value(self, episode: int) -> float:
        if self.decay_episodes <= 0:
            return self.end
        frac = min(episode / self.decay_episodes, 1.0)
        return self.start + (self.end - self.start) * frac


def normalize_state(holding_prev, price, tau, strike: float, expiry: float):
    """Dimensionless, order-one inputs: (price/strike - 1, tau/expiry, holding)."""
    if np.ndim(holding_prev) == 0 and np.ndim(price) == 0 and np.ndim(tau) == 0:
        return np.array([price / strike - 1.0, tau / expiry, holding_prev])
    return np.stack(
        np.broadcast_arrays(
            np.asarray(price, dtype=float) / strike - 1.0,
            np.asarray(tau, dtype=float) / expiry,
            np.asarray(holding_prev, dtype=float),
        ),
        axis=-1,
    )


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

class NoHedgePolicy:
    label = "no_hedge"

    def __call__(self, holding_prev, price, tau, vol=None):
        return np.zeros_like(np.asarray(price, dtype=float))


class BsDeltaPolicy:
    """Black-Scholes delta at a fixed volatility (the GBM baseline)."""

    label = "delta_bs"

    def __init__(self, option: OptionSpec, rates: RateSpec, sigma: float):
        if sigma is None:
            raise ValidationError("delta_bs policy requires a volatility")
        self.option = option
        self.rates = rates
        self.sigma = sigma

    def __call__(self, holding_prev, price, tau, vol=None):
        return np.asarray(bs_delta(price, self.option, self.rates, self.sigma, tau))


class PractitionerDeltaPolicy:
    """Black-Scholes delta at the current implied volatility."""

    label = "delta_practitioner"

    def __init__(self, option: OptionSpec, rates: RateSpec, vol_of_vol: float, rho: float):
        self.option = option
        self.rates = rates
        self.vol_of_vol = vol_of_vol
        self.rho = rho

    def __call__(self, holding_prev, price, tau, vol=None):
        if vol is None:
            raise ValidationError("practitioner delta requires the current volatility")
        return np.asarray(
            practitioner_delta(
                price, self.option, self.rates, vol, self.vol_of_vol, self.rho, tau
            )
        )


class BartlettDeltaPolicy:
    """Delta that folds in the expected volatility move per spot move."""

    label = "delta_bartlett"

    def __init__(self, option: OptionSpec, rates: RateSpec, vol_of_vol: float, rho: float):
        self.option = option
        self.rates = rates
        self.vol_of_vol = vol_of_vol
        self.rho = rho

    def __call__(self, holding_prev, price, tau, vol=None):
        if vol is None:
            raise ValidationError("Bartlett delta requires the current volatility")
        return np.asarray(
            bartlett_delta(
                price, self.option, self.rates, vol, self.vol_of_vol, self.rho, tau
            )
        )


class RlPolicy:
    """Deterministic actor output (no exploration)."""

    label = "rl_ddpg"

    def __init__(self, actor: Mlp, strike: float, expiry: float):
        self.actor = actor
        self.strike = strike
        self.expiry = expiry

    def __call__(self, holding_prev, price, tau, vol=None):
        s = normalize_state(holding_prev, price, tau, self.strike, self.expiry)
        out = self.actor.forward(s.reshape(-1, 3))[:, 0]
        return out.reshape(np.shape(price)) if np.ndim(price) else float(out[0])


def act(policy, state: HedgeState, vol: float | None = None) -> float:
    """Evaluate a policy at a single state; `vol` is the current instantaneous
    volatility for stochastic-volatility pricing contexts."""
    out = policy(state.holding_prev, state.price, state.tau, vol)
    return float(np.asarray(out).reshape(()))


# ---------------------------------------------------------------------------
# Twin-critic DDPG
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DdpgHyper:
    hidden: tuple[int, ...] = (64, 64, 64)
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    batch_size: int = 128
    buffer_capacity: int = 500_000
    soft_tau: float = 0.005
    warmup: int = 2_000
    per_alpha: float = 0.6
    per_beta0: float = 0.4
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.6
    eval_every: int = 2_500
    eval_paths: int = 2_000

    def to_dict(self) -> dict:
        return {
            "hidden": list(self.hidden),
            "actor_lr": self.actor_lr,
            "critic_lr": self.critic_lr,
            "batch_size": self.batch_size,
            "buffer_capacity": self.buffer_capacity,
            "soft_tau": self.soft_tau,
            "warmup": self.warmup,
            "per_alpha": self.per_alpha,
            "per_beta0": self.per_beta0,
            "eps_start": self.eps_start,
            "eps_end": self.eps_end,
            "eps_decay_frac": self.eps_decay_frac,
            "eval_every": self.eval_every,
            "eval_paths": self.eval_paths,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DdpgHyper":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


class DdpgAgent:
    """Actor plus twin critics with slowly tracking target copies."""

    def __init__(
        self,
        actor: Mlp,
        q1: Mlp,
        q2: Mlp,
        objective: ObjectiveSpec,
        strike: float,
        expiry: float,
    ):
        self.actor = actor
        self.q1 = q1
        self.q2 = q2
        self.actor_target = actor.copy()
        self.q1_target = q1.copy()
        self.q2_target = q2.copy()
        self.objective = objective
        self.strike = strike
        self.expiry = expiry

    @classmethod
    def fresh(
        cls,
        hyper: DdpgHyper,
        objective: ObjectiveSpec,
        strike: float,
        expiry: float,
        rng: np.random.Generator,
    ) -> "DdpgAgent":
        actor = Mlp.init([3, *hyper.hidden, 1], "sigmoid", rng, last_layer_scale=1e-3)
        q1 = Mlp.init([4, *hyper.hidden, 1], "identity", rng)
        q2 = Mlp.init([4, *hyper.hidden, 1], "identity", rng)
        return cls(actor, q1, q2, objective, strike, expiry)

    def policy(self) -> RlPolicy:
        return RlPolicy(self.actor, self.strike, self.expiry)

    def act(self, state: HedgeState) -> float:
        s = normalize_state(state.holding_prev, state.price, state.tau, self.strike, self.expiry)
        return float(self.actor.forward(s)[0])

    def save(self, directory: str | Path, extra_meta: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_mlp(self.actor, directory / "actor.net")
        save_mlp(self.q1, directory / "q1.net")
        save_mlp(self.q2, directory / "q2.net")
        meta = {
            "kind": "ddpg",
            "objective_c": self.objective.c,
            "gamma": self.objective.gamma,
            "strike": self.strike,
            "expiry": self.expiry,
        }
        meta.update(extra_meta or {})
        save_sidecar(directory / "agent.json", meta)

    @classmethod
    def load(cls, directory: str | Path) -> "DdpgAgent":
        directory = Path(directory)
        meta = load_sidecar(directory / "agent.json")
        agent = cls(
            load_mlp(directory / "actor.net"),
            load_mlp(directory / "q1.net"),
            load_mlp(directory / "q2.net"),
            ObjectiveSpec(c=meta["objective_c"], gamma=meta["gamma"]),
            strike=meta["strike"],
            expiry=meta["expiry"],
        )
        return agent


def _actor_f_terms(agent: DdpgAgent, states: np.ndarray):
    """F(s, pi(s)) on the online nets plus the caches needed for its gradient."""
    a_pi, cache_a = agent.actor.forward_cached(states)
    x_pi = np.hstack([states, a_pi])
    v1, cache_1 = agent.q1.forward_cached(x_pi)
    v2, cache_2 = agent.q2.forward_cached(x_pi)
    v1 = v1[:, 0]
    v2 = v2[:, 0]
    var = v2 - v1**2
    active = var > 0.0
    sqrt_var = np.sqrt(np.where(active, var, 1.0))
    c = agent.objective.c
    f_vals = v1 + c * np.where(active, sqrt_var, 0.0)
    return f_vals, (cache_a, cache_1, cache_2, v1, active, sqrt_var)


def policy_gradient_step(
    agent: DdpgAgent, adam_actor: AdamState, states: np.ndarray
) -> np.ndarray:
    """One descent step of theta on mean_batch F(s, pi(s; theta)); the sqrt
    term's subgradient is zero wherever the variance clamp is active."""
    n = states.shape[0]
    if n == 0:
        raise ValidationError("policy gradient step needs a nonempty batch")
    c = agent.objective.c
    _, (cache_a, cache_1, cache_2, v1, active, sqrt_var) = _actor_f_terms(agent, states)
    df_dq1 = np.where(active, 1.0 - c * v1 / sqrt_var, 1.0) / n
    df_dq2 = np.where(active, c / (2.0 * sqrt_var), 0.0) / n
    _, dx1 = agent.q1.backward(cache_1, df_dq1[:, None], need_param_grad=False)
    _, dx2 = agent.q2.backward(cache_2, df_dq2[:, None], need_param_grad=False)
    da = dx1[:, -1:] + dx2[:, -1:]
    grad, _ = agent.actor.backward(cache_a, da)
    adam_step(adam_actor, agent.actor.params, grad)
    return grad


def _critic_step(net: Mlp, adam: AdamState, x: np.ndarray, y: np.ndarray, w: np.ndarray):
    pred, cache = net.forward_cached(x)
    err = pred[:, 0] - y
    upstream = (2.0 * w * err / len(y))[:, None]
    grad, _ = net.backward(cache, upstream)
    adam_step(adam, net.params, grad)
    return err


def _check_finite(episode: int, step: int, **arrays) -> None:
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise TrainingDiverged(
                f"non-finite {name} at episode {episode}, step {step}",
                snapshot={
                    "episode": episode,
                    "step": step,
                    "offender": name,
                    "stats": {
                        k: {
                            "nan": int(np.isnan(v).sum()),
                            "inf": int(np.isinf(v).sum()),
                            "max_abs_finite": float(
                                np.max(np.abs(v[np.isfinite(v)])) if np.any(np.isfinite(v)) else 0.0
                            ),
                        }
                        for k, v in arrays.items()
                    },
                },
            )


def _validation_set(env_config: EnvConfig, n_paths: int, seed: int):
    paths = simulate_batch(env_config.model, env_config.grid, n_paths, seed)
    prices, vols = stack_paths(paths)
    return prices, vols


def _probe_states(env_config: EnvConfig, prices: np.ndarray, strike: float, expiry: float):
    """Fixed, policy-independent state batch used to track F over training."""
    grid = env_config.grid
    n = grid.n_steps
    steps = sorted({0, n // 4, n // 2, (3 * n) // 4})
    holdings = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    rows = []
    for p in range(min(16, prices.shape[0])):
        for i in steps:
            for h in holdings:
                rows.append(
                    normalize_state(h, prices[p, i], expiry - i * grid.dt, strike, expiry)
                )
    return np.asarray(rows)


def ddpg_train(
    env_config: EnvConfig,
    objective: ObjectiveSpec,
    episodes: int,
    seed: int,
    hyper: DdpgHyper = DdpgHyper(),
    verbose: bool = False,
):
    """Train a twin-critic DDPG hedger; returns (agent, learning_curve).

    The learning curve holds one record per evaluation checkpoint with the
    deterministic policy's mean/sd/Y(0) cost statistics (per option unit, on a
    fixed validation path set) and the mean F value on a fixed state probe.
    """
    if episodes < 1:
        raise ValidationError(f"episodes must be >= 1, got {episodes}")
    env = HedgingEnv(env_config)
    strike = env_config.option.strike
    expiry = env_config.option.expiry
    gamma = objective.gamma

    init_rng = substream(seed, 0, lane=3)
    explore_rng = substream(seed, 0, lane=1)
    replay_rng = substream(seed, 0, lane=2)

    agent = DdpgAgent.fresh(hyper, objective, strike, expiry, init_rng)
    adam_actor = AdamState.for_params(agent.actor.params, hyper.actor_lr)
    adam_q1 = AdamState.for_params(agent.q1.params, hyper.critic_lr)
    adam_q2 = AdamState.for_params(agent.q2.params, hyper.critic_lr)
    buffer = ReplayBuffer(hyper.buffer_capacity, hyper.per_alpha, hyper.per_beta0)
    schedule = EpsilonSchedule(
        hyper.eps_start, hyper.eps_end, max(1, int(hyper.eps_decay_frac * episodes))
    )

    val_prices, val_vols = _validation_set(env_config, hyper.eval_paths, seed + 1_000_003)
    probe = _probe_states(env_config, val_prices, strike, expiry)

    n_steps = env_config.grid.n_steps
    total_steps = episodes * n_steps
    min_fill = max(hyper.warmup, hyper.batch_size)
    global_step = 0
    curve: list[dict] = []

    for ep in range(episodes):
        eps = schedule.value(ep)
        episode = env.reset(substream(seed, ep))
        st = episode.state
        s_norm = normalize_state(st.holding_prev, st.price, st.tau, strike, expiry)
        while not episode.terminal:
            if explore_rng.random() < eps:
                a = float(explore_rng.random())
            else:
                a = float(agent.actor.forward(s_norm)[0])
            out = episode.step(a)
            ns = out.next_state
            ns_norm = normalize_state(ns.holding_prev, ns.price, ns.tau, strike, expiry)
            buffer.push(Transition(s_norm, a, out.cost, ns_norm, out.terminal))
            s_norm = ns_norm
            global_step += 1
            buffer.beta = hyper.per_beta0 + (1.0 - hyper.per_beta0) * min(
                1.0, global_step / total_steps
            )
            if len(buffer) >= min_fill:
                _ddpg_train_step(agent, buffer, adam_actor, adam_q1, adam_q2,
                                 replay_rng, hyper, gamma, ep, global_step)

        if (ep + 1) % hyper.eval_every == 0 or ep == episodes - 1:
            record = _checkpoint_eval(agent, env_config, val_prices, val_vols, probe, ep)
            curve.append(record)
            if verbose:
                print(
                    f"episode {record['episode']:>7d}  eps {eps:5.3f}  "
                    f"mean {record['mean_cost']:8.4f}  sd {record['sd_cost']:8.4f}  "
                    f"y0 {record['y0']:8.4f}  F {record['mean_f']:8.4f}"
                )
    return agent, curve


def _ddpg_train_step(agent, buffer, adam_actor, adam_q1, adam_q2, rng, hyper,
                     gamma, ep, global_step):
    states, actions, costs, next_states, terminals, weights, idx = buffer.sample(
        hyper.batch_size, rng
    )
    a_next = agent.actor_target.forward(next_states)
    x_next = np.hstack([next_states, a_next])
    q1n = agent.q1_target.forward(x_next)[:, 0]
    q2n = agent.q2_target.forward(x_next)[:, 0]
    y1, y2 = critic_targets(costs, terminals, q1n, q2n, gamma)
    _check_finite(ep, global_step, y1=y1, y2=y2)

    x = np.hstack([states, actions[:, None]])
    e1 = _critic_step(agent.q1, adam_q1, x, y1, weights)
    e2 = _critic_step(agent.q2, adam_q2, x, y2, weights)
    _check_finite(ep, global_step, q1_error=e1, q2_error=e2)
    buffer.update_priorities(idx, np.abs(e1))

    policy_gradient_step(agent, adam_actor, states)

    soft_update(agent.actor_target.params, agent.actor.params, hyper.soft_tau)
    soft_update(agent.q1_target.params, agent.q1.params, hyper.soft_tau)
    soft_update(agent.q2_target.params, agent.q2.params, hyper.soft_tau)


def _checkpoint_eval(agent, env_config, val_prices, val_vols, probe, ep) -> dict:
    policy = agent.policy()
    totals, _ = batch_episode_costs(env_config, None, val_prices, val_vols, policy)
    mean = float(np.mean(totals))
    sd = float(np.std(totals, ddof=1))
    f_vals, _ = _actor_f_terms(agent, probe)
    return {
        "episode": ep + 1,
        "mean_cost": mean,
        "sd_cost": sd,
        "y0": mean + agent.objective.c * sd,
        "mean_f": float(np.mean(f_vals)),
    }


# ---------------------------------------------------------------------------
# Discrete-action twin-Q learning
# ---------------------------------------------------------------------------

def greedy_grid_action(f_values: np.ndarray, grid: np.ndarray, holding_prev) -> np.ndarray:
    """Argmin of F over the action grid; ties (within 1e-12) break toward the
    action nearest the current holding, i.e. fewest trades."""
    f_values = np.atleast_2d(f_values)
    h = np.atleast_1d(np.asarray(holding_prev, dtype=float))
    f_min = f_values.min(axis=1, keepdims=True)
    tie = f_values <= f_min + 1e-12
    dist = np.abs(grid[None, :] - h[:, None])
    dist = np.where(tie, dist, np.inf)
    return grid[np.argmin(dist, axis=1)]


class DiscreteQAgent:
    """Twin Q networks over (state, action) with an 11-point holding grid."""

    def __init__(
        self,
        q1: Mlp,
        q2: Mlp,
        objective: ObjectiveSpec,
        strike: float,
        expiry: float,
        action_grid: np.ndarray = ACTION_GRID,
    ):
        self.q1 = q1
        self.q2 = q2
        self.q1_target = q1.copy()
        self.q2_target = q2.copy()
        self.objective = objective
        self.strike = strike
        self.expiry = expiry
        self.action_grid = np.asarray(action_grid, dtype=float)

    @classmethod
    def fresh(cls, hyper: DdpgHyper, objective, strike, expiry, rng) -> "DiscreteQAgent":
        q1 = Mlp.init([4, *hyper.hidden, 1], "identity", rng)
        q2 = Mlp.init([4, *hyper.hidden, 1], "identity", rng)
        return cls(q1, q2, objective, strike, expiry)

    def _grid_f(self, states: np.ndarray, nets: tuple[Mlp, Mlp]) -> np.ndarray:
        """F(s, a) for every grid action; states (B,3) -> (B, n_actions)."""
        b = states.shape[0]
        k = len(self.action_grid)
        tiled = np.repeat(states, k, axis=0)
        acts = np.tile(self.action_grid, b)[:, None]
        x = np.hstack([tiled, acts])
        v1 = nets[0].forward(x)[:, 0].reshape(b, k)
        v2 = nets[1].forward(x)[:, 0].reshape(b, k)
        return f_objective(v1, v2, self.objective.c), v1, v2

    def act(self, state: HedgeState) -> float:
        s = normalize_state(state.holding_prev, state.price, state.tau, self.strike, self.expiry)
        f_vals, _, _ = self._grid_f(s.reshape(1, -1), (self.q1, self.q2))
        return float(greedy_grid_action(f_vals, self.action_grid, state.holding_prev)[0])

    def policy(self):
        agent = self

        class _GridPolicy:
            label = "rl_qlearn"

            def __call__(self, holding_prev, price, tau, vol=None):
                s = normalize_state(holding_prev, price, tau, agent.strike, agent.expiry)
                f_vals, _, _ = agent._grid_f(s.reshape(-1, 3), (agent.q1, agent.q2))
                out = greedy_grid_action(f_vals, agent.action_grid, holding_prev)
                return out.reshape(np.shape(price)) if np.ndim(price) else float(out[0])

        return _GridPolicy()

    def save(self, directory: str | Path, extra_meta: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_mlp(self.q1, directory / "q1.net")
        save_mlp(self.q2, directory / "q2.net")
        meta = {
            "kind": "qlearn",
            "objective_c": self.objective.c,
            "gamma": self.objective.gamma,
            "strike": self.strike,
            "expiry": self.expiry,
            "action_grid": self.action_grid.tolist(),
        }
        meta.update(extra_meta or {})
        save_sidecar(directory / "agent.json", meta)


def qlearn_train(
    env_config: EnvConfig,
    objective: ObjectiveSpec,
    episodes: int,
    seed: int,
    hyper: DdpgHyper = DdpgHyper(),
    action_grid: np.ndarray = ACTION_GRID,
):
    """Off-policy twin-Q learning on the discretized action grid. The greedy
    action minimizes F at the next state and feeds both critic targets."""
    env = HedgingEnv(env_config)
    strike = env_config.option.strike
    expiry = env_config.option.expiry
    gamma = objective.gamma

    init_rng = substream(seed, 0, lane=3)
    explore_rng = substream(seed, 0, lane=1)
    replay_rng = substream(seed, 0, lane=2)

    agent = DiscreteQAgent.fresh(hyper, objective, strike, expiry, init_rng)
    agent.action_grid = np.asarray(action_grid, dtype=float)
    adam_q1 = AdamState.for_params(agent.q1.params, hyper.critic_lr)
    adam_q2 = AdamState.for_params(agent.q2.params, hyper.critic_lr)
    buffer = ReplayBuffer(hyper.buffer_capacity, hyper.per_alpha, hyper.per_beta0)
    schedule = EpsilonSchedule(
        hyper.eps_start, hyper.eps_end, max(1, int(hyper.eps_decay_frac * episodes))
    )
    min_fill = max(hyper.warmup, hyper.batch_size)
    total_steps = episodes * env_config.grid.n_steps
    global_step = 0

    for ep in range(episodes):
        eps = schedule.value(ep)
        episode = env.reset(substream(seed, ep))
        st = episode.state
        while not episode.terminal:
            if explore_rng.random() < eps:
                a = float(agent.action_grid[explore_rng.integers(len(agent.action_grid))])
            else:
                a = agent.act(st)
            out = episode.step(a)
            s_norm = normalize_state(st.holding_prev, st.price, st.tau, strike, expiry)
            ns = out.next_state
            ns_norm = normalize_state(ns.holding_prev, ns.price, ns.tau, strike, expiry)
            buffer.push(Transition(s_norm, a, out.cost, ns_norm, out.terminal))
            st = ns
            global_step += 1
            buffer.beta = hyper.per_beta0 + (1.0 - hyper.per_beta0) * min(
                1.0, global_step / total_steps
            )
            if len(buffer) >= min_fill:
                _qlearn_train_step(agent, buffer, adam_q1, adam_q2, replay_rng,
                                   hyper, gamma, ep, global_step)
    return agent


def _qlearn_train_step(agent, buffer, adam_q1, adam_q2, rng, hyper, gamma, ep, global_step):
    states, actions, costs, next_states, terminals, weights, idx = buffer.sample(
        hyper.batch_size, rng
    )
    f_next, v1n, v2n = agent._grid_f(next_states, (agent.q1_target, agent.q2_target))
    holding_next = next_states[:, 2]
    a_star = greedy_grid_action(f_next, agent.action_grid, holding_next)
    col = np.searchsorted(agent.action_grid, a_star)
    rows = np.arange(len(a_star))
    q1n = v1n[rows, col]
    q2n = v2n[rows, col]
    y1, y2 = critic_targets(costs, terminals, q1n, q2n, gamma)
    _check_finite(ep, global_step, y1=y1, y2=y2)

    x = np.hstack([states, actions[:, None]])
    e1 = _critic_step(agent.q1, adam_q1, x, y1, weights)
    e2 = _critic_step(agent.q2, adam_q2, x, y2, weights)
    buffer.update_priorities(idx, np.abs(e1))

    soft_update(agent.q1_target.params, agent.q1.params, hyper.soft_tau)
    soft_update(agent.q2_target.params, agent.q2.params, hyper.soft_tau)


class TabularTwinQ:
    """Dict-backed twin Q-functions for enumerable state/action spaces."""

    def __init__(self, c: float, gamma: float = 1.0):
        self.c = c
        self.gamma = gamma
        self.q1: dict = {}
        self.q2: dict = {}

    def values(self, state, action) -> tuple[float, float]:
        key = (state, action)
        return self.q1.get(key, 0.0), self.q2.get(key, 0.0)

    def greedy(self, state, actions, holding_prev=None):
        """Action minimizing F; exact ties break toward `holding_prev`."""
        best = None
        for a in actions:
            q1, q2 = self.values(state, a)
            f = f_objective(q1, q2, self.c)
            tie_dist = abs(a - holding_prev) if holding_prev is not None else 0.0
            key = (f, tie_dist)
            if best is None or key < best[0]:
                best = (key, a)
        return best[1]

    def update(self, state, action, cost, boot_q1: float, boot_q2: float, alpha: float):
        """One twin update toward the bootstrapped targets:

            y1 = x + gamma*Q1'            y2 = x^2 + gamma^2*Q2' + 2*gamma*x*Q1'

        Pass boot_q1 = boot_q2 = 0 for terminal transitions."""
        g = self.gamma
        y1 = cost + g * boot_q1
        y2 = cost**2 + g**2 * boot_q2 + 2.0 * g * cost * boot_q1
        key = (state, action)
        q1, q2 = self.values(state, action)
        self.q1[key] = q1 + alpha * (y1 - q1)
        self.q2[key] = q2 + alpha * (y2 - q2)


# ---------------------------------------------------------------------------
# Learned-policy structure diagnostics
# ---------------------------------------------------------------------------

def policy_structure_check(
    holdings: np.ndarray,
    deltas: np.ndarray,
    actions: np.ndarray,
    n_bins: int = 20,
    min_count: int = 50,
) -> dict:
    """Bin states by (holding_prev - delta). A policy that trades toward delta
    but not all the way should under-hedge (mean action <= mean delta) where
    holding < delta and over-hedge where holding > delta. Returns per-bin
    stats and the fraction of populated bins satisfying the inequality."""
    x = np.asarray(holdings) - np.asarray(deltas)
    edges = np.linspace(-1.0, 1.0, n_bins + 1)
    bins = []
    ok = 0
    populated = 0
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (x >= lo) & (x < hi)
        count = int(mask.sum())
        if count < min_count:
            continue
        populated += 1
        mean_action = float(np.mean(actions[mask]))
        mean_delta = float(np.mean(deltas[mask]))
        center = 0.5 * (lo + hi)
        if center < 0:
            passed = mean_action <= mean_delta + 1e-9
        else:
            passed = mean_action >= mean_delta - 1e-9
        ok += passed
        bins.append(
            {
                "lo": float(lo),
                "hi": float(hi),
                "count": count,
                "mean_action": mean_action,
                "mean_delta": mean_delta,
                "passed": bool(passed),
            }
        )
    frac = ok / populated if populated else 0.0
    return {"fraction_ok": frac, "populated_bins": populated, "bins": bins}


def collect_policy_states(
    env_config: EnvConfig,
    policy,
    delta_policy,
    n_paths: int,
    seed: int,
):
    """Roll the policy over fresh paths and record (holding_prev, delta,
    action) at every decision point, for the structure check."""
    paths = simulate_batch(env_config.model, env_config.grid, n_paths, seed)
    prices, vols = stack_paths(paths)
    grid = env_config.grid
    n = grid.n_steps
    holdings, deltas, actions = [], [], []
    h_prev = np.zeros(prices.shape[0])
    for i in range(n):
        tau_i = env_config.option.expiry - i * grid.dt
        vol_i = None if vols is None else vols[:, i]
        a = np.clip(np.asarray(policy(h_prev, prices[:, i], tau_i, vol_i)), 0.0, 1.0)
        d = np.asarray(delta_policy(h_prev, prices[:, i], tau_i, vol_i))
        holdings.append(h_prev.copy())
        deltas.append(d)
        actions.append(a)
        h_prev = a
    return (
        np.concatenate(holdings),
        np.concatenate(deltas),
        np.concatenate(actions),
    )
