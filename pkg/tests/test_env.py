import math

import numpy as np
import pytest

from hedgelab import (
    EnvConfig,
    EpisodeStateError,
    GbmSpec,
    HedgingEnv,
    MixtureSpec,
    OptionSpec,
    PathGrid,
    PricerChoice,
    RateSpec,
    SabrSpec,
    ValidationError,
    batch_episode_costs,
    bs_price,
    payoff,
    simulate_batch,
    substream,
)
from hedgelab.market import stack_paths

ONE_MONTH = 21 / 252


def make_config(model, n_steps=21, expiry=ONE_MONTH, kappa=0.01, formulation="accounting",
                pricer=PricerChoice(), gamma=1.0, strike=100.0):
    return EnvConfig(
        option=OptionSpec(strike=strike, expiry=expiry),
        model=model,
        grid=PathGrid(expiry, n_steps),
        kappa=kappa,
        formulation=formulation,
        pricer=pricer,
        gamma=gamma,
    )


def run_episode(env, seed, actions):
    episode = env.reset(substream(seed, 0))
    for a in actions:
        episode.step(a)
    return episode


class TestReset:
    def test_starts_unhedged_at_s0(self, gbm):
        env = HedgingEnv(make_config(gbm))
        for k in range(1000):
            state = env.reset(substream(5, k)).state
            assert state.holding_prev == 0.0
            assert state.price == 100.0
            assert state.tau == ONE_MONTH

    def test_same_seed_same_path(self, gbm):
        env = HedgingEnv(make_config(gbm))
        a = env.reset(substream(3, 7))
        b = env.reset(substream(3, 7))
        assert np.array_equal(a.path.prices, b.path.prices)

    def test_invalid_config_rejected(self, gbm):
        with pytest.raises(ValidationError, match="kappa"):
            make_config(gbm, kappa=-0.01)
        with pytest.raises(ValidationError, match="gamma"):
            make_config(gbm, gamma=0.0)
        with pytest.raises(ValidationError, match="formulation"):
            make_config(gbm, formulation="acct")


class TestAccountingStep:
    def test_flat_position_flat_value_zero_cost(self, gbm):
        env = HedgingEnv(make_config(gbm, kappa=0.0))
        episode = env.reset(substream(1, 0))
        # Freeze the marks so only the stated terms matter.
        episode.values[:] = 9.0
        out = episode.step(0.0)
        assert out.cost == 0.0

    def test_interior_reward_decomposition(self, gbm):
        # Holding 0.58 over a 100 -> 101 move with the short-option mark going
        # -9.0 -> -9.5, then trading to 0.60 at 101 with kappa = 1%: a combined
        # reward of 0.0598 split into its P&L part (+0.08, booked on the
        # holding period) and the trade's cost (0.0202, booked at execution).
        env = HedgingEnv(make_config(gbm, n_steps=4, kappa=0.01))
        episode = env.reset(substream(2, 0))
        episode.path.prices[:5] = [100.0, 100.0, 101.0, 101.0, 101.0]
        episode.values[:4] = [9.0, 9.0, 9.5, 9.5]
        episode.step(0.58)
        pnl_step = episode.step(0.58)  # no trade: pure P&L over 100 -> 101
        assert abs(pnl_step.cost - (-0.08)) < 1e-12
        move_step = episode.step(0.60)  # trade 0.58 -> 0.60 at 101, flat marks
        assert abs(move_step.cost - 0.01 * 101.0 * 0.02) < 1e-12
        assert abs((pnl_step.cost + move_step.cost) - (-0.0598)) < 1e-12

    def test_setup_cost_charged_on_first_action(self, gbm):
        env = HedgingEnv(make_config(gbm, kappa=0.01))
        episode = env.reset(substream(4, 0))
        episode.values[:] = 2.3  # freeze marks
        episode.path.prices[:2] = [100.0, 100.0]
        out = episode.step(0.5)
        assert abs(out.cost - 0.01 * 100.0 * 0.5) < 1e-12

    def test_static_forward_replication_has_zero_cost(self):
        # A deep in-the-money strike makes the call a forward; holding one
        # share with no trading costs telescopes every per-step cost to zero.
        gbm = GbmSpec(100.0, 0.05, 0.2)
        cfg = make_config(gbm, n_steps=8, kappa=0.0, strike=1e-9)
        env = HedgingEnv(cfg)
        episode = env.reset(substream(6, 0))
        costs = [episode.step(1.0).cost for _ in range(8)]
        assert max(abs(c) for c in costs) < 1e-6

    def test_liquidation_charged_at_expiry(self, gbm):
        env = HedgingEnv(make_config(gbm, n_steps=1, kappa=0.01))
        episode = env.reset(substream(8, 0))
        s0, s1 = episode.path.prices
        v0 = episode.values[0]
        out = episode.step(1.0)
        expected = (
            0.01 * s0 * 1.0                     # set up the hedge
            - (-payoff(s1, env.config.option) + v0 + (s1 - s0))
            + 0.01 * s1 * 1.0                   # liquidate at expiry
        )
        assert abs(out.cost - expected) < 1e-12
        assert out.terminal


class TestCashflowStep:
    def test_no_trade_no_cost(self, gbm):
        env = HedgingEnv(make_config(gbm, formulation="cashflow"))
        episode = env.reset(substream(1, 0))
        episode.step(0.0)
        out = episode.step(0.0)
        assert out.cost == 0.0

    def test_sell_down_books_cash_in(self, gbm):
        env = HedgingEnv(make_config(gbm, formulation="cashflow", kappa=0.01))
        episode = env.reset(substream(2, 0))
        episode.path.prices[:2] = [100.0, 101.0]
        episode.step(0.60)
        episode.path.prices[1] = 101.0
        out = episode.step(0.58)
        # cash in: 101 * 0.02 minus the 1% trading cost on the same value
        assert abs(out.cost - (-(101.0 * 0.02) + 0.01 * 101.0 * 0.02)) < 1e-12
        assert abs(out.cost - (-1.9998)) < 1e-12

    def test_never_hedge_total_is_payoff(self, gbm):
        env = HedgingEnv(make_config(gbm, formulation="cashflow", kappa=0.01))
        episode = env.reset(substream(3, 1))
        while not episode.terminal:
            episode.step(0.0)
        expected = float(payoff(episode.path.prices[-1], env.config.option))
        assert abs(episode.total_cost() - expected) < 1e-12


class TestEpisodeLifecycle:
    def test_total_before_terminal_raises(self, gbm):
        env = HedgingEnv(make_config(gbm))
        episode = env.reset(substream(1, 0))
        with pytest.raises(EpisodeStateError):
            episode.total_cost()

    def test_step_after_terminal_raises(self, gbm):
        env = HedgingEnv(make_config(gbm, n_steps=1))
        episode = env.reset(substream(1, 0))
        episode.step(0.5)
        with pytest.raises(EpisodeStateError):
            episode.step(0.5)

    def test_out_of_range_actions_clamped_and_counted(self, gbm):
        env = HedgingEnv(make_config(gbm, n_steps=3))
        episode = env.reset(substream(1, 0))
        episode.step(1.7)
        assert episode.state.holding_prev == 1.0
        episode.step(-0.3)
        assert episode.state.holding_prev == 0.0
        assert episode.clamp_count == 2

    def test_trace_columns(self, gbm, tmp_path):
        env = HedgingEnv(make_config(gbm, n_steps=2))
        episode = env.reset(substream(1, 0))
        episode.step(0.5)
        episode.step(0.6)
        target = tmp_path / "trace.csv"
        with open(target, "w") as fh:
            episode.write_trace(fh)
        lines = target.read_text().splitlines()
        assert lines[0] == "step,price,vol,holding,cost,option_value"
        assert len(lines) == 3


class TestPayoff:
    @pytest.mark.parametrize("price,expected", [(120.0, 20.0), (80.0, 0.0), (100.0, 0.0)])
    def test_point_values(self, price, expected):
        assert payoff(price, OptionSpec(strike=100.0, expiry=1.0)) == expected


def total_costs(model, formulation, pricer, seed, n_episodes=200, gamma=1.0):
    cfg = make_config(model, n_steps=10, kappa=0.01, formulation=formulation,
                      pricer=pricer, gamma=gamma)
    env = HedgingEnv(cfg)
    action_rng = np.random.default_rng(999)
    totals, premiums = [], []
    for k in range(n_episodes):
        episode = env.reset(substream(seed, k))
        actions = action_rng.random(10)
        for a in actions:
            episode.step(a)
        totals.append(episode.total_cost())
        premiums.append(episode.premium)
    return np.array(totals), np.array(premiums)


class TestFormulationEquivalence:
    @pytest.mark.parametrize("pricer", [PricerChoice(), PricerChoice("constant_vol_bs", 0.25)])
    def test_gbm_difference_is_premium(self, gbm, pricer):
        acct, premiums = total_costs(gbm, "accounting", pricer, seed=42)
        cash, _ = total_costs(gbm, "cashflow", pricer, seed=42)
        np.testing.assert_allclose(cash - acct, premiums, rtol=1e-9)

    @pytest.mark.parametrize("pricer", [PricerChoice(), PricerChoice("constant_vol_bs", 0.2)])
    def test_sabr_difference_is_premium(self, sabr, pricer):
        acct, premiums = total_costs(sabr, "accounting", pricer, seed=43)
        cash, _ = total_costs(sabr, "cashflow", pricer, seed=43)
        np.testing.assert_allclose(cash - acct, premiums, rtol=1e-9)

    def test_pricer_choice_shifts_totals_by_constant(self, sabr):
        # Totals under two marking models differ per path by exactly the
        # difference in time-zero marks.
        matched, prem_a = total_costs(sabr, "accounting", PricerChoice(), seed=44)
        const, prem_b = total_costs(sabr, "accounting", PricerChoice("constant_vol_bs", 0.3), seed=44)
        diff = matched - const
        np.testing.assert_allclose(diff, prem_b - prem_a, rtol=1e-9)

    def test_costs_linear_in_kappa(self, gbm):
        totals = {}
        for kappa in (0.0, 0.01, 0.02):
            cfg = make_config(gbm, n_steps=10, kappa=kappa)
            env = HedgingEnv(cfg)
            action_rng = np.random.default_rng(5)
            episode = env.reset(substream(77, 0))
            for a in action_rng.random(10):
                episode.step(a)
            totals[kappa] = episode.total_cost()
        np.testing.assert_allclose(
            totals[0.02] - totals[0.0], 2 * (totals[0.01] - totals[0.0]), rtol=1e-12
        )

    def test_never_hedge_accounting_total_is_payoff_minus_premium(self, gbm):
        cfg = make_config(gbm, kappa=0.0)
        env = HedgingEnv(cfg)
        episode = env.reset(substream(11, 0))
        while not episode.terminal:
            episode.step(0.0)
        expected = float(payoff(episode.path.prices[-1], cfg.option)) - episode.premium
        assert abs(episode.total_cost() - expected) < 1e-12


class TestDiscounting:
    def test_gamma_discounts_each_cash_flow_once_per_period(self, gbm):
        gamma = 0.95
        cfg = make_config(gbm, n_steps=3, kappa=0.01, formulation="cashflow", gamma=gamma)
        env = HedgingEnv(cfg)
        episode = env.reset(substream(21, 0))
        prices = episode.path.prices
        actions = [0.4, 0.7, 0.2]
        for a in actions:
            episode.step(a)
        # Reconstruct undiscounted cash flows per action.
        h = [0.0, 0.4, 0.7, 0.2]
        cash = []
        for i, a in enumerate(actions):
            amt = prices[i] * (h[i + 1] - h[i]) + 0.01 * prices[i] * abs(h[i + 1] - h[i])
            if i == 2:
                amt += -prices[3] * a + 0.01 * prices[3] * a
                amt += float(payoff(prices[3], cfg.option))
            cash.append(amt)
        expected = sum(gamma ** (i + 1) * c for i, c in enumerate(cash))
        assert abs(episode.total_cost() - expected) < 1e-12


class TestDeltaHedgeUnbiasedness:
    def test_zero_cost_mean_under_driftless_measure(self):
        # With kappa = 0, mu = r = 0 and exact lognormal steps, the expected
        # accounting total of a delta hedger is exactly zero.
        from hedgelab import BsDeltaPolicy

        gbm = GbmSpec(100.0, 0.0, 0.2)
        cfg = make_config(gbm, n_steps=21, kappa=0.0)
        policy = BsDeltaPolicy(cfg.option, RateSpec(), 0.2)
        paths = simulate_batch(gbm, cfg.grid, 100_000, seed=314)
        prices, vols = stack_paths(paths)
        totals, _ = batch_episode_costs(cfg, None, prices, vols, policy)
        se = totals.std(ddof=1) / math.sqrt(len(totals))
        assert abs(totals.mean()) < 4 * se


class TestBatchConsistency:
    @pytest.mark.parametrize("formulation", ["accounting", "cashflow"])
    def test_vectorized_equals_stepped_gbm(self, gbm, formulation):
        cfg = make_config(gbm, n_steps=7, kappa=0.01, formulation=formulation)
        self._check(cfg, seed=61)

    @pytest.mark.parametrize("pricer", [PricerChoice(), PricerChoice("constant_vol_bs", 0.2)])
    def test_vectorized_equals_stepped_sabr(self, sabr, pricer):
        cfg = make_config(sabr, n_steps=7, kappa=0.01, pricer=pricer)
        self._check(cfg, seed=62)

    @staticmethod
    def _check(cfg, seed, n=40):
        action_rng = np.random.default_rng(1234)
        actions = action_rng.random((n, cfg.grid.n_steps))

        class ScriptedPolicy:
            step = 0

            def __call__(self, holding_prev, price, tau, vol=None):
                out = actions[:, self.step]
                self.step += 1
                return out

        paths = simulate_batch(cfg.model, cfg.grid, n, seed)
        prices, vols = stack_paths(paths)
        totals, premium = batch_episode_costs(cfg, None, prices, vols, ScriptedPolicy())

        env = HedgingEnv(cfg)
        for k in range(n):
            episode = env.reset(substream(seed, k))
            for a in actions[k]:
                episode.step(a)
            assert abs(episode.total_cost() - totals[k]) < 1e-12
            assert abs(episode.premium - premium) < 1e-12

    def test_mixture_requires_component(self, gbm, sabr):
        mix = MixtureSpec(components=((0.5, gbm), (0.5, sabr)))
        cfg = make_config(mix, n_steps=4)
        with pytest.raises(ValidationError, match="component"):
            batch_episode_costs(cfg, None, np.full((2, 5), 100.0), None, lambda *a: 0.0)


class TestMixtureEpisodes:
    def test_component_sampled_once_per_episode(self, gbm, sabr):
        mix = MixtureSpec(components=((0.5, gbm), (0.5, sabr)))
        cfg = make_config(mix, n_steps=4)
        env = HedgingEnv(cfg)
        kinds = {type(env.reset(substream(9, k)).component).__name__ for k in range(200)}
        assert kinds == {"GbmSpec", "SabrSpec"}

    def test_matched_pricer_follows_component(self, gbm, sabr):
        mix = MixtureSpec(components=((0.5, gbm), (0.5, sabr)))
        cfg = make_config(mix, n_steps=4)
        env = HedgingEnv(cfg)
        for k in range(20):
            episode = env.reset(substream(10, k))
            expected = bs_price(
                100.0, cfg.option, RateSpec(), 0.2, cfg.option.expiry
            )
            if isinstance(episode.component, GbmSpec):
                assert abs(episode.premium - expected) < 1e-12
            else:
                assert episode.premium != pytest.approx(expected, abs=1e-9)
