"""Transaction-cost-aware hedging of a short European call: Monte Carlo market
simulation, analytic pricing, a hedging decision process, learned policies,
and delta-hedging baselines."""

from .agents import (
    ACTION_GRID,
    BartlettDeltaPolicy,
    BsDeltaPolicy,
    DdpgAgent,
    DdpgHyper,
    DiscreteQAgent,
    EpsilonSchedule,
    NoHedgePolicy,
    ObjectiveSpec,
    PractitionerDeltaPolicy,
    RlPolicy,
    TabularTwinQ,
    act,
    critic_targets,
    ddpg_train,
    f_objective,
    qlearn_train,
)
from .env import (
    EnvConfig,
    Episode,
    HedgeState,
    HedgingEnv,
    PricerChoice,
    StepOutcome,
    batch_episode_costs,
    payoff,
)
from .errors import EpisodeStateError, TrainingDiverged, ValidationError
from .evaluate import ComparisonRow, EvalReport, compare, evaluate_policy, policy_slice
from .market import (
    GbmSpec,
    MixtureSpec,
    PathGrid,
    PricePath,
    SabrSpec,
    sample_mixture,
    simulate_batch,
    simulate_gbm_path,
    simulate_sabr_path,
    substream,
)
from .pricing import (
    OptionSpec,
    RateSpec,
    bartlett_delta,
    bs_delta,
    bs_price,
    hagan_implied_vol,
    practitioner_delta,
    sabr_price,
    std_normal_cdf,
)

__version__ = "0.1.0"
