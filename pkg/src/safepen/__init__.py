"""Safe model-based policy search with GP dynamics models.

Learn Gaussian-process dynamics from episodic data, propagate state
uncertainty analytically over a horizon, score policies by expected return
and predicted constraint-violation risk with exact gradients, and train with
a pre-deployment safety gate that adapts the risk weight.
"""

from .envs import (
    EpisodeRecord,
    LTIEnvConfig,
    aggregate_metrics,
    collision_reward,
    collision_safe_set,
    lti_step,
    make_collision_env,
    run_episode,
)
from .errors import (
    ConfigError,
    DegenerateLengthScaleError,
    IllConditionedError,
    PropagationError,
    SafepenError,
)
from .gp import (
    GPDataset,
    KernelHyperparams,
    TrainedGP,
    build_trained_gp,
    fit_hyperparams,
    kernel_eval,
    log_marginal_likelihood_and_grad,
    predict_deterministic,
)
from .loop import (
    SafePenConfig,
    Strategy,
    TrainingState,
    improve_policy,
    safepen_run,
    safety_gate,
)
from .moments import (
    GaussianBelief,
    JointBelief,
    MMPrediction,
    mm_cov,
    mm_input_output_cov,
    mm_mean,
    mm_predict,
    propagate_step,
)
from .objectives import (
    Box,
    ExpPenalty,
    ObjectiveConfig,
    RewardConfig,
    SafeSetSpec,
    SurrogateKind,
    episode_safety_prob,
    expected_exp_reward,
    rollout_objective,
    rollout_objective_and_gradient,
    step_safety_prob,
    surrogate_loss,
)
from .policies import (
    LinearPolicy,
    PolicyLayout,
    PolicyParams,
    RBFPolicy,
    build_policy,
    flatten_policy,
    policy_pushforward,
    pushforward_param_gradients,
)

__version__ = "0.1.0"

__all__ = [
    "Box",
    "ConfigError",
    "DegenerateLengthScaleError",
    "EpisodeRecord",
    "ExpPenalty",
    "GPDataset",
    "GaussianBelief",
    "IllConditionedError",
    "JointBelief",
    "KernelHyperparams",
    "LTIEnvConfig",
    "LinearPolicy",
    "MMPrediction",
    "ObjectiveConfig",
    "PolicyLayout",
    "PolicyParams",
    "PropagationError",
    "RBFPolicy",
    "RewardConfig",
    "SafePenConfig",
    "SafeSetSpec",
    "SafepenError",
    "Strategy",
    "SurrogateKind",
    "TrainedGP",
    "TrainingState",
    "aggregate_metrics",
    "build_policy",
    "build_trained_gp",
    "collision_reward",
    "collision_safe_set",
    "episode_safety_prob",
    "expected_exp_reward",
    "fit_hyperparams",
    "flatten_policy",
    "improve_policy",
    "kernel_eval",
    "log_marginal_likelihood_and_grad",
    "lti_step",
    "make_collision_env",
    "mm_cov",
    "mm_input_output_cov",
    "mm_mean",
    "mm_predict",
    "policy_pushforward",
    "predict_deterministic",
    "propagate_step",
    "pushforward_param_gradients",
    "rollout_objective",
    "rollout_objective_and_gradient",
    "run_episode",
    "safepen_run",
    "safety_gate",
    "step_safety_prob",
    "surrogate_loss",
]
