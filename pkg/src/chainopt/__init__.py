"""Optimization of parameterized Markov chains with shared chain/cost parameters."""

from .errors import (
    CapabilityError,
    ChainOptError,
    ConfigError,
    DivergenceUndefinedError,
    ErgodicityError,
    InvalidStructureError,
    ProbeError,
    ReachabilityError,
    RegularizationRequiredError,
    SpectralError,
    StalenessError,
)
from .model import (
    Average,
    ChainModel,
    CostModel,
    EpisodicDiscounted,
    FirstExit,
    FixedTabularChain,
    GaussianInitial,
    GaussianLinearChain,
    KlToFixedChainCost,
    Problem,
    QuadraticCost,
    SoftmaxChain,
    StateQuadraticCost,
    TableCost,
    TabularInitial,
    TimeVarying,
    TimeVaryingChain,
    TimeVaryingCost,
    WeightedSumCost,
    cost_kl_to_fixed,
    cost_policy_entropy,
    cost_sum,
    make_softmax_chain,
)
from .exact import (
    AverageCost,
    ValueTable,
    discounted_occupancy,
    exact_gradient,
    exact_gradient_bottleneck,
    fd_gradient,
    fd_gradient_oracle,
    fd_hessian,
    fd_hessian_oracle,
    objective,
    solve_value_average,
    solve_value_episodic,
    solve_value_timevarying,
    stationary_density,
)
from .mdp import (
    LmdpSpec,
    PolicyAveragedChain,
    SoftmaxPolicy,
    TabularMdp,
    chain_as_action_mdp,
    deterministic_bottleneck_gradient,
    lmdp_deterministic_pair,
    lmdp_policy_gradient,
    map_entropy_mdp,
    map_general_mdp,
    map_lmdp,
    map_proximal_mdp,
    map_stochastic_mdp,
    mdp_policy_evaluation,
    stochastic_policy_gradient,
    stochastic_to_deterministic,
)
from .rollout import (
    FeatureMap,
    GradientEstimate,
    Rollout,
    RolloutBatch,
    ValueApprox,
    batch_from_jsonl,
    estimate_gradient,
    fit_value_approx,
    generate_rollouts,
    path_gradient,
    path_hessian,
)
from .surrogate import (
    ChainIterationReport,
    ClippedSurrogate,
    ExactSurrogate,
    FisherMatrix,
    SampledSurrogate,
    chain_iteration_step,
    clipped_surrogate,
    fisher_matrix,
    natural_gradient,
    surrogate_exact,
    surrogate_hessian,
    surrogate_sampled,
)
from .zlearn import (
    LinearFeatureZ,
    TabularZ,
    ZWeightedChain,
    compatible_natural_gradient_check,
    induced_chain,
    lmdp_objective,
    lmdp_problem,
    solve_z_average,
    solve_z_firstexit,
    z_bellman_residual,
    z_from_text,
    z_problem,
    z_to_text,
    zlearn_baseline,
    zlearn_greedy,
)
from .problems import (
    canonical_two_state,
    gaussian_linear_problem,
    gridworld_lmdp,
    random_mdp,
    random_smdp_problem,
    random_softmax_problem,
    random_timevarying_problem,
)
from .harness import (
    AlgorithmConfig,
    ExperimentConfig,
    OutputConfig,
    ProblemConfig,
    build_problem,
    parse_config,
    run_equivcheck,
    run_gradcheck,
    run_optimize,
    run_zlearn,
    serialize_config,
)

__version__ = "0.1.0"
