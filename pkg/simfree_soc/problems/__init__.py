from simfree_soc.problems.base import InitialLaw, SocProblem
from simfree_soc.problems.follmer import (
    finetune_problem,
    finetune_toy_problem,
    follmer_problem,
    gaussian_potential,
    gaussian_potential_grad,
    shifted_gaussian_potential,
)
from simfree_soc.problems.funnel import (
    FunnelTarget,
    funnel_log_density,
    funnel_potential,
    funnel_potential_grad,
    funnel_sample,
    funnel_score,
    funnel_score_vjp,
)
from simfree_soc.problems.linear import (
    LinearOuSpec,
    LqrSpec,
    RiccatiSolution,
    linear_ou_optimal_control,
    linear_ou_problem,
    linear_ou_spec,
    lqr_easy_spec,
    lqr_hard_spec,
    lqr_optimal_control,
    lqr_problem,
    solve_riccati,
)
