from simfree_soc.estimators.base import ESTIMATORS, objective_estimate, objective_statistics, walker_costs
from simfree_soc.estimators.offpolicy import GirsanovWeight, OffPolicyObjective, offpolicy_objective
from simfree_soc.estimators.simfree import simfree_gradient
from simfree_soc.estimators.vanilla import vanilla_gradient
