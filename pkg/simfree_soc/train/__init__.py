from simfree_soc.common.evaluation import l2_error
from simfree_soc.common.optim import AdamState, FlatAdam, adam_step
from simfree_soc.common.utils import cosine_lr
from simfree_soc.train.solver import METRICS_COLUMNS, SocSolver, TrainConfig, train_loop
