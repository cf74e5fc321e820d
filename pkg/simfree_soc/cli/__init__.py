from simfree_soc.cli.config import ExperimentConfig, build_policy, build_problem, dump_preset, load_config
from simfree_soc.cli.main import main
