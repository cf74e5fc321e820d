from simfree_soc.sampling.stats import (
    WeightedSampleSet,
    ess,
    importance_estimate,
    load_samples,
    log_z_estimate,
    reweighted_expectation,
    save_samples,
    save_summary,
    summarize,
)
from simfree_soc.sampling.weights import finetune_weights, follmer_log_prefactor, follmer_sample, weighted_samples
