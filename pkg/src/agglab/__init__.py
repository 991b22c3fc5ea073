"""Label-private bag aggregation: mechanisms, training, privacy audits and inequality checks."""

from agglab.aggregate import (BagPlan, CapacityError, LbaDataset, LlpDataset, naive_lba, naive_llp,
                              noisy_wtd_llp, sample_disjoint_bags, wtd_lba)
from agglab.audit import (BagConditional, PrivacyCurve, audit_noisy_llp, audit_wtd_lba,
                          bag_conditional, gaussian_deviation_bound, hockey_stick_gauss,
                          naive_lower_bound)
from agglab.core import Dataset, DatasetStats, compute_stats, load_csv, synth_dataset
from agglab.regress import (LinearModel, MlpModel, TrainConfig, fit_linear_lba, fit_mlp_llp,
                            grad_llp_loss, llp_loss, mse, nn_lipschitz_bound, nn_output_bound)

__version__ = "0.1.0"
