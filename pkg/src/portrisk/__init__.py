"""Cross-site readmission-risk model portability toolkit.

Builds 30-day readmission cohorts from normalized claims, trains local
risk models from scratch, applies them across synthetic sites, and
improves the remote transfer with soft-label fine-tuning.
"""

from .claims import (ClaimRecord, PatientDemographics, PatientHistory,
                     parse_claims_file, validate_history)
from .cohort import (CohortConfig, Episode, IndexEvent, apply_exclusions,
                     build_cohort, flag_unplanned, label_index_events,
                     merge_contiguous_claims)
from .features import (EncodedExample, FeatureSchema, LabeledDataset,
                       compute_cci, encode_example, fit_schema,
                       standardize_expert)
from .metrics import auprc, auroc, bootstrap_lift, ece, paired_t_test
from .neural import (Calibrator, ModelConfig, RiskModel, SoftTargets,
                     adam_step, forward, gradient_check, load_model,
                     loss_and_grad, save_model)
from .pipeline import (Hyperparams, SplitSpec, grid_search, platt_calibrate,
                       stratified_split, train_local)
from .synthgen import ShiftSpec, SiteProfile, generate_site, shift_profile
from .transfer import FineTuneParams, ban_transfer, predict_soft

__version__ = "0.1.0"
