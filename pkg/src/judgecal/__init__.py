"""Judge-score calibration and off-policy evaluation toolkit."""
from .calibration import CalibratorModel, InsufficientLabelsError, fit_autocal, predict_reward, refit_minus_oracle_fold
from .data import Dataset, FoldMap, IngestError, fold_hash, ingest_fresh_draws, ingest_logs, ingest_tf_cache
from .estimators import EstimateResult, estimate_direct, estimate_dr_cpo, estimate_ips, orthogonality_score
from .inference import OuaTrace, StackResult, confidence_interval, if_stack, oua_jackknife
from .isotonic import IsotonicFit, ecdf_midranks, iso_mean_one_project, pava_fit
from .planner import allocate_budget, allocate_budget_multi_policy, mde, spend_balance_check
from .weights import WeightSet, mean_one_weights, simcal_calibrate, stack_simplex_qp

__version__ = "0.1.0"
