"""Index date imputation for survival comparisons against external controls."""

from .balance import (BalanceReport, LogisticFit, MatchResult, att_weights,
                      fit_weighted_logistic, nn_match, smd, smd_table)
from .data import Cohort, SubjectRecord
from .errors import (BootstrapFailure, CohortFormatError, ConfigError, ConvergenceWarning,
                     DegenerateWeightError, EmptyGroupError, EmptyRiskSetError, IdiError,
                     InputError, NonIdentifiableError, SeparationError, StepError,
                     StudyFailure)
from .idi import (IdiConfig, IdiResult, NaiveResult, bootstrap_idi, compute_diagnostics,
                  impute_index_dates, naive_analysis, run_idi_once)
from .simbench import (McMetrics, McStudy, ScenarioParams, gen_population, power_curve,
                       run_mc_study, true_marginal_effect)
from .stepfn import StepFunction
from .survival import CoxFit, breslow_cumhaz, fit_cox, fit_km, predict_survival
from .truncation import (DiscreteDistribution, TruncationWeights, estimate_fr, qq_points,
                         truncated_fr, truncation_probability, zeta_weights)

__version__ = "0.1.0"
