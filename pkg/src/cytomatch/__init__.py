"""Statistical file matching for tables with block-wise missing variables:
mixture-model clustering under missing data plus cluster-restricted hot-deck
nearest-neighbor imputation, with KDE-based KL evaluation."""

from .data import (
    FILE1,
    FILE2,
    FilePattern,
    MaskedMatrix,
    SplitSpec,
    apply_pattern,
    load_table,
    split_for_matching,
    write_table,
)
from .em import MixtureModel, classify, e_step, fit, init_model, load_model, repair_positive_definite, save_model
from .errors import (
    ConditioningError,
    ConfigError,
    DegenerateDataError,
    EvaluationError,
    ImputationError,
    LoadError,
    MatchingError,
    NumericalError,
)
from .evaluate import (
    KdeModel,
    KlReport,
    count_modes_2d,
    empirical_kl,
    fit_kde,
    kde_log_density,
    sample_panel,
    sample_toy,
)
from .impute import MatchedOutput, cluster_nn_impute, nn_impute
from .panel import MarkerLevels, PanelConfig, PeakDetection, detect_levels, initial_means
from .ppca import ConditionalMoments, PpcaComponent, condition, marginal_covariance

__version__ = "0.1.0"
