"""Deep forests (cascades of random forests) with feature contributions and MDI.

Numerically heavy kernels are compiled with numba; set
``CASCADE_EXPLAIN_DISABLE_NUMBA=1`` to run the pure-numpy versions.
"""

from .attribution import (CalibrationMethod, ContributionReport, ImportanceReport,
                          build_attribution, calibrate, cascade_contributions, cascade_mdi,
                          estimate_node_delta, last_layer_total_mdi, local_mdi, mda,
                          tree_deep_contributions)
from .cascade import (CascadeConfig, CascadeModel, LayerSchema, augment_features,
                      fit_cascade, paper_bench_config, paper_small_config, predict_cascade)
from .dataset import (Dataset, SplitSpec, gen_linear, gen_sim, gen_sincos, gen_threeclass,
                      load_csv, permute_augment, split, subsample)
from .errors import CascadeError, DataError, InvariantViolation, ModelFormatError
from .evalbench import BenchmarkSpec, ranked_pair_score, relevant_feature_auc, run_benchmark
from .forest import (Forest, ForestParams, fit_forest, forest_contributions, forest_mdi,
                     forest_mdi_oob, predict_forest)
from .model_io import load_model, save_model
from .tree import (Tree, TreeParams, fit_tree, predict_tree, tree_contributions,
                   tree_mdi_classic, tree_mdi_cov)

__version__ = "0.1.0"
