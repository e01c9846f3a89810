"""lrplab: a small laboratory for relevance-map experiments on grid data.

Trains compact MLP, CNN, and echo-state-network classifiers on masked 2-D
samples and traces their predictions back to individual grid cells with
layer-wise relevance propagation, including the diagnostics needed to
tell genuine model focus from layout artifacts (squeezed relevance on
narrow valid passages, feeding-direction stripes, residual-relevance
decay of leaky reservoirs).
"""

__version__ = "0.1.0"

from .datagen import (
    ConfigError,
    GridDataset,
    GridSample,
    RegionSpec,
    SyntheticConfig,
    composite_mean,
    generate_synthetic,
    load_grid_csv,
    split_chronological,
)
from .preprocess import (
    ColumnStrategy,
    ConvStrategy,
    FlatStrategy,
    InputSequence,
    PermutationSpec,
    PieceStrategy,
    RelevanceMap,
    RowStrategy,
    flatten_valid,
    pad_for_conv,
    slice_columns,
    slice_pieces,
    slice_rows,
    strategy_from_params,
)
from .models import (
    ConvModel,
    EsnModel,
    MlpModel,
    conv_forward,
    count_parameters,
    esn_forward,
    load_model,
    mlp_forward,
    predict_class,
    save_model,
)
from .training import (
    Metrics,
    TrainConfig,
    evaluate,
    gradient_check,
    train_esn_readout,
    train_feedforward,
)
from .lrp import (
    NEGATIVE,
    POSITIVE,
    SignRule,
    analytic_residual,
    lrp_conv,
    lrp_dense,
    lrp_esn,
    lrp_feedforward,
    lrp_map,
    mean_relevance_map,
    residual_rate,
)
from .harness import (
    ExperimentSpec,
    RegionSet,
    RunManifest,
    gateway_statistic,
    region_ratios,
    run_experiment,
    run_from_manifest,
    stripe_statistic,
)
