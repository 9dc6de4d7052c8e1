"""Online test-time adaptation on feature streams.

Nearest-neighbor self-training with an ensemble of rank-one linear adapters,
a batch-norm fine-tuning variant on a toy extractor, and the frozen-head
baselines (prototype prediction, neighbor voting, entropy minimization,
confident pseudo-labeling).
"""

from .adapter import (
    AdapterGradients,
    EnsembleAdapter,
    apply_update,
    compute_prototypes,
    forward,
    forward_batch,
    loss_and_gradients,
    new_ensemble,
    proto_distribution,
)
from .bench import (
    DomainData,
    GaussianNoise,
    MeanShift,
    Rotation,
    RunRecord,
    SyntheticSpec,
    default_grid,
    generate,
    grid_search,
    run_online,
    split_train_val,
    train_source_bn,
    train_source_head,
)
from .engine import (
    TastConfig,
    TastEngine,
    adapt_batch,
    member_predict,
    plclf_step,
    pseudo_label,
    t3a_predict,
    tast_n_predict,
    tentclf_step,
)
from .fileio import FeaturePayload, read_features, write_features
from .mathcore import (
    AdamState,
    adam_step,
    cosine_distance,
    cross_entropy,
    kaiming_normal,
    shannon_entropy,
    softmax_from_distances,
)
from .supportset import (
    LinearHead,
    NeighborList,
    SupportEntry,
    SupportSet,
    brute_force_neighbors,
    filter_by_entropy,
    init_empty,
    init_from_classifier,
    nearest_neighbors,
    update,
)
from .tastbn import (
    TastBnConfig,
    TastBnEngine,
    ToyBNExtractor,
    adapt_batch_bn,
    bn_forward,
    new_toy_extractor,
)

__version__ = "0.1.0"
