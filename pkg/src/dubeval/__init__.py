"""dubeval: desk-scale dubbing-quality prediction lab.

Hierarchical multimodal score predictor trained with weak supervision from
proxy quality labels, whose metric weights are learned through a staged
active-learning loop, then fine-tuned on human ratings.
"""

from .data_model import (
    ClipRecord,
    EmbeddingBundle,
    Manifest,
    ObjectiveVector,
    RaterScore,
    SyntheticSpec,
    generate_synthetic,
    holdout_split,
    kfold_split,
    load_manifest,
    write_manifest,
)
from .errors import ConfigError, DataError, DubevalError, NumericError
from .fusion import FusionNetwork, NetworkConfig, finetune, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
