"""Multi-scale second-order pooling classifier with a blur-based training curriculum.

The package is organized as:

- ``tensor``: dense arrays with reverse-mode autodiff and the SGD optimizer
- ``blocks``: multi-scale block, second-order pooling block, classifier
- ``curriculum``: Gaussian-blur visual-acuity schedule and training regimes
- ``pipeline``: crop candidate regions, classify, aggregate to an image label
- ``data``: manifests, the synthetic shape/texture dataset, texture perturbations
- ``metrics``: classification and detection metrics, patient-grouped k-fold
- ``checkpoint``: binary model snapshots with exact save/load round trips
- ``cli``: the ``msop`` command (train / eval / predict / synth / ablate)
"""

from .blocks import (
    ClassifierConfig,
    MsopClassifier,
    classifier_forward,
    ms_block_forward,
    sop_attention_weights,
    sop_block_forward,
)
from .labels import BENIGN, LABELS, MALIGNANT, NORMAL
from .tensor import SGD, Tensor, set_default_dtype

__all__ = [
    "BENIGN",
    "ClassifierConfig",
    "LABELS",
    "MALIGNANT",
    "MsopClassifier",
    "NORMAL",
    "SGD",
    "Tensor",
    "classifier_forward",
    "ms_block_forward",
    "set_default_dtype",
    "sop_attention_weights",
    "sop_block_forward",
]
