"""Structured prediction energy networks trained jointly with inference networks.

Submodules:

- ``autodiff``, ``optim``: float64 reverse-mode autodiff and optimizers
- ``nn``: MLPs, BLSTM encoders, embeddings and the tag language model cell
- ``energies``: multi-label, linear-chain, tag-LM and joint energies
- ``inference``: inference networks, gradient-descent inference, Viterbi, forward-backward
- ``training``: hinge losses, minimax training, retuning, CRF/local/distillation trainers
- ``data``, ``metrics``: readers, synthetic corpora and evaluation
- ``estimators``: scikit-learn style wrappers; ``cli``: command-line entry point
"""

from .estimators import (
    BLSTMTagger,
    CRFTagger,
    InferenceNetworkTagger,
    MLPMultiLabelClassifier,
    SPENMultiLabelClassifier,
    SPENTagger,
    TagLanguageModel,
    load_estimator,
    save_estimator,
)

__version__ = "0.1.0"

__all__ = [
    "BLSTMTagger",
    "CRFTagger",
    "InferenceNetworkTagger",
    "MLPMultiLabelClassifier",
    "SPENMultiLabelClassifier",
    "SPENTagger",
    "TagLanguageModel",
    "load_estimator",
    "save_estimator",
]
