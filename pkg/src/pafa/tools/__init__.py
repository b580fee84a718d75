"""pafa tools - one async handler per CLI subcommand."""

from .analysis import pafa_eval, pafa_export_embeddings, pafa_patient_analysis
from .data import pafa_features, pafa_prepare, pafa_synth
from .training import pafa_ablate, pafa_gradcheck, pafa_train

__all__ = [
    "pafa_synth",
    "pafa_prepare",
    "pafa_features",
    "pafa_gradcheck",
    "pafa_train",
    "pafa_eval",
    "pafa_ablate",
    "pafa_export_embeddings",
    "pafa_patient_analysis",
]
