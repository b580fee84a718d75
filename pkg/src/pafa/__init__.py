"""
pafa - patient-aware feature alignment for respiratory sound classification.

Patient cohesion-separation and global patient alignment losses with exact
gradients, a small pooled-MLP encoder, patient-grouped batching, ICBHI-style
ingestion and an evaluation / ablation harness.
"""

__version__ = "0.1.0"
