"""Contrastive training toolkit for paraphrase-robust multimodal classification.

Trains a small fused-modality classifier with a scaled supervised contrastive
loss that emphasizes paraphrase pairs, using curated batches of typed
negatives, and measures answer consistency across paraphrase groups with a
subset-consensus metric. All gradients are hand-derived and checked against
central finite differences.
"""

__version__ = "0.1.0"
