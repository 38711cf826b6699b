"""Self-supervised representation learning for red-blood-cell imagery.

Numpy-only implementation of a student-teacher self-distillation recipe
(Sinkhorn-balanced teacher targets, global crops only, optional spread
regularizer) with a small ViT encoder, a synthetic smear corpus, and a full
downstream evaluation harness (linear probe, k-NN, leave-one-source-out,
k-fold, PCA feature maps).
"""

__version__ = "0.1.0"
