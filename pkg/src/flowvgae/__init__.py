"""Unsupervised anomaly detection on network flows with a heterogeneous
variational graph autoencoder.

Pipeline: flow CSVs -> cleaned feature vectors -> 180 s time windows ->
per-window IP/connection graphs -> VGAE training with contrastive
transforms -> per-connection anomaly scores and thresholding.
"""

__version__ = "0.1.0"
