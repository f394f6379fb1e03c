"""Anomaly detection for monitored neural networks.

Pipeline: subsample the network's upscaled activation volume with a fixed
blue-noise key, learn a normalizing-flow density model of the sampled
features, and score latent codes with distance-based classification heads.
"""

__version__ = "0.1.0"
