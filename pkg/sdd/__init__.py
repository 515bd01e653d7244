"""
Small Damage Detection toolkit.

Multi-modal (acceleration + audio) anomaly detection for vehicle damage events:
sensor preprocessing, CWT spectrograms, autoencoder fusion variants,
reconstruction-error scoring and ROC-AUC evaluation.
"""

__version__ = "1.0.0"
