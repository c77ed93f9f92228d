"""Desk-scale workbench for self-supervised bone-radiograph modeling.

Subpackages cover the full stack: synthetic corpus generation, manifest and
split planning, masked-autoencoder pretraining, multi-task fine-tuning,
reconstruction-error abnormality maps, the region-guided five-head
classifier, shared metrics/statistics, and the CLI plus HTTP inference
service.
"""

__version__ = "0.1.0"
