"""tumorsynth: synthetic multimodal brain-tumor MRI generation.

Pipeline stages: multispecies tumor growth on atlas brains, healthy
label enrichment via diffeomorphic atlas registration, per-tissue MR
intensity synthesis, quantile-matching domain adaptation, and the Dice
and imbalance metrics needed to evaluate the result.
"""

__version__ = "0.1.0"
