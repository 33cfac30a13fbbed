"""Paired-frame conditional diffusion for flexible-length volumetric sequences.

Everything runs on numpy: a small autodiff engine (``ndtensor``), a conditional
denoiser, DDPM/DDIM schedules, procedural phantom volumes for training data,
an overlapping-pair volume sampler, and segmentation/coherence metrics.
"""

__version__ = "0.1.0"
