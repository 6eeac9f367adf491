"""Desk-scale domain-adaptive stereo matching.

Submodules:
  autodiff  rank-4 tensors with reverse-mode gradients and Adam
  color     progressive LAB color transfer between domains
  costvol   feature normalization and matching-cost volumes
  losses    warping, SSIM, occlusion handling, training losses
  model     small disparity/occlusion networks and checkpoints
  synth     two-domain synthetic stereo scene generator
  metrics   D1 / end-point-error evaluation
  train     the adaptation training loop with ablation switches
  fileio    PFM, 16-bit disparity PNG, PPM/PNG images
  cli       command line front end
"""

from . import autodiff, cli, color, costvol, fileio, losses, metrics, model, synth, train

__all__ = [
    "autodiff",
    "cli",
    "color",
    "costvol",
    "fileio",
    "losses",
    "metrics",
    "model",
    "synth",
    "train",
]

__version__ = "0.1.0"
