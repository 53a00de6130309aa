"""lanediff: a desk-scale diffusion-policy driving lab.

A denoising trajectory planner over discrete lateral-offset bins, trained
with clipped importance-sampling policy gradients against a world model
(exact simulator-backed oracle or a learned single-pass predictor) of a
2D highway environment. Everything runs on a small numpy-based
reverse-mode autodiff engine; no GPU, no external ML framework.
"""

__version__ = "0.1.0"
