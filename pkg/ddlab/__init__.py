"""
ddlab: Diffusion Distillation Lab

Desk-scale laboratory for training, distilling and analysing denoising
diffusion models on 2-D toy distributions.
"""

__version__ = "0.1.0"
