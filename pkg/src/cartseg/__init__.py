"""Thin-sheet segmentation in 3D volumes: V-Net with SeLU, Tversky loss and
AMSGrad on a numpy autodiff core, tiled inference and largest-component
post-processing."""

__version__ = "0.1.0"
