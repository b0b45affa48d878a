"""labsplat: colorization of monochromatic multi-view scenes through a
differentiable Lab-color-space Gaussian splatting pipeline."""

__version__ = "0.1.0"
