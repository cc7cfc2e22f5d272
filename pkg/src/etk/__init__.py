"""Zero-shot editing of signals through diffusion-model noise spaces, over analytic Gaussian-mixture denoisers."""

__version__ = "0.1.0"
