"""dgnet-lab: variational oil-spill segmentation toolkit.

Self-contained: its own tensor/autodiff engine, an exponential backscatter
model with a synthetic SAR scene generator, an ELBO trainer, a full binary
segmentation metric suite, and PGM-based dataset tooling.
"""

__version__ = "0.1.0"
