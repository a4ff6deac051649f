"""Random chip inspection, weight-snapshot logging and training-transcript
verification for compute-governance simulations."""

__version__ = "0.1.0"
