"""Few-shot GAN adaptation with dynamic filter importance and irreversible pruning."""

__version__ = "0.1.0"
