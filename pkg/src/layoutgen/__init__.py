"""Layout-conditioned toy diffusion with box-gated, frequency-purified control."""

__version__ = "0.1.0"
