"""From-scratch DDxNet: dense dilated causal 1-D convolutions for clinical time series."""

__version__ = "0.1.0"
