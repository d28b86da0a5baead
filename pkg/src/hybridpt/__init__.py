"""Point-cloud backbone with sparse convolution early and rotary-position attention late."""

__version__ = "0.1.0"
