"""Mean-field variational multimodal fusion with a data-driven uncertainty prior."""

__version__ = "0.1.0"
