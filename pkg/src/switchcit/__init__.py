"""Switch-routed continual instruction tuning on a tiny causal LM."""

__version__ = "0.1.0"
