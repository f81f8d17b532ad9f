"""Peak-memory planning and pooling-aligned distillation toolkit."""

__version__ = "0.1.0"
