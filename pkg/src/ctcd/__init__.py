"""Knowledge distillation for CTC sequence models at desk scale."""

__version__ = "0.1.0"
