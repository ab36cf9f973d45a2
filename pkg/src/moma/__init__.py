"""Self-supervised distillation from MoCo and MAE teachers into a compact ViT."""

__version__ = "0.1.0"
