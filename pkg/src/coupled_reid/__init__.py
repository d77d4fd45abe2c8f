"""Domain-adaptive embedding learning: adversarial alignment plus global-local contrastive training."""

__version__ = "0.1.0"
