"""Proactive image-manipulation localization with learnable templates."""
from .encryption import TemplateSet, encrypt, init_template_set
from .model import MaLP, PassiveLocalizer

__version__ = "0.1.0"
__all__ = ["MaLP", "PassiveLocalizer", "TemplateSet", "encrypt", "init_template_set"]
