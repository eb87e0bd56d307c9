"""End-to-end transformer spoken-language understanding (domain, intent, slots)."""

from .estimator import LogMelFeaturizer, SLUTransformer
from .labels import LabelSpace, LabelVector
from .model import ModelConfig, parameter_count

__all__ = ["LabelSpace", "LabelVector", "LogMelFeaturizer", "ModelConfig", "SLUTransformer",
           "parameter_count"]
__version__ = "0.1.0"
