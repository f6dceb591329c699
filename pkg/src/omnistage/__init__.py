"""Desk-scale omni-modal model (vision + speech + text in, text + speech out) and its staged training."""
from .errors import ConfigError, ContextError, DataError, InputError, NumericError, OmniError, ShapeError, TokenIndexError
from .model import MODULE_NAMES, ModelConfig, OmniModel
from .training import STAGE_ORDER, build_stage_plan, run_stage

__all__ = ["ConfigError", "ContextError", "DataError", "InputError", "NumericError", "OmniError",
           "ShapeError", "TokenIndexError", "MODULE_NAMES", "ModelConfig", "OmniModel", "STAGE_ORDER",
           "build_stage_plan", "run_stage"]
__version__ = "0.1.0"
