"""Toy in-context video editing with task-aware positional indexing."""
from .backbone import DiT, DiTConfig
from .layout import LayoutPlan, SlotRegistry, TaskKind, default_registry, plan_indices, validate_plan
from .model import EditModel

__all__ = ["DiT", "DiTConfig", "EditModel", "LayoutPlan", "SlotRegistry", "TaskKind", "default_registry",
           "plan_indices", "validate_plan"]
__version__ = "0.1.0"
