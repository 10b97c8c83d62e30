"""Head-wise KV-cache offloading: memory and roofline models, a numeric
reference engine, a simulated two-tier runtime and a planner."""

from .errors import (CapacityExceeded, HeadOffloadError, Infeasible, InvalidSpec, ParseError,
                     ShapeMismatch, UnresolvedPolicy)
from .memory import MemoryReport, footprint, kv_cache_bytes, max_context, weight_bytes
from .planner import Plan, plan, select_chunk, select_groups
from .roofline import Phase, classify, phase_time, roofline_table, turning_point
from .workload import (GIB, HardwareSpec, ModelSpec, Policy, PolicyKind, get_model, get_profile,
                       load_hardware_spec, load_model_spec)

__version__ = "0.1.0"
