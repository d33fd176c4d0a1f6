"""Deterministic simulator for parameter-centric GPU memory management
in multi-instance LLM serving."""

from .config import SimConfig, load_config, validate
from .core import (Chunk, Group, Instance, Microbatch, ModelSpec, Request,
                   RequestState, tpot, ttft)
from .costmodel import CostCoefficients, batch_cost, chunk_cost, fit
from .engine import Engine, SimResult, run_sim
from .formulation import lookahead_formulation, token_count_chunking
from .planner import DropPlan, compute_demand, plan_drop
from .traceio import TraceRecord, load_trace, save_trace, synth_burst

__version__ = "0.1.0"

__all__ = [
    "Chunk", "CostCoefficients", "DropPlan", "Engine", "Group", "Instance",
    "Microbatch", "ModelSpec", "Request", "RequestState", "SimConfig",
    "SimResult", "TraceRecord", "batch_cost", "chunk_cost", "compute_demand",
    "fit", "load_config", "load_trace", "lookahead_formulation", "plan_drop",
    "run_sim", "save_trace", "synth_burst", "token_count_chunking", "tpot",
    "ttft", "validate",
]
