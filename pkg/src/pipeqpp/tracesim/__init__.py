"""Simulated runtime tracker: workload generation and pipeline execution."""
from .costs import (BackgroundLoad, CostGroundTruthModel, TypeCost, aggregate_costs,
                    snapshot_utilization)
from .engine import execute_parallel, execute_probe, execute_serial, simulate_latency
from .pipeline import (PARALLELIZABLE, Action, ModificationEvent, PipelineSpec, SpecError,
                       apply_modification, plan_cardinalities, validate_spec)
from .workload import WorkloadTemplate, generate_workload, make_templates

__all__ = [
    "BackgroundLoad", "CostGroundTruthModel", "TypeCost", "aggregate_costs",
    "snapshot_utilization", "execute_parallel", "execute_probe", "execute_serial",
    "simulate_latency", "PARALLELIZABLE", "Action", "ModificationEvent", "PipelineSpec",
    "SpecError", "apply_modification", "plan_cardinalities", "validate_spec",
    "WorkloadTemplate", "generate_workload", "make_templates",
]
