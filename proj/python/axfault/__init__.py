"""Stuck-at fault simulation for quantised DNNs on approximate-multiplier accelerators."""

from ._core import (
    Dataset,
    Error,
    ErrorMetrics,
    FaultMap,
    Model,
    Multiplier,
    Weights,
    apply_fault,
    dequantize,
    energy_estimate,
    evaluate,
    fal_retune,
    inject,
    load_idx,
    map_pruned_indices,
    model,
    open_dataset,
    quantize,
    random_fault_map,
    run_campaign,
    systolic_gemm,
    train,
    zoo_names,
)

__all__ = [
    "Dataset",
    "Error",
    "ErrorMetrics",
    "FaultMap",
    "Model",
    "Multiplier",
    "Weights",
    "apply_fault",
    "dequantize",
    "energy_estimate",
    "evaluate",
    "fal_retune",
    "inject",
    "load_idx",
    "map_pruned_indices",
    "model",
    "open_dataset",
    "quantize",
    "random_fault_map",
    "run_campaign",
    "systolic_gemm",
    "train",
    "zoo_names",
]
