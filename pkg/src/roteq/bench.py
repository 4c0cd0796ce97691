"""Analytic memory-cost model and wall-clock strategy comparison.

The cost model counts array elements for the two ways of implementing
the tied layers: expanding rotated filter copies once (filters cost 4x,
maps unchanged) versus rotating feature maps per forward pass (filters
unchanged, maps 4x). The GEMM row models the patch-matrix lowering used
by the correlation kernel, where every map element is copied k^2 times.

The timing harness runs the same parameters through both pipelines and
refuses to time anything until their outputs agree, so the measured
ratio reflects strategy overhead and never a divergent computation.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import oracle
from .conv import ConvGeometry, correlate2d, max_pool2d
from .eqlayers import (
    CycleParams,
    DecycleParams,
    IsotonicParams,
    expand_cycle,
    expand_decycle,
    expand_isotonic,
    global_spatial_avg_pool,
)
from .network import Model, build_model, preset_stack
from .oracle import relative_deviation

ROTATE_FILTERS = "rotate_filters"
ROTATE_FEATURE_MAPS = "rotate_feature_maps"
STRATEGIES = (ROTATE_FILTERS, ROTATE_FEATURE_MAPS)

BENCH_MODELS = {
    "z2cnn-shape": ("bench-z2cnn-shape", 28),
    "nin-shape": ("bench-nin-shape", 28),
}


@dataclass(frozen=True)
class LayerGeometry:
    """Shape of one correlation for the analytic cost model."""

    n: int
    c_in: int
    c_out: int
    k: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("n", "c_in", "c_out", "k", "w", "h"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class CostReport:
    """Element counts for one strategy on one layer geometry."""

    strategy: str
    filters_cost: int
    feature_map_cost: int
    feature_map_gpu_cost: int


@dataclass
class TimingReport:
    strategy: str
    model: str
    batch: int
    trials: int
    seconds: list = field(default_factory=list)
    median: float = 0.0
    mean: float = 0.0
    ratio: float | None = None  # counterpart median / own median


def memory_model(geom: LayerGeometry, strategy: str) -> CostReport:
    """Element counts for filters, feature maps, and the GEMM lowering."""
    base_filters = geom.c_in * geom.c_out * geom.k * geom.k
    base_map = geom.n * geom.c_in * geom.w * geom.h
    if strategy == ROTATE_FILTERS:
        return CostReport(strategy, 4 * base_filters, base_map, base_map * geom.k * geom.k)
    if strategy == ROTATE_FEATURE_MAPS:
        return CostReport(strategy, base_filters, 4 * base_map, 4 * base_map * geom.k * geom.k)
    raise ValueError(f"unknown strategy {strategy!r}")


def _bench_layers(model: Model):
    """(kind, spec, params-or-filter) plan for both pipelines."""
    plan = []
    for i, spec in enumerate(model.specs):
        kind = spec.kind
        if kind in ("cycle", "isotonic", "decycle"):
            plan.append((kind, spec, model.params[i]["base"]))
        elif kind in ("relu", "max_pool", "global_avg_pool"):
            plan.append((kind, spec, None))
        elif kind == "conv":
            raise ValueError(f"layer {i}: untied conv layers have no strategy counterpart")
        else:
            raise ValueError(f"layer {i} ({kind}): not supported in the timing model")
    return plan


def _forward_rotate_filters(plan, expanded, x):
    h = x
    for (kind, spec, _), w in zip(plan, expanded):
        if kind in ("cycle", "isotonic", "decycle"):
            h = correlate2d(h, w, ConvGeometry(spec.stride, spec.pad))
        elif kind == "relu":
            h = np.maximum(h, 0)
        elif kind == "max_pool":
            h = max_pool2d(h, spec.kernel, spec.stride)
        elif kind == "global_avg_pool":
            h = global_spatial_avg_pool(h)
    return h


def _forward_rotate_maps(plan, x):
    h = x
    for kind, spec, base in plan:
        geom = ConvGeometry(spec.stride, spec.pad)
        if kind == "cycle":
            h = oracle.oracle_cycle(CycleParams(base), h, geom)
        elif kind == "isotonic":
            h = oracle.oracle_isotonic(IsotonicParams(base), h, geom)
        elif kind == "decycle":
            h = oracle.oracle_decycle(DecycleParams(base), h, geom)
        elif kind == "relu":
            h = np.maximum(h, 0)
        elif kind == "max_pool":
            h = max_pool2d(h, spec.kernel, spec.stride)
        elif kind == "global_avg_pool":
            h = global_spatial_avg_pool(h)
    return h


def _expand_all(plan):
    expanded = []
    for kind, _, base in plan:
        if kind == "cycle":
            expanded.append(expand_cycle(CycleParams(base)))
        elif kind == "isotonic":
            expanded.append(expand_isotonic(IsotonicParams(base)))
        elif kind == "decycle":
            expanded.append(expand_decycle(DecycleParams(base)))
        else:
            expanded.append(None)
    return expanded


def time_forward(
    model_name: str,
    strategy: str,
    batch: int = 64,
    trials: int = 5,
    seed: int = 0,
    gate_tolerance: float = 1e-5,
) -> TimingReport:
    """Wall-clock seconds per full-batch forward pass for one strategy.

    The first (warmup) run is discarded. Filter expansion happens once
    up front for the filter strategy; the map strategy rotates feature
    maps inside the timed loop. Raises if the two pipelines disagree
    beyond `gate_tolerance` before any timing starts.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if trials < 3:
        raise ValueError("need at least 3 trials")
    if model_name not in BENCH_MODELS:
        raise ValueError(f"unknown bench model {model_name!r}; choose from {sorted(BENCH_MODELS)}")
    preset, size = BENCH_MODELS[model_name]
    model = build_model(preset_stack(preset), in_channels=1, seed=seed, input_size=size)
    plan = _bench_layers(model)
    expanded = _expand_all(plan)
    x = np.random.default_rng(seed + 1).random((batch, 1, size, size), dtype=np.float32)

    fast = _forward_rotate_filters(plan, expanded, x)
    slow = _forward_rotate_maps(plan, x)
    _, rel = relative_deviation(fast, slow)
    if rel > gate_tolerance:
        raise RuntimeError(
            f"strategy outputs diverge (rel {rel:.3e} > {gate_tolerance:g}); refusing to time"
        )

    if strategy == ROTATE_FILTERS:
        run = lambda: _forward_rotate_filters(plan, expanded, x)
    else:
        run = lambda: _forward_rotate_maps(plan, x)

    run()  # warmup, excluded
    seconds = []
    for _ in range(trials):
        t0 = time.perf_counter()
        run()
        seconds.append(time.perf_counter() - t0)
    report = TimingReport(strategy, model_name, batch, trials, seconds)
    report.median = float(np.median(seconds))
    report.mean = float(np.mean(seconds))
    return report


def compare_strategies(
    model_name: str, batch: int = 64, trials: int = 5, seed: int = 0
) -> tuple[TimingReport, TimingReport]:
    """Time both strategies on identical parameters; fills the ratio fields."""
    fast = time_forward(model_name, ROTATE_FILTERS, batch, trials, seed)
    slow = time_forward(model_name, ROTATE_FEATURE_MAPS, batch, trials, seed)
    fast.ratio = slow.median / fast.median
    slow.ratio = fast.median / slow.median
    return fast, slow


def report_csv(reports: list) -> str:
    """CSV with header strategy,model,batch,trials,median_s,mean_s,ratio."""
    lines = ["strategy,model,batch,trials,median_s,mean_s,ratio"]
    for r in reports:
        ratio = f"{r.ratio:.6f}" if r.ratio is not None else ""
        lines.append(
            f"{r.strategy},{r.model},{r.batch},{r.trials},{r.median:.6f},{r.mean:.6f},{ratio}"
        )
    return "\n".join(lines) + "\n"
