"""Per-frame keep ratios and token budgets from relevance scores.

Ratios are ``alpha * N * softmax(scores / T)``: their mean is ``alpha``
before clamping. Ratios above ``max_ratio`` are clamped and the excess is
redistributed over the remaining frames in proportion to their softmax
weights until nothing exceeds the ceiling.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx

MIN_FRAMES = 64


@dataclass(frozen=True)
class AllocationConfig:
    alpha: float = 0.2
    temperature: float = 1.0
    max_ratio: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 < self.max_ratio <= 1.0:
            raise ValueError(f"max_ratio must lie in (0, 1], got {self.max_ratio}")
        if self.alpha > self.max_ratio:
            raise ValueError(f"alpha {self.alpha} exceeds max_ratio {self.max_ratio}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def unclamped_ratios(scores, config: AllocationConfig) -> np.ndarray:
    s = nx.as_vector(scores, "scores")
    if s.size == 0:
        raise ValueError("need at least one score")
    return config.alpha * s.size * nx.softmax(s, config.temperature)


def allocate(scores, config: AllocationConfig = AllocationConfig()) -> np.ndarray:
    s = nx.as_vector(scores, "scores")
    n = s.size
    if n == 0:
        raise ValueError("need at least one score")
    total = config.alpha * n
    if total > n * config.max_ratio + 1e-12:
        raise ValueError(f"infeasible: demand {total} exceeds capacity {n * config.max_ratio}")

    clamped = np.zeros(n, dtype=bool)
    ratios = np.empty(n)
    while True:
        free = ~clamped
        mass = total - config.max_ratio * clamped.sum()
        # softmax over the free frames only; equals proportional redistribution
        # but survives weights that underflow at tiny temperatures
        ratios[free] = max(mass, 0.0) * nx.softmax(s[free], config.temperature)
        ratios[clamped] = config.max_ratio
        over = free & (ratios > config.max_ratio)
        if not over.any():
            return ratios
        clamped |= over
        if clamped.all():
            ratios[:] = config.max_ratio
            return ratios


def to_token_budgets(ratios, tokens_per_frame: int) -> np.ndarray:
    """Largest-remainder rounding of ``ratios * P``; ties go to the lower index."""
    if tokens_per_frame < 1:
        raise ValueError("tokens_per_frame must be >= 1")
    r = nx.as_vector(ratios, "ratios")
    if np.any(r < 0):
        raise ValueError("ratios must be nonnegative")
    exact = np.minimum(r * tokens_per_frame, tokens_per_frame)
    floors = np.floor(exact).astype(np.int64)
    target = int(round(float(exact.sum())))
    short = target - int(floors.sum())
    if short > 0:
        rema = exact - floors
        order = sorted(range(r.size), key=lambda i: (-rema[i], i))
        eligible = [i for i in order if floors[i] < tokens_per_frame]
        for i in eligible[:short]:
            floors[i] += 1
    return floors


def hard_allocation(scores, keep_fraction: float) -> np.ndarray:
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    s = nx.as_vector(scores, "scores")
    k = math.ceil(keep_fraction * s.size - 1e-9)
    order = sorted(range(s.size), key=lambda i: (-s[i], i))
    out = np.zeros(s.size)
    out[order[:k]] = 1.0
    return out


@dataclass(frozen=True)
class SparsityReport:
    sparsity: float
    passes_sparsity: bool
    passes_length: bool

    @property
    def passes(self) -> bool:
        return self.passes_sparsity and self.passes_length


def sparsity(scores, config: AllocationConfig = AllocationConfig(), beta: float = 1.5, min_frames: int = MIN_FRAMES) -> SparsityReport:
    """Keyframe sparsity ``max(r) / mean(r)`` of the unclamped ratios and filter verdicts."""
    r = unclamped_ratios(scores, config)
    return SparsityReport(
        sparsity=float(r.max() / r.mean()),
        passes_sparsity=bool(r.max() >= beta * config.alpha),
        passes_length=r.size >= min_frames,
    )


def report_rows(scores, ratios, budgets) -> list[dict]:
    return [
        {"index": i, "score": float(s), "ratio": float(r), "budget": int(b)}
        for i, (s, r, b) in enumerate(zip(scores, ratios, budgets))
    ]


def format_report(scores, ratios, budgets, report: SparsityReport, as_json: bool = False) -> str:
    rows = report_rows(scores, ratios, budgets)
    if as_json:
        return json.dumps({"frames": rows, **asdict(report)}, indent=2)
    lines = [f"{r['index']}, {r['score']:.6g}, {r['ratio']:.7f}, {r['budget']}" for r in rows]
    lines.append(f"# sparsity = {report.sparsity:.6f}")
    lines.append(f"# passes_sparsity = {str(report.passes_sparsity).lower()}")
    lines.append(f"# passes_length = {str(report.passes_length).lower()}")
    return "\n".join(lines)
