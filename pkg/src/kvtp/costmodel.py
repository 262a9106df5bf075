"""Analytical forward-pass FLOPs for a decoder-only backbone.

Per layer and per sequence of ``T`` tokens the multiply-accumulate count is

    4 T d^2        (q, k, v, o projections)
  + 2 T^2 d        (scores and weighted sum)
  + 2 T d d_ff     (two feed-forward matmuls)

and FLOPs are twice that. Layer norms, softmax and the LM head are ignored.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class BackboneSpec:
    layers: int
    model_dim: int
    ffn_dim: int
    text_tokens: int = 0
    predictor_overhead_flops: float = 0.0

    def __post_init__(self):
        if self.layers < 1 or self.model_dim < 1 or self.ffn_dim < 1:
            raise ValueError("layers, model_dim and ffn_dim must be positive")
        if self.text_tokens < 0 or self.predictor_overhead_flops < 0:
            raise ValueError("text_tokens and predictor overhead must be nonnegative")


def backbone_flops(spec: BackboneSpec, vision_tokens: int) -> float:
    if vision_tokens < 0:
        raise ValueError("vision_tokens must be nonnegative")
    t = spec.text_tokens + vision_tokens
    d, f = spec.model_dim, spec.ffn_dim
    return float(spec.layers * 2 * (4 * t * d * d + 2 * t * t * d + 2 * t * d * f))


def forward_flops(spec: BackboneSpec, vision_tokens: int) -> float:
    return backbone_flops(spec, vision_tokens) + spec.predictor_overhead_flops


def relative_flops(spec: BackboneSpec, full_vision_tokens: int, pruned_vision_tokens: int) -> float:
    """Cost of the pruned pipeline (predictor included) over the unpruned backbone."""
    if pruned_vision_tokens > full_vision_tokens:
        raise ValueError("pruned token count exceeds the full count")
    full = backbone_flops(spec, full_vision_tokens)
    if full == 0:
        raise ValueError("full configuration has zero FLOPs")
    return forward_flops(spec, pruned_vision_tokens) / full


# Calibration against the 7B deployment: Qwen2-7B-sized backbone, 128 frames
# at 169 tokens each, a 128-token prompt. The predictor overhead stands in for
# the relevance encoder pass over all frames; 9.6e13 FLOPs puts the 20%
# retention configuration at 36% of the unpruned cost.
CALIBRATION_FRAMES = 128
CALIBRATION_TOKENS_PER_FRAME = 169
CALIBRATION_SPEC = BackboneSpec(
    layers=28,
    model_dim=3584,
    ffn_dim=18944,
    text_tokens=128,
    predictor_overhead_flops=9.6e13,
)


def calibration_full_tokens() -> int:
    return CALIBRATION_FRAMES * CALIBRATION_TOKENS_PER_FRAME


def calibrated_relative_flops(keep_fraction: float, with_predictor: bool = True) -> float:
    full = calibration_full_tokens()
    spec = CALIBRATION_SPEC if with_predictor else replace(CALIBRATION_SPEC, predictor_overhead_flops=0.0)
    return relative_flops(spec, full, round(keep_fraction * full))


@dataclass
class FlopsRow:
    method: str
    tokens: int
    flops: float
    relative: float


def flops_table(spec: BackboneSpec, full_tokens: int, keep_fractions: dict[str, float]) -> list[FlopsRow]:
    """One row per method; methods whose name contains ``kvtp`` pay the predictor."""
    bare = replace(spec, predictor_overhead_flops=0.0)
    rows = [FlopsRow("full", full_tokens, backbone_flops(spec, full_tokens), 1.0)]
    for method, frac in keep_fractions.items():
        tokens = round(frac * full_tokens)
        s = spec if "kvtp" in method.lower() else bare
        rows.append(FlopsRow(method, tokens, forward_flops(s, tokens), relative_flops(s, full_tokens, tokens)))
    return rows


def format_table(rows: list[FlopsRow]) -> str:
    width = max(len(r.method) for r in rows)
    lines = [f"{'method':<{width}}  {'tokens':>8}  {'flops':>12}  {'relative':>8}"]
    for r in rows:
        lines.append(f"{r.method:<{width}}  {r.tokens:>8d}  {r.flops:>12.4e}  {r.relative:>8.4f}")
    return "\n".join(lines)


def format_csv(rows: list[FlopsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "tokens", "flops", "relative"])
    for r in rows:
        w.writerow([r.method, r.tokens, repr(r.flops), f"{r.relative:.6f}"])
    return buf.getvalue()
