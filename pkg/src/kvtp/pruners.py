"""Token pruning backends that honour a per-frame token budget.

Backends:

``random``
    uniform sample without replacement.
``saliency``
    keep the top-``budget`` tokens by saliency (PruMerge-style); optionally
    average every dropped token into its most similar kept token.
``merge``
    one round of bipartite soft matching (ToMe-style) between even and odd
    token positions.
``hard``
    whole-frame keep-or-drop; budgets must be 0 or ``P``.

All backends return tokens in original order, together with the original
index of each output token and whether it absorbed merged tokens.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .allocator import hard_allocation
from .matrix_io import write_matrix

BACKENDS = ("random", "saliency", "merge", "hard")


@dataclass
class FrameTokenSet:
    tokens: np.ndarray
    saliency: np.ndarray | None = None
    frame_index: int = 0

    def __post_init__(self):
        self.tokens = nx.as_matrix(self.tokens, "tokens")
        if self.saliency is not None:
            self.saliency = nx.as_vector(self.saliency, "saliency")
            if self.saliency.shape[0] != self.tokens.shape[0]:
                raise ValueError(
                    f"saliency has {self.saliency.shape[0]} entries for {self.tokens.shape[0]} tokens"
                )

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


@dataclass
class PrunedFrame:
    frame_index: int
    tokens: np.ndarray
    kept: np.ndarray  # original token indices, strictly increasing
    merged: np.ndarray  # True where the output token is a mean of several inputs

    def __len__(self) -> int:
        return self.tokens.shape[0]


@dataclass
class PrunedSequence:
    frames: list[PrunedFrame] = field(default_factory=list)

    @property
    def total_tokens(self) -> int:
        return sum(len(f) for f in self.frames)

    def stacked(self) -> np.ndarray:
        dims = {f.tokens.shape[1] for f in self.frames}
        width = dims.pop() if len(dims) == 1 else 0
        parts = [f.tokens for f in self.frames if len(f)]
        return np.vstack(parts) if parts else np.zeros((0, width))

    def save(self, matrix_path, index_path) -> None:
        """Binary token matrix plus a CSV sidecar ``frame_index,kept_index,merged``."""
        write_matrix(matrix_path, self.stacked())
        with open(index_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame_index", "kept_index", "merged"])
            for f in self.frames:
                for idx, m in zip(f.kept, f.merged):
                    writer.writerow([f.frame_index, int(idx), int(bool(m))])


def _check_budget(frame: FrameTokenSet, budget: int) -> int:
    budget = int(budget)
    if budget < 0 or budget > frame.size:
        raise ValueError(f"budget {budget} outside [0, {frame.size}]")
    return budget


def _result(frame: FrameTokenSet, kept, tokens=None, merged=None) -> PrunedFrame:
    kept = np.asarray(kept, dtype=np.int64)
    if tokens is None:
        tokens = frame.tokens[kept]
    if merged is None:
        merged = np.zeros(kept.size, dtype=bool)
    return PrunedFrame(frame.frame_index, tokens, kept, merged)


def random_prune(frame: FrameTokenSet, budget: int, seed=0) -> PrunedFrame:
    budget = _check_budget(frame, budget)
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(frame.size, size=budget, replace=False))
    return _result(frame, kept)


def top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest values, ties to the lower index, ascending order."""
    order = np.lexsort((np.arange(values.size), -values))
    return np.sort(order[:k])


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def saliency_prune(frame: FrameTokenSet, budget: int, merge_dropped: bool = False) -> PrunedFrame:
    if frame.saliency is None:
        raise ValueError(f"frame {frame.frame_index}: saliency backend needs per-token saliency")
    budget = _check_budget(frame, budget)
    kept = top_k_indices(frame.saliency, budget)
    if not merge_dropped or budget == 0 or budget == frame.size:
        return _result(frame, kept)

    dropped = np.setdiff1d(np.arange(frame.size), kept)
    unit = _unit_rows(frame.tokens)
    sim = unit[dropped] @ unit[kept].T
    target = np.argmax(sim, axis=1)  # argmax picks the first maximum
    sums = frame.tokens[kept].copy()
    counts = np.ones(budget)
    for src, dst in zip(dropped, target):
        sums[dst] += frame.tokens[src]
        counts[dst] += 1
    return _result(frame, kept, sums / counts[:, None], counts > 1)


def bipartite_merge(frame: FrameTokenSet, budget: int) -> PrunedFrame:
    """Merge ``P - budget`` even-position tokens into their closest odd-position token."""
    budget = _check_budget(frame, budget)
    p = frame.size
    r = p - budget
    a_idx = np.arange(0, p, 2)
    b_idx = np.arange(1, p, 2)
    if r > a_idx.size:
        raise ValueError(f"frame {frame.frame_index}: cannot merge {r} tokens with only {a_idx.size} in set A")
    if r == 0:
        return _result(frame, np.arange(p))
    if b_idx.size == 0:
        raise ValueError(f"frame {frame.frame_index}: no set-B tokens to merge into")

    unit = _unit_rows(frame.tokens)
    sim = unit[a_idx] @ unit[b_idx].T
    best_b = np.argmax(sim, axis=1)
    best_sim = sim[np.arange(a_idx.size), best_b]
    order = np.lexsort((np.arange(a_idx.size), -best_sim))
    merged_a = order[:r]

    out = frame.tokens.copy()
    counts = np.ones(p)
    for ai in merged_a:
        dst = b_idx[best_b[ai]]
        out[dst] += frame.tokens[a_idx[ai]]
        counts[dst] += 1
    keep = np.ones(p, dtype=bool)
    keep[a_idx[merged_a]] = False
    kept = np.flatnonzero(keep)
    return _result(frame, kept, out[kept] / counts[kept, None], counts[kept] > 1)


def hard_frame_select(frames: list[FrameTokenSet], scores, fraction: float) -> PrunedSequence:
    chosen = hard_allocation(scores, fraction)
    if len(frames) != chosen.size:
        raise ValueError(f"{chosen.size} scores for {len(frames)} frames")
    out = PrunedSequence()
    for frame, keep in zip(frames, chosen):
        kept = np.arange(frame.size) if keep else np.zeros(0, dtype=np.int64)
        out.frames.append(_result(frame, kept))
    return out


class FramePruneError(ValueError):
    def __init__(self, frame_index: int, cause: Exception):
        super().__init__(f"frame {frame_index}: {cause}")
        self.frame_index = frame_index


def prune_frame(frame: FrameTokenSet, budget: int, backend: str, seed=0, merge_dropped: bool = False) -> PrunedFrame:
    if backend == "random":
        return random_prune(frame, budget, seed)
    if backend == "saliency":
        return saliency_prune(frame, budget, merge_dropped)
    if backend == "merge":
        return bipartite_merge(frame, budget)
    if backend == "hard":
        budget = _check_budget(frame, budget)
        if budget not in (0, frame.size):
            raise ValueError(f"hard backend needs budget 0 or {frame.size}, got {budget}")
        return _result(frame, np.arange(budget))
    raise ValueError(f"unknown backend {backend!r}; choose from {', '.join(BACKENDS)}")


def prune_video(frames: list[FrameTokenSet], budgets, backend: str = "saliency", seed: int = 0, merge_dropped: bool = False) -> PrunedSequence:
    budgets = list(budgets)
    if len(budgets) != len(frames):
        raise ValueError(f"{len(budgets)} budgets for {len(frames)} frames")
    out = PrunedSequence()
    for i, (frame, budget) in enumerate(zip(frames, budgets)):
        try:
            out.frames.append(prune_frame(frame, budget, backend, seed=(seed, i), merge_dropped=merge_dropped))
        except ValueError as exc:
            raise FramePruneError(frame.frame_index, exc) from exc
    return out


def load_index(path) -> list[tuple[int, int, bool]]:
    with open(Path(path), newline="") as fh:
        return [(int(r["frame_index"]), int(r["kept_index"]), r["merged"] == "1") for r in csv.DictReader(fh)]
