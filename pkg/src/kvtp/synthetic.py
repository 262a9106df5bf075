"""Planted-keyframe videos for desk-scale experiments.

Each video has a random unit query ``q``. Keyframe embeddings have cosine
exactly ``signal_strength`` with ``q``; their immediate neighbours get a
weaker planted cosine, and every other frame sits near zero. All frames of a
video share a common "theme" direction orthogonal to ``q``.

Token sets carry planted tokens with elevated saliency: ``signal_tokens`` of
them in every keyframe, and single context tokens scattered over a random
subset of the other frames. Labels are 5 for keyframes, 2 for neighbours and
0 elsewhere.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .predictor import EmbeddingSequence, TrainingSample
from .pruners import FrameTokenSet, PrunedSequence

KEYFRAME_LABEL = 5.0
NEIGHBOR_LABEL = 2.0


@dataclass(frozen=True)
class SyntheticSpec:
    videos: int = 100
    frames_per_video: int = 32
    dim: int = 16
    tokens_per_frame: int = 16
    token_dim: int = 8
    keyframe_count: int = 2
    signal_strength: float = 0.6
    neighbor_strength: float = 0.25
    noise_cosine: float = 0.05
    signal_tokens: int = 12
    context_rate: float = 0.3
    clip_size: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.videos < 0:
            raise ValueError("videos must be nonnegative")
        if self.frames_per_video < 1 or self.dim < 2 or self.tokens_per_frame < 1 or self.token_dim < 1:
            raise ValueError("frames, dim, tokens and token_dim must be positive (dim >= 2)")
        if not 0 <= self.keyframe_count < self.frames_per_video:
            raise ValueError("keyframe_count must lie in [0, frames_per_video)")
        if not 0 < self.signal_strength <= 1:
            raise ValueError("signal_strength must lie in (0, 1]")
        if self.signal_strength <= 3 * self.noise_cosine:
            raise ValueError("signal_strength must clear the noise baseline (3 x noise_cosine)")
        if not 0 <= self.signal_tokens <= self.tokens_per_frame:
            raise ValueError("signal_tokens must fit in a frame")
        if not 0 <= self.context_rate <= 1:
            raise ValueError("context_rate must lie in [0, 1]")


@dataclass
class SyntheticVideo:
    sample: TrainingSample
    frames: list[FrameTokenSet]
    signal: list[np.ndarray]  # per-frame boolean mask of planted tokens
    keyframes: np.ndarray

    @property
    def planted_total(self) -> int:
        return int(sum(m.sum() for m in self.signal))

    def retained_signal(self, pruned: PrunedSequence) -> int:
        return int(sum(self.signal[f.frame_index][f.kept].sum() for f in pruned.frames))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _orthogonal(rng: np.random.Generator, q: np.ndarray) -> np.ndarray:
    while True:
        v = rng.standard_normal(q.size)
        v -= (v @ q) * q
        n = np.linalg.norm(v)
        if n > 1e-8:
            return v / n


def _video(rng: np.random.Generator, spec: SyntheticSpec, index: int) -> SyntheticVideo:
    n, d, p = spec.frames_per_video, spec.dim, spec.tokens_per_frame
    q = _unit(rng.standard_normal(d))
    theme = _orthogonal(rng, q)
    keyframes = np.sort(rng.choice(n, size=spec.keyframe_count, replace=False))
    is_key = np.zeros(n, dtype=bool)
    is_key[keyframes] = True
    is_neighbor = np.zeros(n, dtype=bool)
    for k in keyframes:
        for j in (k - 1, k + 1):
            if 0 <= j < n and not is_key[j]:
                is_neighbor[j] = True

    labels = np.where(is_key, KEYFRAME_LABEL, np.where(is_neighbor, NEIGHBOR_LABEL, 0.0))
    cos = np.clip(rng.normal(0.0, spec.noise_cosine, n), -0.99, 0.99)
    cos[is_neighbor] = spec.neighbor_strength * spec.signal_strength
    cos[is_key] = spec.signal_strength

    frames = np.empty((n, d))
    for i in range(n):
        u = _orthogonal(rng, q)
        u = _unit(0.6 * theme + 0.8 * u)
        scale = rng.uniform(0.8, 1.2)
        frames[i] = scale * (cos[i] * q + np.sqrt(1.0 - cos[i] ** 2) * u)

    token_sets, masks = [], []
    for i in range(n):
        tokens = rng.standard_normal((p, spec.token_dim))
        saliency = rng.uniform(0.0, 0.5, p)
        mask = np.zeros(p, dtype=bool)
        if is_key[i]:
            mask[rng.choice(p, size=spec.signal_tokens, replace=False)] = True
        elif rng.random() < spec.context_rate:
            mask[rng.integers(p)] = True
        saliency[mask] = rng.uniform(0.6, 1.0, mask.sum())
        token_sets.append(FrameTokenSet(tokens, saliency, frame_index=i))
        masks.append(mask)

    sample = TrainingSample(EmbeddingSequence(frames, spec.clip_size), q, labels)
    return SyntheticVideo(sample, token_sets, masks, keyframes)


def generate_synthetic(spec: SyntheticSpec) -> list[SyntheticVideo]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    return [_video(rng, spec, i) for i in range(spec.videos)]


def corpus_digest(corpus: list[SyntheticVideo]) -> str:
    h = hashlib.sha256()
    for v in corpus:
        h.update(v.sample.embeddings.frames.tobytes())
        h.update(v.sample.query.tobytes())
        h.update(v.sample.labels.tobytes())
        h.update(v.keyframes.tobytes())
        for f, m in zip(v.frames, v.signal):
            h.update(f.tokens.tobytes())
            h.update(f.saliency.tobytes())
            h.update(m.tobytes())
    return h.hexdigest()

