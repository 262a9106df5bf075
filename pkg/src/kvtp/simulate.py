"""End-to-end synthetic experiment: generate, train, score, allocate, prune, measure."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, replace

import numpy as np

from .allocator import AllocationConfig, allocate, sparsity, to_token_budgets
from .costmodel import calibrated_relative_flops
from .predictor import PredictorParams, TrainConfig, predict_scores, train
from .pruners import hard_frame_select, prune_video
from .synthetic import SyntheticSpec, SyntheticVideo, generate_synthetic

DEFAULT_TEMPERATURES = (5.0, 3.0, 1.0, 0.5, 1e-6)


@dataclass
class SimulationConfig:
    synthetic: SyntheticSpec = SyntheticSpec()
    train_videos: int = 300
    test_videos: int = 200
    retention_videos: int = 100
    alpha: float = 0.2
    temperatures: tuple[float, ...] = DEFAULT_TEMPERATURES
    betas: tuple[float, ...] = (1.0,)
    backend: str = "saliency"
    train: TrainConfig = TrainConfig()


@dataclass
class MetricRow:
    method: str
    temperature: float
    beta: float
    videos: int
    total_budget: int
    signal_retention: float
    mean_signal_tokens: float
    top1_accuracy: float
    relative_flops: float


def top1_hit(scores: np.ndarray, video: SyntheticVideo) -> bool:
    return int(np.argmax(scores)) in set(video.keyframes.tolist())


def top1_accuracy(params: PredictorParams, videos: list[SyntheticVideo]) -> float:
    if not videos:
        return float("nan")
    hits = [top1_hit(predict_scores(params, v.sample.embeddings, v.sample.query), v) for v in videos]
    return float(np.mean(hits))


def kvtp_budgets(scores: np.ndarray, alpha: float, temperature: float, tokens_per_frame: int) -> np.ndarray:
    ratios = allocate(scores, AllocationConfig(alpha=alpha, temperature=temperature))
    return to_token_budgets(ratios, tokens_per_frame)


def uniform_budgets(frame_count: int, alpha: float, tokens_per_frame: int) -> np.ndarray:
    return to_token_budgets(np.full(frame_count, alpha), tokens_per_frame)


def retention(videos, budgets_for, backend: str, seed: int = 0) -> tuple[float, float, int]:
    """Aggregate retained-signal fraction, mean retained signal tokens, total budget."""
    retained = planted = budget_total = 0
    for i, v in enumerate(videos):
        budgets = budgets_for(v)
        pruned = prune_video(v.frames, budgets, backend, seed=seed + i)
        retained += v.retained_signal(pruned)
        planted += v.planted_total
        budget_total += int(np.sum(budgets))
    frac = retained / planted if planted else float("nan")
    return frac, retained / max(len(videos), 1), budget_total


def hard_retention(videos, scores_for, fraction: float) -> tuple[float, float, int]:
    retained = planted = total = 0
    for v in videos:
        pruned = hard_frame_select(v.frames, scores_for(v), fraction)
        retained += v.retained_signal(pruned)
        planted += v.planted_total
        total += pruned.total_tokens
    return retained / planted if planted else float("nan"), retained / max(len(videos), 1), total


def run_simulation(config: SimulationConfig) -> tuple[list[MetricRow], PredictorParams, list[float]]:
    spec = config.synthetic
    train_corpus = generate_synthetic(replace(spec, videos=config.train_videos, seed=spec.seed))
    test_corpus = generate_synthetic(replace(spec, videos=config.test_videos, seed=spec.seed + 1))
    result = train([v.sample for v in train_corpus], config.train)
    params = result.params
    accuracy = top1_accuracy(params, test_corpus)

    scored = {id(v): predict_scores(params, v.sample.embeddings, v.sample.query) for v in test_corpus}
    p = spec.tokens_per_frame
    rows: list[MetricRow] = []
    for beta in config.betas:
        label_cfg = AllocationConfig(alpha=config.alpha)
        pool = [v for v in test_corpus if sparsity(v.sample.labels, label_cfg, beta=beta, min_frames=0).passes_sparsity]
        videos = pool[: config.retention_videos]
        if not videos:
            continue
        full_tokens = sum(len(v.frames) * p for v in videos)

        def row(method, temperature, stats, with_predictor):
            frac, mean_tokens, total = stats
            rel = calibrated_relative_flops(total / full_tokens, with_predictor=with_predictor)
            return MetricRow(method, temperature, beta, len(videos), total, frac, mean_tokens, accuracy, rel)

        stats = retention(videos, lambda v: uniform_budgets(len(v.frames), config.alpha, p), config.backend)
        rows.append(row("uniform", float("nan"), stats, False))
        for t in config.temperatures:
            stats = retention(videos, lambda v: kvtp_budgets(scored[id(v)], config.alpha, t, p), config.backend)
            rows.append(row("kvtp", t, stats, True))
        stats = hard_retention(videos, lambda v: scored[id(v)], config.alpha)
        rows.append(row("hard", 0.0, stats, True))
    return rows, params, result.loss_trace


def metrics_csv(rows: list[MetricRow]) -> str:
    buf = io.StringIO()
    names = list(asdict(rows[0]).keys()) if rows else [f for f in MetricRow.__dataclass_fields__]
    w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    w.writeheader()
    for r in rows:
        d = asdict(r)
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in d.items()})
    return buf.getvalue()
