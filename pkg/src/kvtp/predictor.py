"""Query-frame relevance predictor.

The predictor scores every frame of a video against a query embedding:

* base logits ``a * cos(e_i, e_q) + b``;
* a local context head, where each frame attends over the frames of its own
  clip (keys are L2-normalised rows, values are the raw rows);
* a global context head, where each frame attends over the whole video;
* combined logits ``(1 - theta - phi) * L + theta * L_local + phi * L_global``.

Training minimises ``-sum(log sigmoid(L' * (S - mean(S))))`` with hand-written
gradients for every parameter, including an optional ``d x d`` linear adapter
applied to frame embeddings.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .curation import partition_clips

log = logging.getLogger(__name__)

SCALAR_FIELDS = ("a", "b", "tau_local", "tau_global", "theta", "phi")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"loss became non-finite ({value}) in epoch {epoch}")
        self.epoch = epoch


@dataclass
class PredictorParams:
    a: float = 1.0
    b: float = 0.0
    tau_local: float = 1.0
    tau_global: float = 1.0
    theta: float = 0.25
    phi: float = 0.25
    adapter: np.ndarray | None = None

    def __post_init__(self):
        if self.adapter is not None:
            self.adapter = nx.as_matrix(self.adapter, "adapter")
        self.validate()

    def validate(self) -> None:
        for name in SCALAR_FIELDS:
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.tau_local <= 0 or self.tau_global <= 0:
            raise ValueError("temperatures must be positive")
        if not (0.0 <= self.theta <= 1.0 and 0.0 <= self.phi <= 1.0):
            raise ValueError("theta and phi must lie in [0, 1]")
        if self.theta + self.phi > 1.0 + 1e-12:
            raise ValueError(f"theta + phi = {self.theta + self.phi} exceeds 1")
        if self.adapter is not None and self.adapter.shape[0] != self.adapter.shape[1]:
            raise ValueError(f"adapter must be square, got {self.adapter.shape}")

    @classmethod
    def initial(cls, dim: int | None = None) -> "PredictorParams":
        """Training start point: cosine scorer with mild context mixing, identity adapter."""
        adapter = np.eye(dim) if dim is not None else None
        return cls(adapter=adapter)

    def copy(self) -> "PredictorParams":
        return replace(self, adapter=None if self.adapter is None else self.adapter.copy())

    def to_vector(self) -> np.ndarray:
        parts = [np.array([getattr(self, n) for n in SCALAR_FIELDS], dtype=np.float64)]
        if self.adapter is not None:
            parts.append(self.adapter.ravel())
        return np.concatenate(parts)

    def with_vector(self, vec: np.ndarray) -> "PredictorParams":
        """Copy of ``self`` with every parameter replaced from a flat vector.

        Skips validation so finite-difference probes may step across bounds.
        """
        out = object.__new__(PredictorParams)
        for i, n in enumerate(SCALAR_FIELDS):
            setattr(out, n, float(vec[i]))
        out.adapter = None if self.adapter is None else np.array(vec[6:]).reshape(self.adapter.shape)
        return out


@dataclass
class ParamGrads:
    a: float = 0.0
    b: float = 0.0
    tau_local: float = 0.0
    tau_global: float = 0.0
    theta: float = 0.0
    phi: float = 0.0
    adapter: np.ndarray | None = None

    def to_vector(self) -> np.ndarray:
        parts = [np.array([getattr(self, n) for n in SCALAR_FIELDS], dtype=np.float64)]
        if self.adapter is not None:
            parts.append(self.adapter.ravel())
        return np.concatenate(parts)


@dataclass
class EmbeddingSequence:
    frames: np.ndarray
    clip_size: int = 8

    def __post_init__(self):
        self.frames = nx.as_matrix(self.frames, "frames")
        n = self.frames.shape[0]
        if n < 1:
            raise ValueError("need at least one frame")
        if not 1 <= self.clip_size:
            raise ValueError(f"clip_size must be >= 1, got {self.clip_size}")
        self.clip_size = min(int(self.clip_size), n)
        if np.any(np.linalg.norm(self.frames, axis=1) == 0.0):
            raise ValueError("frame embeddings must have nonzero norm")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class TrainingSample:
    embeddings: EmbeddingSequence
    query: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.query = nx.as_vector(self.query, "query")
        self.labels = nx.as_vector(self.labels, "labels")
        if np.linalg.norm(self.query) == 0.0:
            raise ValueError("query embedding must have nonzero norm")
        if self.query.shape[0] != self.embeddings.dim:
            raise ValueError(f"query dim {self.query.shape[0]} != frame dim {self.embeddings.dim}")
        if self.labels.shape[0] != len(self.embeddings):
            raise ValueError(f"{self.labels.shape[0]} labels for {len(self.embeddings)} frames")


def clip_mask(frame_count: int, clip_size: int) -> np.ndarray:
    mask = np.zeros((frame_count, frame_count), dtype=bool)
    for start, end in partition_clips(frame_count, clip_size):
        mask[start : end + 1, start : end + 1] = True
    return mask


def apply_adapter(params: PredictorParams, embeddings: EmbeddingSequence) -> EmbeddingSequence:
    if params.adapter is None:
        return embeddings
    if params.adapter.shape != (embeddings.dim, embeddings.dim):
        raise ValueError(f"adapter {params.adapter.shape} does not fit dim {embeddings.dim}")
    return EmbeddingSequence(embeddings.frames @ params.adapter, embeddings.clip_size)


def _query(query) -> np.ndarray:
    q = nx.as_vector(query, "query")
    if np.linalg.norm(q) == 0.0:
        raise ValueError("query embedding must have nonzero norm")
    return q


def base_logits(params: PredictorParams, embeddings: EmbeddingSequence, query) -> np.ndarray:
    x = apply_adapter(params, embeddings).frames
    return params.a * nx.cosine_rows(x, _query(query)) + params.b


def local_fused_embeddings(params: PredictorParams, embeddings: EmbeddingSequence) -> np.ndarray:
    x = apply_adapter(params, embeddings).frames
    mask = clip_mask(x.shape[0], embeddings.clip_size)
    out, _ = nx.attention(x, nx.normalize_rows(x), x, params.tau_local, x.shape[1], mask)
    return out


def global_fused_embeddings(params: PredictorParams, embeddings: EmbeddingSequence) -> np.ndarray:
    x = apply_adapter(params, embeddings).frames
    out, _ = nx.attention(x, nx.normalize_rows(x), x, params.tau_global, x.shape[1])
    return out


@dataclass
class _Forward:
    x: np.ndarray
    q: np.ndarray
    cos: np.ndarray
    cos_local: np.ndarray
    cos_global: np.ndarray
    fused_local: np.ndarray
    fused_global: np.ndarray
    cache_local: nx.AttentionCache
    cache_global: nx.AttentionCache
    logits: np.ndarray = field(default=None)


def _forward(params: PredictorParams, embeddings: EmbeddingSequence, query) -> _Forward:
    if params.theta + params.phi > 1.0 + 1e-12:
        raise ValueError(f"theta + phi = {params.theta + params.phi} exceeds 1")
    q = _query(query)
    if q.shape[0] != embeddings.dim:
        raise ValueError(f"query dim {q.shape[0]} != frame dim {embeddings.dim}")
    x = apply_adapter(params, embeddings).frames
    d = x.shape[1]
    keys = nx.normalize_rows(x)
    mask = clip_mask(x.shape[0], embeddings.clip_size)
    fl, cache_l = nx.attention(x, keys, x, params.tau_local, d, mask)
    fg, cache_g = nx.attention(x, keys, x, params.tau_global, d)
    cos = nx.cosine_rows(x, q)
    cos_l = nx.cosine_rows(fl, q)
    cos_g = nx.cosine_rows(fg, q)
    w0 = 1.0 - params.theta - params.phi
    logits = params.a * (w0 * cos + params.theta * cos_l + params.phi * cos_g) + params.b
    return _Forward(x, q, cos, cos_l, cos_g, fl, fg, cache_l, cache_g, logits)


def combined_logits(params: PredictorParams, embeddings: EmbeddingSequence, query) -> np.ndarray:
    return _forward(params, embeddings, query).logits


def predict_scores(params: PredictorParams, embeddings: EmbeddingSequence, query) -> np.ndarray:
    """Relevance logits per frame; rate conversion is left to the allocator."""
    return combined_logits(params, embeddings, query)


def center_labels(labels) -> np.ndarray:
    s = nx.as_vector(labels, "labels")
    if s.size == 0:
        raise ValueError("need at least one label")
    return s - s.mean()


def contrastive_loss(logits, centered_labels) -> float:
    return float(-np.sum(nx.log_sigmoid(np.asarray(logits) * np.asarray(centered_labels))))


def loss(params: PredictorParams, sample: TrainingSample) -> float:
    logits = combined_logits(params, sample.embeddings, sample.query)
    return contrastive_loss(logits, center_labels(sample.labels))


def loss_and_gradients(params: PredictorParams, sample: TrainingSample) -> tuple[float, ParamGrads]:
    f = _forward(params, sample.embeddings, sample.query)
    s_hat = center_labels(sample.labels)
    z = f.logits * s_hat
    value = float(-np.sum(nx.log_sigmoid(z)))
    # dO/dL'_i = -s_i * sigma(-z_i)
    g = -s_hat * nx.sigmoid(-z)

    a, theta, phi = params.a, params.theta, params.phi
    w0 = 1.0 - theta - phi
    grads = ParamGrads()
    grads.a = float(g @ (w0 * f.cos + theta * f.cos_local + phi * f.cos_global))
    grads.b = float(g.sum())
    grads.theta = float(a * g @ (f.cos_local - f.cos))
    grads.phi = float(a * g @ (f.cos_global - f.cos))

    dx = nx.cosine_rows_backward(f.x, f.q, g * a * w0)
    for weight, fused, cache, tau_name in (
        (theta, f.fused_local, f.cache_local, "tau_local"),
        (phi, f.fused_global, f.cache_global, "tau_global"),
    ):
        if weight == 0.0:
            continue
        d_fused = nx.cosine_rows_backward(fused, f.q, g * a * weight)
        gq, gk, gv, gt = nx.attention_backward(cache, d_fused)
        dx += gq + gv + nx.normalize_rows_backward(f.x, gk)
        setattr(grads, tau_name, gt)

    if params.adapter is not None:
        grads.adapter = sample.embeddings.frames.T @ dx
    return value, grads


def loss_gradients(params: PredictorParams, sample: TrainingSample) -> ParamGrads:
    return loss_and_gradients(params, sample)[1]


def project_mixing(theta: float, phi: float) -> tuple[float, float]:
    """Euclidean projection onto ``{theta >= 0, phi >= 0, theta + phi <= 1}``."""
    theta, phi = max(theta, 0.0), max(phi, 0.0)
    if theta + phi <= 1.0:
        return theta, phi
    # project onto the edge theta + phi = 1, then clip to its endpoints
    shift = (theta + phi - 1.0) / 2.0
    theta, phi = theta - shift, phi - shift
    if theta < 0.0:
        return 0.0, 1.0
    if phi < 0.0:
        return 1.0, 0.0
    return theta, phi


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    momentum: float = 0.9
    train_mixing: bool = True
    train_adapter: bool = True
    min_temperature: float = 1e-3


@dataclass
class TrainResult:
    params: PredictorParams
    loss_trace: list[float]


def _batch_gradient(params: PredictorParams, batch: list[TrainingSample]) -> tuple[float, np.ndarray]:
    total = 0.0
    grad = np.zeros_like(params.to_vector())
    for sample in batch:
        value, g = loss_and_gradients(params, sample)
        total += value
        grad += g.to_vector()
    return total / len(batch), grad / len(batch)


def train(samples: list[TrainingSample], config: TrainConfig = TrainConfig(), init: PredictorParams | None = None) -> TrainResult:
    """Mini-batch gradient descent with momentum on the mean per-sample loss.

    Raises :class:`TrainingDiverged` on a non-finite loss or gradient, or on a
    floating-point overflow while evaluating them. The per-epoch trace records the mean loss over that epoch's batches,
    each evaluated before its own update.
    """
    if not samples:
        raise ValueError("need at least one training sample")
    if not config.learning_rate > 0:
        raise ValueError("learning rate must be positive")
    if config.batch_size < 1:
        raise ValueError("batch size must be >= 1")
    params = init.copy() if init is not None else PredictorParams.initial(samples[0].embeddings.dim)
    rng = np.random.default_rng(config.seed)
    vec = params.to_vector()
    velocity = np.zeros_like(vec)
    frozen = np.zeros_like(vec, dtype=bool)
    if not config.train_mixing:
        frozen[4:6] = True
    if not config.train_adapter:
        frozen[6:] = True
    trace: list[float] = []

    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        for start in range(0, len(samples), config.batch_size):
            batch = [samples[i] for i in order[start : start + config.batch_size]]
            try:
                # overflow inside the forward pass means the step size blew up
                with np.errstate(over="raise", invalid="raise", divide="raise"):
                    value, grad = _batch_gradient(params, batch)
            except FloatingPointError:
                raise TrainingDiverged(epoch, float("nan")) from None
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(epoch, value)
            epoch_loss += value * len(batch)
            grad[frozen] = 0.0
            velocity = config.momentum * velocity - config.learning_rate * grad
            vec = vec + velocity
            vec[2] = max(vec[2], config.min_temperature)
            vec[3] = max(vec[3], config.min_temperature)
            vec[4], vec[5] = project_mixing(vec[4], vec[5])
            params = params.with_vector(vec)
        mean_loss = epoch_loss / len(samples)
        if not np.isfinite(mean_loss):
            raise TrainingDiverged(epoch, mean_loss)
        trace.append(mean_loss)
        log.debug("epoch %d loss %.6f", epoch, mean_loss)

    params.validate()
    return TrainResult(params, trace)


# -- serialization -----------------------------------------------------------

MAGIC = b"KVTP"
FORMAT_VERSION = 1


def save_params(params: PredictorParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<6d", *(getattr(params, n) for n in SCALAR_FIELDS)))
        if params.adapter is None:
            fh.write(struct.pack("<B", 0))
        else:
            rows, cols = params.adapter.shape
            fh.write(struct.pack("<BQQ", 1, rows, cols))
            fh.write(params.adapter.astype("<f8").tobytes(order="C"))


def load_params(path) -> PredictorParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a params file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    scalars = struct.unpack_from("<6d", raw, 8)
    offset = 8 + 48
    (present,) = struct.unpack_from("<B", raw, offset)
    offset += 1
    adapter = None
    if present:
        rows, cols = struct.unpack_from("<QQ", raw, offset)
        offset += 16
        if len(raw) != offset + 8 * rows * cols:
            raise ValueError(f"{path}: truncated adapter")
        adapter = np.frombuffer(raw, dtype="<f8", offset=offset, count=rows * cols).reshape(rows, cols).copy()
    elif len(raw) != offset:
        raise ValueError(f"{path}: trailing bytes")
    return PredictorParams(*scalars, adapter=adapter)


def export_text(params: PredictorParams) -> str:
    lines = [f"{n} = {getattr(params, n)!r}" for n in SCALAR_FIELDS]
    if params.adapter is None:
        lines.append("adapter = none")
    else:
        lines.append(f"adapter_shape = {params.adapter.shape[0]}x{params.adapter.shape[1]}")
        for i, row in enumerate(params.adapter):
            lines.append(f"adapter[{i}] = " + ", ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
