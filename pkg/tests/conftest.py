import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-3) -> np.ndarray:
    """Element-wise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps near-zero components from dividing rounding noise by
    another rounding-sized value; central differences at h = 1e-6 carry an
    absolute error around 1e-9 times the function scale.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_predictor_case(rng: np.random.Generator, max_frames: int = 16, max_dim: int = 8):
    """Random parameters and sample with theta, phi kept away from the simplex edge."""
    from kvtp.predictor import EmbeddingSequence, PredictorParams, TrainingSample

    n = int(rng.integers(2, max_frames + 1))
    d = int(rng.integers(2, max_dim + 1))
    params = PredictorParams(
        a=float(rng.uniform(0.5, 3.0)),
        b=float(rng.uniform(-1.0, 1.0)),
        tau_local=float(rng.uniform(0.3, 2.0)),
        tau_global=float(rng.uniform(0.3, 2.0)),
        theta=float(rng.uniform(0.05, 0.45)),
        phi=float(rng.uniform(0.05, 0.45)),
        adapter=np.eye(d) + 0.3 * rng.standard_normal((d, d)),
    )
    frames = rng.standard_normal((n, d))
    query = rng.standard_normal(d)
    labels = rng.integers(0, 6, n).astype(float)
    if np.all(labels == labels[0]):
        labels[0] = (labels[0] + 3) % 6
    sample = TrainingSample(EmbeddingSequence(frames, int(rng.integers(1, n + 1))), query, labels)
    return params, sample


def gradient_errors(params, sample, floor: float = 1e-4) -> np.ndarray:
    from kvtp.predictor import loss, loss_gradients

    vec = params.to_vector()
    analytic = loss_gradients(params, sample).to_vector()
    numeric = central_difference(lambda v: loss(params.with_vector(v), sample), vec)
    return relative_error(analytic, numeric, floor)


_CRITERIA: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the summary prints them after the run."""

    def report(number: int, title: str, passed: bool, detail: str) -> None:
        _CRITERIA.append((number, title, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")

    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")
