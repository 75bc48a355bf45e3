"""
Communication efficiency and task metrics.

IEI: mean Shannon entropy (nats) of outgoing payloads, the distribution over a
payload's entries being |m_i| / sum_j |m_j|. SEI: mean pairwise cosine
similarity between agents' time-averaged payloads. Both come with gradients
w.r.t. the payloads so training can use them as regularizers.
"""

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from dagcomm.errors import ContractError, NumericError


@dataclass
class MetricsRecord:
    epoch: int
    success_rate: float
    avg_steps: float
    c_comm: float
    iei: float
    sei: float
    loss: float
    iei_per_success: float = 0.0

    # column order of metrics.csv
    COLUMNS = ("epoch", "success_rate", "avg_steps", "c_comm", "iei", "sei", "loss")

    def __post_init__(self):
        for name in self.COLUMNS[1:] + ("iei_per_success",):
            if not math.isfinite(getattr(self, name)):
                raise NumericError(f"metric '{name}' is not finite", term=name)
        if not 0.0 <= self.success_rate <= 1.0:
            raise ContractError(f"success rate {self.success_rate} outside [0, 1]")
        if self.iei < 0:
            raise ContractError(f"IEI must be non-negative, got {self.iei}")
        if not -1.0 - 1e-9 <= self.sei <= 1.0 + 1e-9:
            raise ContractError(f"SEI {self.sei} outside [-1, 1]")

    def row(self) -> dict:
        return {name: getattr(self, name) for name in self.COLUMNS}

    def to_dict(self) -> dict:
        return asdict(self)


def _distribution(payload: np.ndarray):
    mags = np.abs(np.asarray(payload, dtype=np.float64))
    total = mags.sum(axis=-1, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    return mags / safe, total


def message_entropy(payload) -> float:
    """Entropy (nats) of one payload's normalized absolute values; 0 for an all-zero payload."""
    payload = np.asarray(payload, dtype=np.float64)
    if payload.size == 0:
        raise ContractError("entropy of an empty payload")
    return float(message_entropies(payload.reshape(1, -1))[0])


def message_entropies(payloads: np.ndarray) -> np.ndarray:
    """Row-wise message_entropy of an (N, M) payload matrix."""
    p, _ = _distribution(payloads)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def message_entropy_grad(payloads: np.ndarray) -> np.ndarray:
    """
    d H / d m for every row of an (N, M) matrix: sign(m_k) * (-ln p_k - H) / sum|m|.
    Entries that are exactly zero (where |.| has no derivative) get 0.
    """
    payloads = np.asarray(payloads, dtype=np.float64)
    p, total = _distribution(payloads)
    H = message_entropies(payloads)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        log_p = np.log(np.where(p > 0, p, 1.0))
    safe = np.where(total > 0, total, 1.0)
    grad = np.sign(payloads) * (-log_p - H) / safe
    return np.where((payloads != 0) & (total > 0), grad, 0.0)


def iei(messages) -> float:
    """Information entropy efficiency index: mean entropy over all given payloads."""
    messages = np.asarray(messages, dtype=np.float64)
    if messages.ndim != 2 or messages.shape[0] == 0:
        raise ContractError("IEI needs at least one message")
    return float(message_entropies(messages).mean())


def iei_grad(messages) -> np.ndarray:
    messages = np.asarray(messages, dtype=np.float64)
    return message_entropy_grad(messages) / messages.shape[0]


def _cosine_pairs(means: np.ndarray):
    norms = np.linalg.norm(means, axis=1)
    k = means.shape[0]
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    return norms, pairs


def sei(agent_means) -> float:
    """Specialization efficiency index: mean cosine similarity over unordered agent pairs."""
    means = np.asarray(agent_means, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] < 2:
        raise ContractError("SEI needs payloads from at least 2 agents")
    norms, pairs = _cosine_pairs(means)
    total = 0.0
    for i, j in pairs:
        if norms[i] > 0 and norms[j] > 0:
            total += float(means[i] @ means[j]) / (norms[i] * norms[j])
    return total / len(pairs)


def sei_grad(agent_means) -> np.ndarray:
    """d SEI / d mean payload of every agent; zero vectors get zero gradient."""
    means = np.asarray(agent_means, dtype=np.float64)
    norms, pairs = _cosine_pairs(means)
    grad = np.zeros_like(means)
    for i, j in pairs:
        if norms[i] == 0 or norms[j] == 0:
            continue
        cos = float(means[i] @ means[j]) / (norms[i] * norms[j])
        grad[i] += means[j] / (norms[i] * norms[j]) - cos * means[i] / norms[i] ** 2
        grad[j] += means[i] / (norms[i] * norms[j]) - cos * means[j] / norms[j] ** 2
    return grad / len(pairs)


def success_rate(successes: Sequence[bool]) -> float:
    if len(successes) == 0:
        raise ContractError("success rate needs at least one episode")
    return float(np.mean(np.asarray(successes, dtype=np.float64)))


def avg_steps(lengths: Sequence[int], successes: Optional[Sequence[bool]] = None,
              max_steps: Optional[int] = None) -> float:
    """Mean episode length; with successes and max_steps given, failures count as max_steps."""
    if len(lengths) == 0:
        raise ContractError("average steps needs at least one episode")
    lengths = np.asarray(lengths, dtype=np.float64)
    if successes is not None and max_steps is not None:
        lengths = np.where(np.asarray(successes, dtype=bool), lengths, float(max_steps))
    return float(lengths.mean())


def convergence_epoch(curve: Sequence[float], window: int = 20, threshold: float = 0.95) -> Optional[int]:
    """
    First (1-based) epoch whose trailing window-epoch moving average reaches
    threshold times the moving average of the final window; None if the curve is
    shorter than the window or never gets there.
    """
    curve = np.asarray(curve, dtype=np.float64)
    if window <= 0 or curve.shape[0] < window:
        return None
    moving = np.convolve(curve, np.ones(window) / window, mode="valid")
    target = threshold * moving[-1]
    hits = np.flatnonzero(moving >= target - 1e-12)
    if hits.size == 0:
        return None
    return int(hits[0]) + window


def iei_per_success(iei_value: float, rate: float) -> float:
    """IEI divided by success rate; 0 when nothing succeeded."""
    return iei_value / rate if rate > 0 else 0.0
