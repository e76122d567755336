"""Exact O(n^2) t-SNE: perplexity calibration, KL objective and its descent."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

_TINY = np.finfo(np.float64).tiny
_EPS = 1e-12


class PerplexityError(RuntimeError):
    """Bisection for a row's Gaussian bandwidth did not converge."""

    def __init__(self, row: int, entropy: float, target: float):
        super().__init__(f"row {row}: entropy {entropy:.6f} bits did not reach target {target:.6f} bits")
        self.row = row


@dataclass
class TsneConfig:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    exaggeration: float = 4.0
    exaggeration_iters: int = 100
    initial_momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    seed: int = 0
    adaptive_gains: bool = True
    min_gain: float = 0.01

    def validate(self, n: int | None = None) -> None:
        if self.perplexity <= 1.0:
            raise ValueError("perplexity must be > 1")
        if n is not None and self.perplexity >= n:
            raise ValueError(f"perplexity {self.perplexity} must be below the point count {n}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.exaggeration_iters < self.iterations:
            raise ValueError("exaggeration duration must be shorter than the run")


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_history: list[float] = field(default_factory=list)


def squared_distances(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    sq = np.einsum("ij,ij->i", X, X)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_distribution(d: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Gaussian conditional over neighbor distances ``d`` and its entropy in bits."""
    shifted = d - d.min()
    w = np.exp(-beta * shifted)
    z = w.sum()
    p = w / z
    entropy_nats = np.log(z) + beta * float(np.dot(shifted, p))
    return p, entropy_nats / np.log(2.0)


def conditional_probabilities(
    D: np.ndarray,
    perplexity: float,
    tol: float = 1e-6,
    max_steps: int = 200,
) -> tuple[np.ndarray, np.ndarray]:
    """Row-conditional p_{j|i} with each row's entropy calibrated to log2(perplexity).

    ``D`` holds squared distances. Returns (conditional matrix, per-row
    precisions beta = 1 / (2 sigma^2)). Rows whose neighbors are all
    equidistant are uniform for every bandwidth and are not bisected.
    """
    n = D.shape[0]
    target = np.log2(perplexity)
    P = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        d = np.delete(D[i], i)
        # relative test: rounding makes "equal" distances differ in the last bits
        if np.ptp(d) <= 1e-10 * max(float(d.max()), _TINY):
            P[i, np.arange(n) != i] = 1.0 / (n - 1)
            betas[i] = 0.0
            continue
        # bandwidth scaled to the row's distance spread keeps the start sane
        beta = 1.0 / max(np.median(d - d.min()), _EPS)
        lo, hi = 0.0, np.inf
        for _ in range(max_steps):
            p, h = _row_distribution(d, beta)
            diff = h - target
            if abs(diff) <= tol:
                break
            if diff > 0:  # too flat: sharpen
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        else:
            raise PerplexityError(i, h, target)
        P[i, np.arange(n) != i] = p
        betas[i] = beta
    return P, betas


def row_entropies(P_cond: np.ndarray) -> np.ndarray:
    """Shannon entropy (bits) of each row of a conditional matrix."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P_cond > 0, -P_cond * np.log2(P_cond), 0.0)
    return terms.sum(axis=1)


def pairwise_affinities(X: np.ndarray, perplexity: float = 30.0, tol: float = 1e-6) -> np.ndarray:
    """Symmetric joint affinities p_ij = (p_{j|i} + p_{i|j}) / (2n)."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    if not 1.0 < perplexity < n:
        raise ValueError(f"perplexity must lie in (1, {n}), got {perplexity}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature vectors must be finite")
    P_cond, _ = conditional_probabilities(squared_distances(X), perplexity, tol)
    P = (P_cond + P_cond.T) / (2.0 * n)
    np.fill_diagonal(P, 0.0)
    return P


def _student_t(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    Q = np.maximum(num / max(num.sum(), _TINY), _TINY)
    np.fill_diagonal(Q, 0.0)
    return num, Q


def low_dim_affinities(Y: np.ndarray) -> np.ndarray:
    return _student_t(np.asarray(Y, dtype=np.float64))[1]


def kl_divergence(P: np.ndarray, Y: np.ndarray) -> float:
    """KL(P || Q) summed over off-diagonal pairs with p_ij > 0."""
    _, Q = _student_t(np.asarray(Y, dtype=np.float64))
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def kl_gradient(P: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """dKL/dy_i = 4 sum_j (p_ij - q_ij)(y_i - y_j)(1 + |y_i - y_j|^2)^-1."""
    Y = np.asarray(Y, dtype=np.float64)
    num, Q = _student_t(Y)
    W = (P - Q) * num
    return 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y


def tsne_embed(P: np.ndarray, config: TsneConfig | None = None, dims: int = 2) -> TsneResult:
    """Gradient descent on KL(P || Q) with momentum and early exaggeration.

    The start is a seeded N(0, 1e-4^2) cloud. ``kl_history`` records the KL
    against the un-exaggerated P after every update.
    """
    config = config or TsneConfig()
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    config.validate()
    rng = np.random.default_rng(config.seed)
    Y = rng.normal(0.0, 1e-4, size=(n, dims))
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    history = []
    for it in range(config.iterations):
        P_eff = P * config.exaggeration if it < config.exaggeration_iters else P
        grad = kl_gradient(P_eff, Y)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite t-SNE gradient at iteration {it}")
        momentum = config.initial_momentum if it < config.momentum_switch else config.final_momentum
        if config.adaptive_gains:
            same_sign = np.sign(grad) == np.sign(update)
            gains = np.where(same_sign, gains * 0.8, gains + 0.2)
            np.maximum(gains, config.min_gain, out=gains)
        update = momentum * update - config.learning_rate * gains * grad
        Y = Y + update
        Y -= Y.mean(axis=0)
        history.append(kl_divergence(P, Y))
        if it % 100 == 0:
            logger.debug("t-SNE iteration %d: KL %.6f", it, history[-1])
    return TsneResult(Y, history)
