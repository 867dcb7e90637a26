"""MC-dropout predictive distributions and the helper relevance score.

The relevance of helper ``j`` to client ``k`` is the convex combination

    value = (1 - mu_k) * entropy_term + mu_k * accuracy_term

where ``entropy_term = 1 - mean_entropy / ln C`` is computed from helper
``j``'s MC-dropout predictions on ``k``'s unlabeled data and
``accuracy_term`` is ``j``'s deterministic accuracy on ``k``'s labeled data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ClientDataset
from .errors import DomainError
from .nn import DETERMINISTIC, DropoutSample, EPS, NetSpec, forward
from .rng import derive_seed

CORR_MODES = ("en+ta", "en", "ta", "random")


def entropy(probs: np.ndarray) -> np.ndarray | float:
    """Shannon entropy in nats of one distribution or of each row.

    Classes are accumulated in ascending order so a scalar re-evaluation
    reproduces the result bit for bit.
    """
    P = np.asarray(probs, dtype=np.float64)
    single = P.ndim == 1
    P2 = P[None, :] if single else P
    h = np.zeros(P2.shape[0])
    for c in range(P2.shape[1]):
        p = P2[:, c]
        h = h - p * np.log(np.maximum(p, EPS))
    h = np.clip(h, 0.0, math.log(P2.shape[1]))
    return float(h[0]) if single else h


@dataclass(frozen=True)
class PredictiveDistribution:
    probs: np.ndarray
    entropy: float

    @classmethod
    def from_probs(cls, probs) -> "PredictiveDistribution":
        p = np.asarray(probs, dtype=np.float64)
        return cls(p, entropy(p))


def sample_seed(seed: int, t: int) -> int:
    return derive_seed(seed, "mc-sample", t)


def mc_probs(spec: NetSpec, params: np.ndarray, X, T: int, seed: int) -> np.ndarray:
    """Mean of ``T`` dropout-sampled softmax outputs, one row per input row."""
    if T < 1:
        raise DomainError("MC sample count T must be at least 1")
    acc = None
    for t in range(T):
        p = forward(spec, params, X, DropoutSample(sample_seed(seed, t)))
        acc = p if acc is None else acc + p
    return acc / T


def mc_predict(spec: NetSpec, params: np.ndarray, x, T: int, seed: int) -> PredictiveDistribution:
    """Predictive distribution of a single input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DomainError("mc_predict takes one feature vector; use mc_probs for batches")
    return PredictiveDistribution.from_probs(mc_probs(spec, params, x, T, seed))


def dataset_uncertainty(spec: NetSpec, params: np.ndarray, X_unlabeled, T: int, seed: int) -> float:
    """Summed predictive entropy of a helper over a client's unlabeled set."""
    X = np.asarray(X_unlabeled, dtype=np.float64)
    if X.shape[0] == 0:
        return 0.0
    return float(np.sum(entropy(mc_probs(spec, params, X, T, seed))))


def normalized_residue(total_entropy: float, set_size: int, class_count: int) -> float:
    """``1 - (total_entropy / set_size) / ln C``, clamped to [0, 1]."""
    if set_size < 1:
        raise DomainError("set_size must be at least 1")
    value = 1.0 - (total_entropy / set_size) / math.log(class_count)
    return min(1.0, max(0.0, value))


def helper_accuracy(spec: NetSpec, params: np.ndarray, X_labeled, y_labeled) -> float:
    y = np.asarray(y_labeled)
    if y.shape[0] == 0:
        return 0.0
    pred = np.argmax(forward(spec, params, X_labeled, DETERMINISTIC), axis=1)
    return float(np.mean(pred == y))


@dataclass(frozen=True)
class CorrScore:
    value: float
    entropy_term: float
    accuracy_term: float
    evaluated_round: int = 0
    mode: str = "en+ta"


def combine(entropy_term: float, accuracy_term: float, labeled_ratio: float, mode: str = "en+ta") -> float:
    if mode == "en+ta":
        return (1.0 - labeled_ratio) * entropy_term + labeled_ratio * accuracy_term
    if mode == "en":
        return entropy_term
    if mode == "ta":
        return accuracy_term
    raise DomainError(f"corr mode {mode!r} has no closed form")


def score_from_parts(total_entropy: float, n_unlabeled: int, accuracy: float, labeled_ratio: float,
                     class_count: int, mode: str = "en+ta", evaluated_round: int = 0) -> CorrScore:
    en = normalized_residue(total_entropy, n_unlabeled, class_count) if n_unlabeled else 0.0
    return CorrScore(combine(en, accuracy, labeled_ratio, mode), en, accuracy, evaluated_round, mode)


def corr(spec: NetSpec, client: ClientDataset, helper_params: np.ndarray, T: int, seed: int,
         mode: str = "en+ta", evaluated_round: int = 0) -> CorrScore:
    """Relevance of a helper model to ``client``'s data."""
    total = dataset_uncertainty(spec, helper_params, client.unlabeled_x, T, seed)
    acc = helper_accuracy(spec, helper_params, client.labeled_x, client.labeled_y)
    return score_from_parts(total, client.n_unlabeled, acc, client.labeled_ratio,
                            client.class_count, mode, evaluated_round)
