"""Reliability-aware softmax gate over the modality experts.

Modality order everywhere in this module is (visual, acoustic, text), the
order of the gate weight vector.  One gate is shared by valence and arousal.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .gbdt import ExpertPrediction

log = logging.getLogger(__name__)

GATE_ORDER = ("visual", "acoustic", "text")
LABEL_RANGES = ((-1.0, 1.0), (0.0, 1.0))


class GateTrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GateParams:
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64)
        if W.shape != (3, 3) or b.shape != (3,):
            raise ValueError("gate params must be W (3, 3) and b (3,)")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite gate parameters")
        W.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @classmethod
    def zeros(cls) -> "GateParams":
        return cls(np.zeros((3, 3)), np.zeros(3))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b])

    @classmethod
    def from_flat(cls, theta) -> "GateParams":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta[:9].reshape(3, 3), theta[9:])

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "b": self.b.tolist(), "order": list(GATE_ORDER)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GateParams":
        return cls(np.asarray(d["W"]), np.asarray(d["b"]))


@dataclass(frozen=True)
class VAEstimate:
    valence: float
    arousal: float
    per_modality: tuple[ExpertPrediction, ...]
    weights: np.ndarray
    calibrated: bool = False


def _logits(G, params: GateParams):
    G = np.asarray(G, dtype=np.float64)
    if not np.all(np.isfinite(G)):
        raise ValueError("non-finite reliability descriptor")
    return G @ params.W.T + params.b


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def gate_forward(G, params: GateParams) -> np.ndarray:
    """w = softmax(G W^T + b); G may be (3,) or (N, 3)."""
    return softmax(_logits(G, params))


def entropy(w, axis=-1) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, w * np.log(w), 0.0)
    return -terms.sum(axis=axis)


def gate_confidence(w) -> np.ndarray:
    """1 - H(w)/log 3: 1 for a one-hot gate, 0 for a uniform one."""
    return 1.0 - entropy(w) / np.log(3.0)


def _as_pred_array(experts) -> np.ndarray:
    if len(experts) and isinstance(experts[0], ExpertPrediction):
        by_mod = {e.modality: e for e in experts}
        return np.array([[by_mod[m].valence_hat, by_mod[m].arousal_hat] for m in GATE_ORDER])
    return np.asarray(experts, dtype=np.float64)


def fuse(experts, w) -> VAEstimate:
    """Convex combination of expert (valence, arousal) predictions.

    ``experts`` is three ExpertPrediction objects or a (3, 2) array in gate order.
    """
    P = _as_pred_array(experts)
    w = np.asarray(w, dtype=np.float64)
    if P.shape != (3, 2) or w.shape != (3,):
        raise ValueError("fuse expects (3, 2) expert predictions and 3 weights")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("gate weights must lie on the simplex")
    v, a = w @ P
    per_mod = tuple(ExpertPrediction(float(P[i, 0]), float(P[i, 1]), m)
                    for i, m in enumerate(GATE_ORDER))
    return VAEstimate(float(v), float(a), per_mod, w.copy())


def fuse_batch(P, w) -> np.ndarray:
    """(N, 3, 2) predictions and (N, 3) weights -> (N, 2) fused."""
    return np.einsum("nm,nmk->nk", w, P)


# ---------------------------------------------------------------------------
# gate training


def gate_objective(params: GateParams, P, G, Y, lam_ent=0.0):
    """Objective and analytic gradient.

    J = 0.5 * (MSE_valence + MSE_arousal) - lam_ent * mean H(w)
    Returns (J, dJ/dtheta over the flattened (W, b), mse).
    """
    P = np.asarray(P, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = P.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):
        return _objective_terms(params, P, G, Y, lam_ent, n)


def _objective_terms(params, P, G, Y, lam_ent, n):
    z = _logits(G, params)
    logw = z - logsumexp(z, axis=1, keepdims=True)
    w = np.exp(logw)
    yhat = fuse_batch(P, w)
    err = yhat - Y
    mse = 0.5 * float(np.mean(np.sum(err * err, axis=1)))
    H = -np.sum(w * logw, axis=1)
    J = mse - lam_ent * float(H.mean())

    dw = np.einsum("nk,nmk->nm", err, P) / n
    dw += lam_ent * (logw + 1.0) / n
    dz = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
    dW = dz.T @ G
    db = dz.sum(axis=0)
    return J, np.concatenate([dW.ravel(), db]), mse


@dataclass
class GateTrainResult:
    params: GateParams
    history: list = field(default_factory=list)
    best_step: int = 0


def stack_gate_dataset(dataset: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(experts, G, AffectTarget) triples -> (P, G, Y) arrays."""
    if not dataset:
        raise ValueError("empty gate dataset")
    P = np.stack([_as_pred_array(e) for e, _, _ in dataset])
    G = np.stack([np.asarray(g, dtype=np.float64) for _, g, _ in dataset])
    Y = np.array([[t.valence, t.arousal] for _, _, t in dataset])
    return P, G, Y


def train_gate(P, G, Y, params0: GateParams | None = None, lam_ent=0.01,
               steps=2000, lr=0.05, momentum=0.9, val=None) -> GateTrainResult:
    """Momentum gradient descent on the gate objective.

    ``val = (P_val, G_val, Y_val)`` selects the returned parameters by
    validation MSE; without it the training objective is used.
    """
    P = np.asarray(P, dtype=np.float64)
    if P.shape[0] == 0:
        raise ValueError("empty gate dataset")
    theta = (params0 or GateParams.zeros()).flat()
    vel = np.zeros_like(theta)
    history = []
    best_theta, best_score, best_step = theta.copy(), np.inf, 0
    for step in range(steps + 1):
        params = GateParams.from_flat(theta)
        J, grad, mse = gate_objective(params, P, G, Y, lam_ent)
        if not (np.isfinite(J) and np.all(np.isfinite(grad))):
            raise GateTrainingError(
                f"gate objective diverged at step {step}: J={J}, |grad|={np.linalg.norm(grad)}, "
                f"last finite theta={best_theta.tolist()}"
            )
        score = gate_objective(params, *val, 0.0)[2] if val is not None else J
        history.append((J, score))
        if score < best_score:
            best_theta, best_score, best_step = theta.copy(), score, step
        if step == steps:
            break
        vel = momentum * vel - lr * grad
        theta = theta + vel
        if not np.all(np.isfinite(theta)):
            raise GateTrainingError(f"gate parameters became non-finite at step {step}")
    log.debug("gate training: best step %d score %.6g", best_step, best_score)
    return GateTrainResult(GateParams.from_flat(best_theta), history, best_step)


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class TargetCalibration:
    slope: float = 1.0
    intercept: float = 0.0
    lo: float = -np.inf
    hi: float = np.inf

    def apply(self, x):
        return np.clip(self.slope * np.asarray(x, dtype=np.float64) + self.intercept,
                       self.lo, self.hi)


@dataclass(frozen=True)
class Calibration:
    valence: TargetCalibration
    arousal: TargetCalibration
    status: str = "ok"

    def apply(self, va) -> np.ndarray:
        va = np.asarray(va, dtype=np.float64)
        return np.stack([self.valence.apply(va[..., 0]), self.arousal.apply(va[..., 1])], axis=-1)

    def apply_estimate(self, est: VAEstimate) -> VAEstimate:
        v, a = self.apply([est.valence, est.arousal])
        return VAEstimate(float(v), float(a), est.per_modality, est.weights, calibrated=True)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "valence": [self.valence.slope, self.valence.intercept],
            "arousal": [self.arousal.slope, self.arousal.intercept],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Calibration":
        (vs, vi), (as_, ai) = d["valence"], d["arousal"]
        return cls(TargetCalibration(vs, vi, *LABEL_RANGES[0]),
                   TargetCalibration(as_, ai, *LABEL_RANGES[1]), d.get("status", "ok"))

    @classmethod
    def identity(cls) -> "Calibration":
        return cls(TargetCalibration(1.0, 0.0, *LABEL_RANGES[0]),
                   TargetCalibration(1.0, 0.0, *LABEL_RANGES[1]))


def _fit_target(x, t, lo, hi):
    sx = x.std()
    if not sx > 1e-12:
        return TargetCalibration(1.0, 0.0, lo, hi), False
    a, b = np.polyfit(x, t, 1)
    fitted = a * x + b
    sf = fitted.std()
    scale = t.std() / sf if sf > 0 else 1.0
    # variance match around the fitted mean, folded into one affine map
    slope = a * scale
    intercept = fitted.mean() + scale * (b - fitted.mean())
    return TargetCalibration(float(slope), float(intercept), lo, hi), True


def calibrate(raw, targets) -> Calibration:
    """Per-target least-squares affine fit, then variance matching, then clamp."""
    if len(raw) and isinstance(raw[0], VAEstimate):
        raw = [[e.valence, e.arousal] for e in raw]
    if len(targets) and hasattr(targets[0], "valence"):
        targets = [[t.valence, t.arousal] for t in targets]
    X = np.asarray(raw, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 2:
        raise ValueError("calibrate expects aligned (N, 2) predictions and targets")
    if X.shape[0] < 10:
        raise ValueError("calibration needs at least 10 samples")
    fits = [_fit_target(X[:, k], Y[:, k], *LABEL_RANGES[k]) for k in range(2)]
    status = "ok"
    if not all(ok for _, ok in fits):
        status = "degenerate"
        warnings.warn("zero prediction variance; identity calibration used", RuntimeWarning)
    return Calibration(fits[0][0], fits[1][0], status)


# ---------------------------------------------------------------------------
# degradation augmentation


def degrade_modality(features: Mapping[str, np.ndarray], G, modality: str | None):
    """Zero one modality's features and its reliability entry."""
    if modality is not None and modality not in GATE_ORDER:
        raise ValueError(f"unknown modality {modality!r}")
    G = np.array(G, dtype=np.float64)
    out = {m: np.array(x, dtype=np.float64) for m, x in features.items()}
    if modality is None:
        return out, G
    out[modality] = np.zeros_like(out[modality])
    G[..., GATE_ORDER.index(modality)] = 0.0
    return out, G
