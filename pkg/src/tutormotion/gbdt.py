"""Gradient-boosted regression trees with a pseudo-Huber objective.

One single-output model is trained per (modality, target) pair.  Split
search is exact and greedy over sorted feature values, with
Hessian-weighted gain and leaf values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

MODALITIES = ("text", "visual", "acoustic")
TARGETS = ("valence", "arousal")
DEFAULT_DIMS = {"text": 600, "visual": 1426, "acoustic": 148}
DEFAULT_DELTAS = {"valence": 1.0, "arousal": 0.5}


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    modality: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("feature vector must be a non-empty 1-D array")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature vector contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class AffectTarget:
    valence: float
    arousal: float

    def __post_init__(self):
        if not -1.0 <= self.valence <= 1.0:
            raise ValueError(f"valence {self.valence} outside [-1, 1]")
        if not 0.0 <= self.arousal <= 1.0:
            raise ValueError(f"arousal {self.arousal} outside [0, 1]")


@dataclass(frozen=True)
class ExpertPrediction:
    """Raw expert output. Deliberately never clipped."""

    valence_hat: float
    arousal_hat: float
    modality: str


# ---------------------------------------------------------------------------
# loss


def _check_delta(delta):
    if not np.all(np.asarray(delta) > 0):
        raise ValueError(f"delta must be > 0, got {delta}")


def pseudo_huber_loss(residual, delta=1.0):
    """delta^2 * (sqrt(1 + (r/delta)^2) - 1), elementwise."""
    _check_delta(delta)
    r = np.asarray(residual, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite residual")
    z = r / delta
    # z^2 / (sqrt(1+z^2) + 1) avoids cancellation for small residuals
    out = delta * delta * (z * z) / (np.sqrt(1.0 + z * z) + 1.0)
    return out if out.ndim else float(out)


def pseudo_huber_grad(residual, delta=1.0):
    """Derivative of the loss with respect to the residual; bounded by delta."""
    _check_delta(delta)
    r = np.asarray(residual, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite residual")
    out = r / np.sqrt(1.0 + (r / delta) ** 2)
    return out if out.ndim else float(out)


def pseudo_huber_hess(residual, delta=1.0):
    _check_delta(delta)
    r = np.asarray(residual, dtype=np.float64)
    out = (1.0 + (r / delta) ** 2) ** -1.5
    return out if out.ndim else float(out)


def _objective(loss: str, delta: float):
    """Return (loss, grad, hess) callables of the residual pred - y."""
    if loss == "pseudo_huber":
        return (
            lambda r: pseudo_huber_loss(r, delta),
            lambda r: pseudo_huber_grad(r, delta),
            lambda r: pseudo_huber_hess(r, delta),
        )
    if loss == "squared":
        return (lambda r: 0.5 * r * r, lambda r: r, lambda r: np.ones_like(r))
    raise ValueError(f"unknown loss {loss!r}")


# ---------------------------------------------------------------------------
# trees


@dataclass(frozen=True)
class RegressionTree:
    """Flat array tree. A node is a leaf when ``feature[i] == -1``.

    Samples go left when ``x[feature] < threshold``.
    """

    feature: tuple[int, ...]
    threshold: tuple[float, ...]
    left: tuple[int, ...]
    right: tuple[int, ...]
    value: tuple[float, ...]

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index for every row of X."""
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = feature[node] >= 0
        while active.any():
            r = rows[active]
            n = node[r]
            go_left = X[r, feature[n]] < threshold[n]
            node[r] = np.where(go_left, left[n], right[n])
            active = feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.value)[self.apply(X)]

    def scaled(self, factor: float) -> "RegressionTree":
        return replace(self, value=tuple(v * factor for v in self.value))

    def to_dict(self) -> dict:
        return {
            "feature": list(self.feature),
            "threshold": list(self.threshold),
            "left": list(self.left),
            "right": list(self.right),
            "value": list(self.value),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RegressionTree":
        return cls(
            feature=tuple(int(v) for v in d["feature"]),
            threshold=tuple(float(v) for v in d["threshold"]),
            left=tuple(int(v) for v in d["left"]),
            right=tuple(int(v) for v in d["right"]),
            value=tuple(float(v) for v in d["value"]),
        )


GAIN_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float


def _leaf_weight(G, H, reg_lambda):
    return -G / (H + reg_lambda)


def split_gain(GL, HL, GR, HR, reg_lambda):
    """Structure-score improvement of splitting a node into (L, R)."""
    G, H = GL + GR, HL + HR
    return 0.5 * (GL * GL / (HL + reg_lambda) + GR * GR / (HR + reg_lambda)
                  - G * G / (H + reg_lambda))


def find_best_split(X, g, h, features, reg_lambda=1.0, min_child_weight=1.0,
                    min_split_gain=0.0):
    """Exact greedy split search over the given feature columns.

    Ties on gain resolve to the lowest feature index, then the lowest
    threshold.  Returns None when no split has gain above ``min_split_gain``.
    """
    n = X.shape[0]
    if n < 2 or len(features) == 0:
        return None
    features = np.sort(np.asarray(features, dtype=np.int64))
    Xn = X[:, features]
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    gs = g[order]
    hs = h[order]
    G = g.sum()
    H = h.sum()
    GL = np.cumsum(gs, axis=0)[:-1]
    HL = np.cumsum(hs, axis=0)[:-1]
    GR = G - GL
    HR = H - HL
    gain = split_gain(GL, HL, GR, HR, reg_lambda)
    valid = (xs[1:] > xs[:-1]) & (HL >= min_child_weight) & (HR >= min_child_weight)
    gain = np.where(valid, gain, -np.inf)
    # feature-major flattening: argmax picks lowest feature, then lowest position
    flat = gain.T.ravel()
    top = flat.max()
    # the same partition reached through another feature can differ in the
    # last bits of its prefix sums, so near-equal gains count as ties
    best = int(np.argmax(flat >= top - GAIN_TIE_RTOL * max(1.0, abs(top))))
    best_gain = flat[best]
    if not best_gain > min_split_gain:
        return None
    col, pos = divmod(best, n - 1)
    thr = 0.5 * (xs[pos, col] + xs[pos + 1, col])
    if not thr > xs[pos, col]:
        thr = xs[pos + 1, col]
    return Split(int(features[col]), float(thr), float(best_gain))


def build_tree(X, g, h, features, max_depth=6, reg_lambda=1.0,
               min_child_weight=1.0, min_split_gain=0.0) -> RegressionTree:
    feat, thr, left, right, value = [], [], [], [], []

    def grow(idx, depth):
        node = len(feat)
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(_leaf_weight(g[idx].sum(), h[idx].sum(), reg_lambda)))
        if depth >= max_depth:
            return node
        split = find_best_split(X[idx], g[idx], h[idx], features, reg_lambda,
                                min_child_weight, min_split_gain)
        if split is None:
            return node
        mask = X[idx, split.feature] < split.threshold
        feat[node] = split.feature
        thr[node] = split.threshold
        value[node] = 0.0
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(X.shape[0]), 0)
    return RegressionTree(tuple(feat), tuple(thr), tuple(left), tuple(right), tuple(value))


# ---------------------------------------------------------------------------
# boosting


@dataclass(frozen=True)
class BoostConfig:
    n_rounds: int = 500
    learning_rate: float = 0.05
    max_depth: int = 6
    patience: int = 30
    subsample: float = 0.8
    colsample: float = 0.8
    reg_lambda: float = 1.0
    min_child_weight: float = 1.0
    min_split_gain: float = 0.0
    delta: float = 1.0
    loss: str = "pseudo_huber"

    def __post_init__(self):
        if self.n_rounds < 0 or self.max_depth < 0 or self.patience < 1:
            raise ValueError("n_rounds/max_depth must be >= 0 and patience >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 < self.subsample <= 1 and 0 < self.colsample <= 1):
            raise ValueError("subsample fractions must lie in (0, 1]")
        _check_delta(self.delta)


@dataclass(frozen=True)
class BoostedModel:
    trees: tuple[RegressionTree, ...]
    learning_rate: float
    base_score: float
    delta: float
    best_round: int
    n_features: int
    loss: str = "pseudo_huber"
    seed: int | None = None
    train_loss: tuple[float, ...] = field(default=(), compare=False)
    val_loss: tuple[float, ...] = field(default=(), compare=False)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite feature values")
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees[: self.best_round]:
            out += self.learning_rate * tree.predict(X)
        return out

    def to_dict(self) -> dict:
        return {
            "trees": [t.to_dict() for t in self.trees],
            "learning_rate": self.learning_rate,
            "base_score": self.base_score,
            "delta": self.delta,
            "best_round": self.best_round,
            "n_features": self.n_features,
            "loss": self.loss,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BoostedModel":
        return cls(
            trees=tuple(RegressionTree.from_dict(t) for t in d["trees"]),
            learning_rate=float(d["learning_rate"]),
            base_score=float(d["base_score"]),
            delta=float(d["delta"]),
            best_round=int(d["best_round"]),
            n_features=int(d["n_features"]),
            loss=d.get("loss", "pseudo_huber"),
            seed=d.get("seed"),
        )


def _as_matrix(X):
    if len(X) and isinstance(X[0], FeatureVector):
        mods = {x.modality for x in X}
        dims = {x.dim for x in X}
        if len(mods) != 1 or len(dims) != 1:
            raise ValueError("all feature vectors must share modality and dim")
        X = np.stack([x.values for x in X])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return X


def round_masks(rng, n_rows, n_features, config: BoostConfig):
    """Row and feature subsets for one boosting round.

    No random numbers are drawn for a fraction of 1.0, so the seed only
    matters when subsampling is enabled.
    """
    if config.subsample < 1.0:
        k = max(1, int(math.ceil(config.subsample * n_rows)))
        rows = np.sort(rng.choice(n_rows, size=k, replace=False))
    else:
        rows = np.arange(n_rows)
    if config.colsample < 1.0:
        k = max(1, int(math.ceil(config.colsample * n_features)))
        cols = np.sort(rng.choice(n_features, size=k, replace=False))
    else:
        cols = np.arange(n_features)
    return rows, cols


def fit_expert(X, y, config: BoostConfig | None = None, val=None, seed=0,
               rng: np.random.Generator | None = None) -> BoostedModel:
    """Train one boosted regressor with early stopping on ``val = (X_val, y_val)``.

    Each round fits a Newton tree to the loss gradient at the current
    predictions.  If a round would raise the full training loss its leaf
    values are halved until it does not, which keeps the training curve
    monotone even with row subsampling.
    """
    config = config or BoostConfig()
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.shape[0] == 0 or y.size == 0:
        raise ValueError("empty training data")
    if X.shape[0] != y.size or y.size < 2:
        raise ValueError("X and y must have the same length >= 2")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite training data")
    if val is None:
        raise ValueError("a non-empty validation split is required")
    Xv = _as_matrix(val[0])
    yv = np.asarray(val[1], dtype=np.float64).ravel()
    if Xv.shape[0] == 0 or Xv.shape[0] != yv.size:
        raise ValueError("validation split must be non-empty and aligned")
    if Xv.shape[1] != X.shape[1]:
        raise ValueError("validation features have the wrong dimensionality")
    if rng is None:
        rng = np.random.default_rng(seed)

    loss_fn, grad_fn, hess_fn = _objective(config.loss, config.delta)
    base = float(np.median(y))
    pred = np.full(y.size, base)
    pred_v = np.full(yv.size, base)
    train_hist = [float(np.mean(loss_fn(pred - y)))]
    val_hist = [float(np.mean(loss_fn(pred_v - yv)))]
    best_val, best_round, since_best = val_hist[0], 0, 0
    trees: list[RegressionTree] = []
    lr = config.learning_rate

    for _ in range(config.n_rounds):
        rows, cols = round_masks(rng, X.shape[0], X.shape[1], config)
        r = pred - y
        g, h = grad_fn(r), hess_fn(r)
        tree = build_tree(X[rows], g[rows], h[rows], cols, config.max_depth,
                          config.reg_lambda, config.min_child_weight,
                          config.min_split_gain)
        step = tree.predict(X)
        current = train_hist[-1]
        for _ in range(30):
            new_loss = float(np.mean(loss_fn(pred + lr * step - y)))
            if new_loss <= current:
                break
            tree = tree.scaled(0.5)
            step = 0.5 * step
        else:
            tree = tree.scaled(0.0)
            step = np.zeros_like(step)
            new_loss = current
        trees.append(tree)
        pred = pred + lr * step
        pred_v = pred_v + lr * tree.predict(Xv)
        train_hist.append(new_loss)
        v = float(np.mean(loss_fn(pred_v - yv)))
        val_hist.append(v)
        if v < best_val:
            best_val, best_round, since_best = v, len(trees), 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    return BoostedModel(
        trees=tuple(trees[:best_round]),
        learning_rate=lr,
        base_score=base,
        delta=config.delta,
        best_round=best_round,
        n_features=X.shape[1],
        loss=config.loss,
        seed=seed,
        train_loss=tuple(train_hist),
        val_loss=tuple(val_hist),
    )


def predict_expert(model: BoostedModel, x) -> float:
    if isinstance(x, FeatureVector):
        x = x.values
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != model.n_features:
        raise ValueError(f"expected a {model.n_features}-dim feature vector")
    return float(model.predict(x[None, :])[0])


def seed_experts(seeds: Mapping[str, int] | Sequence[int]) -> dict[str, np.random.Generator]:
    """One independent generator per modality from three distinct seeds."""
    if not isinstance(seeds, Mapping):
        seeds = dict(zip(MODALITIES, seeds))
    if set(seeds) != set(MODALITIES):
        raise ValueError(f"need one seed for each of {MODALITIES}")
    if len(set(seeds.values())) != len(MODALITIES):
        raise ValueError("modality seeds must be distinct")
    return {m: np.random.default_rng(int(seeds[m])) for m in MODALITIES}


# ---------------------------------------------------------------------------
# the six-model expert bank


@dataclass(frozen=True)
class ExpertBank:
    models: Mapping[tuple[str, str], BoostedModel]
    seeds: Mapping[str, int]

    def predict(self, modality: str, X) -> np.ndarray:
        """(N, 2) unclipped (valence, arousal) predictions for one modality."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        return np.stack([self.models[(modality, t)].predict(X) for t in TARGETS], axis=1)

    def predict_all(self, features: Mapping[str, np.ndarray]) -> np.ndarray:
        """(N, 3, 2) predictions in gate order (visual, acoustic, text)."""
        from .fusion import GATE_ORDER

        return np.stack([self.predict(m, features[m]) for m in GATE_ORDER], axis=1)

    def to_dict(self) -> dict:
        return {
            "seeds": dict(self.seeds),
            "models": [
                {"modality": m, "target": t, "model": model.to_dict()}
                for (m, t), model in sorted(self.models.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExpertBank":
        models = {(e["modality"], e["target"]): BoostedModel.from_dict(e["model"])
                  for e in d["models"]}
        return cls(models=models, seeds={k: int(v) for k, v in d["seeds"].items()})


def fit_experts(train: Mapping[str, np.ndarray], y_train: np.ndarray,
                val: Mapping[str, np.ndarray], y_val: np.ndarray,
                seeds: Mapping[str, int] | Sequence[int] = (11, 23, 37),
                config: BoostConfig | None = None,
                deltas: Mapping[str, float] | None = None) -> ExpertBank:
    """Train the six (modality, target) experts. ``y_*`` columns are (valence, arousal)."""
    config = config or BoostConfig()
    deltas = {**DEFAULT_DELTAS, **(deltas or {})}
    if not isinstance(seeds, Mapping):
        seeds = dict(zip(MODALITIES, seeds))
    rngs = seed_experts(seeds)
    y_train = np.asarray(y_train, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    models = {}
    for m in MODALITIES:
        for j, t in enumerate(TARGETS):
            cfg = replace(config, delta=deltas[t])
            models[(m, t)] = fit_expert(train[m], y_train[:, j], cfg,
                                        val=(val[m], y_val[:, j]),
                                        seed=int(seeds[m]), rng=rngs[m])
    return ExpertBank(models=models, seeds={m: int(seeds[m]) for m in MODALITIES})
