"""RBF-kernel SVM trained by SMO, the fusion MLP, and the shared feature standardizer.

Labels: Cribriform is +1 for the SVM and class 1 for the MLP; NonCribriform
is -1 and class 0.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.preprocessing import StandardScaler

from config import (
    MLP_BATCH,
    MLP_EPOCHS,
    MLP_HIDDEN,
    MLP_LR,
    MLP_MOMENTUM,
    SVM_C,
    SVM_GAMMA,
    SVM_MAX_PASSES,
    SVM_TOL,
)
from errors import (
    ConfigError,
    DimensionMismatch,
    MissingEmbedding,
    NonFiniteFeature,
    NonFiniteLoss,
    SingleClassInput,
    WidthMismatch,
)
from file_formats import FORMAT_VERSION, EmbeddingTable, read_json, write_json

logger = logging.getLogger(__name__)

# Relative alpha change below which an SMO step counts as no progress
ALPHA_EPS = 1e-9
# Safety cap on SMO sweeps; convergence normally happens far earlier
SMO_MAX_SWEEPS = 100000


# Standardizer -------------------------------------------------------------

class Standardizer:
    """Training-set z-scores over a fitted StandardScaler.

    Constant columns keep scale 1 and are listed in ``flagged``.
    """

    def __init__(self, scaler: StandardScaler, flagged: Tuple[int, ...] = ()):
        self.scaler = scaler
        self.flagged = tuple(flagged)

    @property
    def means(self) -> np.ndarray:
        return self.scaler.mean_

    @property
    def stds(self) -> np.ndarray:
        return self.scaler.scale_

    @property
    def width(self) -> int:
        return int(self.scaler.n_features_in_)

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        scaler = StandardScaler().fit(X)
        flagged = tuple(int(i) for i in np.flatnonzero(np.ptp(X, axis=0) == 0))
        if flagged:
            logger.info("%d zero-variance columns left unscaled", len(flagged))
        return cls(scaler, flagged)

    @classmethod
    def from_moments(
        cls, means: np.ndarray, stds: np.ndarray, variances: Optional[np.ndarray] = None, flagged: Sequence[int] = ()
    ) -> "Standardizer":
        """Rebuild a fitted scaler from stored moments."""
        scaler = StandardScaler()
        scaler.mean_ = np.asarray(means, dtype=np.float64)
        scaler.scale_ = np.asarray(stds, dtype=np.float64)
        scaler.var_ = scaler.scale_ ** 2 if variances is None else np.asarray(variances, dtype=np.float64)
        scaler.n_features_in_ = int(scaler.mean_.shape[0])
        scaler.n_samples_seen_ = 0
        return cls(scaler, tuple(int(i) for i in flagged))

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.width:
            raise DimensionMismatch(self.width, X.shape[1])
        _check_finite(X)
        return self.scaler.transform(X)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean": self.scaler.mean_.tolist(),
            "scale": self.scaler.scale_.tolist(),
            "var": self.scaler.var_.tolist(),
            "flagged": list(self.flagged),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "Standardizer":
        return cls.from_moments(payload["mean"], payload["scale"], payload["var"], payload.get("flagged", ()))


def _check_finite(X: np.ndarray) -> None:
    if not np.all(np.isfinite(X)):
        bad = np.argwhere(~np.isfinite(X))[0]
        raise NonFiniteFeature(f"Non-finite feature at row {bad[0]}, column {bad[1]}")


# SVM ----------------------------------------------------------------------

def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    """K(u, v) = exp(-gamma * |u - v|^2)."""
    return np.exp(-gamma * cdist(np.atleast_2d(A), np.atleast_2d(B), "sqeuclidean"))


@dataclass(frozen=True)
class SvmConfig:
    c: float = SVM_C
    gamma: float = SVM_GAMMA
    tol: float = SVM_TOL
    max_passes: int = SVM_MAX_PASSES
    seed: int = 0


@dataclass
class SvmModel:
    support_vectors: np.ndarray  # standardized rows
    coefs: np.ndarray  # alpha_i * y_i
    bias: float
    gamma: float
    c: float
    standardizer: Standardizer
    config: SvmConfig = field(default_factory=SvmConfig)
    metadata: Dict[str, Any] = field(default_factory=dict)

    kind = "svm"

    @property
    def width(self) -> int:
        return self.standardizer.width


class _SmoSolver:
    """Platt's SMO over a precomputed kernel matrix with a cached error vector."""

    def __init__(self, K: np.ndarray, y: np.ndarray, c: float, tol: float, rng: np.random.Generator):
        self.K = K
        self.y = y
        self.c = c
        self.tol = tol
        self.rng = rng
        self.n = y.shape[0]
        self.alpha = np.zeros(self.n)
        self.b = 0.0
        self.errors = -y.astype(np.float64)  # f(x) - y with alpha = 0, b = 0

    def take_step(self, i1: int, i2: int) -> bool:
        if i1 == i2:
            return False
        K, y, c = self.K, self.y, self.c
        a1, a2 = self.alpha[i1], self.alpha[i2]
        y1, y2 = y[i1], y[i2]
        e1, e2 = self.errors[i1], self.errors[i2]
        s = y1 * y2

        if y1 != y2:
            low, high = max(0.0, a2 - a1), min(c, c + a2 - a1)
        else:
            low, high = max(0.0, a1 + a2 - c), min(c, a1 + a2)
        if high - low <= 0:
            return False

        k11, k12, k22 = K[i1, i1], K[i1, i2], K[i2, i2]
        eta = k11 + k22 - 2.0 * k12
        if eta > 0:
            new_a2 = min(max(a2 + y2 * (e1 - e2) / eta, low), high)
        else:
            f1 = y1 * (e1 - self.b) - a1 * k11 - s * a2 * k12
            f2 = y2 * (e2 - self.b) - s * a1 * k12 - a2 * k22
            l1 = a1 + s * (a2 - low)
            h1 = a1 + s * (a2 - high)
            obj_low = l1 * f1 + low * f2 + 0.5 * l1 * l1 * k11 + 0.5 * low * low * k22 + s * low * l1 * k12
            obj_high = h1 * f1 + high * f2 + 0.5 * h1 * h1 * k11 + 0.5 * high * high * k22 + s * high * h1 * k12
            if obj_low < obj_high - ALPHA_EPS:
                new_a2 = low
            elif obj_low > obj_high + ALPHA_EPS:
                new_a2 = high
            else:
                new_a2 = a2

        if abs(new_a2 - a2) < ALPHA_EPS * (new_a2 + a2 + ALPHA_EPS):
            return False
        new_a1 = min(max(a1 + s * (a2 - new_a2), 0.0), c)

        d1, d2 = y1 * (new_a1 - a1), y2 * (new_a2 - a2)
        b1 = self.b - e1 - d1 * k11 - d2 * k12
        b2 = self.b - e2 - d1 * k12 - d2 * k22
        if 0 < new_a1 < c:
            new_b = b1
        elif 0 < new_a2 < c:
            new_b = b2
        else:
            new_b = (b1 + b2) / 2.0

        self.errors += d1 * K[:, i1] + d2 * K[:, i2] + (new_b - self.b)
        self.alpha[i1], self.alpha[i2] = new_a1, new_a2
        self.b = new_b
        return True

    def examine(self, i2: int) -> int:
        a2 = self.alpha[i2]
        r2 = self.errors[i2] * self.y[i2]
        if not ((r2 < -self.tol and a2 < self.c) or (r2 > self.tol and a2 > 0)):
            return 0

        free = np.flatnonzero((self.alpha > 0) & (self.alpha < self.c))
        if free.shape[0] > 1:
            i1 = int(free[np.argmax(np.abs(self.errors[i2] - self.errors[free]))])
            if self.take_step(i1, i2):
                return 1
        if free.shape[0]:
            for i1 in np.roll(free, -int(self.rng.integers(free.shape[0]))):
                if self.take_step(int(i1), i2):
                    return 1
        for i1 in np.roll(np.arange(self.n), -int(self.rng.integers(self.n))):
            if self.take_step(int(i1), i2):
                return 1
        return 0

    def solve(self, max_passes: int) -> None:
        examine_all = True
        quiet_passes = 0
        for sweep in range(SMO_MAX_SWEEPS):
            order = self.rng.permutation(self.n)
            if examine_all:
                changed = sum(self.examine(int(i)) for i in order)
                quiet_passes = quiet_passes + 1 if changed == 0 else 0
                if quiet_passes >= max_passes:
                    logger.debug("SMO converged after %d sweeps", sweep + 1)
                    break
                examine_all = changed == 0
            else:
                free = (self.alpha > 0) & (self.alpha < self.c)
                changed = sum(self.examine(int(i)) for i in order if free[i])
                if changed == 0:
                    examine_all = True
        else:
            logger.warning("SMO stopped at the %d sweep cap before converging", SMO_MAX_SWEEPS)

        free = np.flatnonzero((self.alpha > 0) & (self.alpha < self.c))
        if free.shape[0]:
            margins = self.y[free] - (self.alpha * self.y) @ self.K[:, free]
            self.b = float(np.mean(margins))


def _svm_labels(y: Sequence[int]) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ConfigError("SVM labels must be +1 or -1")
    if np.unique(y).shape[0] < 2:
        raise SingleClassInput("SVM training needs examples of both classes")
    return y


def train_svm(X: np.ndarray, y: Sequence[int], cfg: SvmConfig = SvmConfig()) -> SvmModel:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_finite(X)
    y = _svm_labels(y)
    if X.shape[0] != y.shape[0]:
        raise ConfigError(f"{X.shape[0]} rows but {y.shape[0]} labels")

    standardizer = Standardizer.fit(X)
    Z = standardizer.transform(X)
    K = rbf_kernel(Z, Z, cfg.gamma)

    solver = _SmoSolver(K, y, cfg.c, cfg.tol, np.random.default_rng(cfg.seed))
    solver.solve(cfg.max_passes)

    support = np.flatnonzero(solver.alpha > 0)
    logger.info("SVM trained: %d of %d rows are support vectors", support.shape[0], y.shape[0])
    return SvmModel(
        support_vectors=Z[support],
        coefs=solver.alpha[support] * y[support],
        bias=float(solver.b),
        gamma=cfg.gamma,
        c=cfg.c,
        standardizer=standardizer,
        config=cfg,
    )


def decision_function(model: SvmModel, X: np.ndarray) -> np.ndarray:
    Z = model.standardizer.transform(X)
    if model.support_vectors.shape[0] == 0:
        return np.full(Z.shape[0], model.bias)
    return rbf_kernel(Z, model.support_vectors, model.gamma) @ model.coefs + model.bias


def predict_svm(model: SvmModel, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Labels (+1/-1, a zero score counts as +1) and raw scores."""
    scores = decision_function(model, X)
    labels = np.where(scores >= 0, 1, -1)
    return labels, scores


# MLP ----------------------------------------------------------------------

@dataclass(frozen=True)
class MlpConfig:
    hidden: Tuple[int, ...] = MLP_HIDDEN
    epochs: int = MLP_EPOCHS
    lr: float = MLP_LR
    momentum: float = MLP_MOMENTUM
    batch: int = MLP_BATCH
    seed: int = 0
    validate_every: int = 1


Params = List[Tuple[np.ndarray, np.ndarray]]


@dataclass
class MlpModel:
    dims: Tuple[int, ...]
    params: Params
    standardizer: Standardizer
    config: MlpConfig = field(default_factory=MlpConfig)
    metadata: Dict[str, Any] = field(default_factory=dict)

    kind = "mlp"

    @property
    def width(self) -> int:
        return self.dims[0]


@dataclass
class TrainResult:
    model: MlpModel
    best: Optional[MlpModel] = None
    best_epoch: int = -1
    best_accuracy: float = float("nan")
    loss_history: List[float] = field(default_factory=list)

    @property
    def selected(self) -> MlpModel:
        """The validation snapshot when one exists, the final model otherwise."""
        return self.best if self.best is not None else self.model


def init_params(dims: Sequence[int], rng: np.random.Generator) -> Params:
    params = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        params.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return params


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def mlp_forward(params: Params, X: np.ndarray):
    """Class probabilities plus the per-layer (input, pre-activation) cache."""
    cache = []
    a = X
    for W, b in params[:-1]:
        z = a @ W + b
        cache.append((a, z))
        a = np.maximum(z, 0.0)
    W, b = params[-1]
    logits = a @ W + b
    cache.append((a, logits))
    return softmax(logits), cache


def mlp_loss_and_grad(params: Params, X: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient for every (W, b)."""
    probs, cache = mlp_forward(params, X)
    n = X.shape[0]
    picked = probs[np.arange(n), y]
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny))))

    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads: Params = [None] * len(params)
    for layer in range(len(params) - 1, -1, -1):
        a_prev, _ = cache[layer]
        grads[layer] = (a_prev.T @ delta, delta.sum(axis=0))
        if layer:
            _, z_prev = cache[layer - 1]
            delta = (delta @ params[layer][0].T) * (z_prev > 0)
    return loss, grads


def _mlp_classes(y: Sequence[int]) -> np.ndarray:
    y = np.asarray(y).ravel().astype(np.intp)
    if not np.all(np.isin(y, (0, 1))):
        raise ConfigError("MLP labels must be class indices 0 or 1")
    if np.unique(y).shape[0] < 2:
        raise SingleClassInput("MLP training needs examples of both classes")
    return y


def _accuracy(model: MlpModel, X: np.ndarray, y: np.ndarray) -> float:
    labels, _ = predict_mlp(model, X)
    return float(np.mean(labels == y))


def train_mlp(
    X: np.ndarray,
    y: Sequence[int],
    cfg: MlpConfig = MlpConfig(),
    X_val: Optional[np.ndarray] = None,
    y_val: Optional[Sequence[int]] = None,
) -> TrainResult:
    """Mini-batch momentum SGD on softmax cross-entropy.

    Records one training loss per epoch (the size-weighted mean of the batch
    losses) and, when validation rows are given, keeps the parameters of the
    epoch with the best validation accuracy.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_finite(X)
    y = _mlp_classes(y)

    rng = np.random.default_rng(cfg.seed)
    standardizer = Standardizer.fit(X)
    Z = standardizer.transform(X)
    dims = (X.shape[1], *cfg.hidden, 2)
    params = init_params(dims, rng)
    velocity = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params]
    model = MlpModel(dims, params, standardizer, cfg)

    result = TrainResult(model)
    has_val = X_val is not None and y_val is not None and len(y_val) > 0
    if has_val:
        y_val = np.asarray(y_val).astype(np.intp)

    n = Z.shape[0]
    batch = max(1, min(cfg.batch, n))
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss, grads = mlp_loss_and_grad(params, Z[idx], y[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch, cfg.lr)
            total += loss * idx.shape[0]
            for layer, ((W, b), (gW, gb), (vW, vb)) in enumerate(zip(params, grads, velocity)):
                vW = cfg.momentum * vW - cfg.lr * gW
                vb = cfg.momentum * vb - cfg.lr * gb
                velocity[layer] = (vW, vb)
                params[layer] = (W + vW, b + vb)
        result.loss_history.append(total / n)

        if has_val and (epoch + 1) % cfg.validate_every == 0:
            accuracy = _accuracy(MlpModel(dims, params, standardizer, cfg), X_val, y_val)
            if not accuracy <= result.best_accuracy:
                result.best_accuracy = accuracy
                result.best_epoch = epoch
                result.best = MlpModel(dims, [(W.copy(), b.copy()) for W, b in params], standardizer, cfg)

    model.params = params
    if cfg.epochs:
        logger.info(
            "MLP trained %d epochs, final loss %.4g%s", cfg.epochs, result.loss_history[-1],
            f", best validation accuracy {result.best_accuracy:.4f} at epoch {result.best_epoch}" if has_val else "",
        )
    return result


def predict_mlp(model: MlpModel, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Class labels (ties go to class 0) and the two class probabilities per row."""
    Z = model.standardizer.transform(X)
    probs, _ = mlp_forward(model.params, Z)
    labels = (probs[:, 1] > probs[:, 0]).astype(np.intp)
    return labels, probs


# Fusion -------------------------------------------------------------------

def fuse(
    features: np.ndarray, tile_id: str, tables: Sequence[EmbeddingTable], nuclei_width: int = 57
) -> np.ndarray:
    """Nuclei features followed by each embedding table's vector, in declaration order."""
    features = np.asarray(features, dtype=np.float64).ravel()
    if features.shape[0] != nuclei_width:
        raise WidthMismatch(f"Expected {nuclei_width} nuclei features, got {features.shape[0]}")
    blocks = [features]
    for table in tables:
        if tile_id not in table:
            raise MissingEmbedding(tile_id, table.path)
        blocks.append(table[tile_id])
    return np.concatenate(blocks)


def fuse_rows(
    X: np.ndarray, tile_ids: Sequence[str], tables: Sequence[EmbeddingTable], nuclei_width: int = 57
) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if not tables:
        return X
    return np.vstack([fuse(row, tid, tables, nuclei_width) for row, tid in zip(X, tile_ids)])


# Persistence --------------------------------------------------------------

Model = Union[SvmModel, MlpModel]


def model_to_dict(model: Model) -> Dict[str, Any]:
    if isinstance(model, SvmModel):
        params = {
            "dims": {"width": model.width, "n_support": int(model.support_vectors.shape[0])},
            "support_vectors": model.support_vectors.tolist(),
            "coefs": model.coefs.tolist(),
            "bias": model.bias,
            "gamma": model.gamma,
            "c": model.c,
        }
    else:
        params = {
            "dims": list(model.dims),
            "layers": [{"W": W.tolist(), "b": b.tolist()} for W, b in model.params],
        }
    config = asdict(model.config)
    return {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "standardizer": model.standardizer.to_dict(),
        "params": params,
        "training_config": config,
        "seed": config["seed"],
        "metadata": model.metadata,
    }


def model_from_dict(payload: Dict[str, Any]) -> Model:
    standardizer = Standardizer.from_dict(payload["standardizer"])
    params = payload["params"]
    config = dict(payload.get("training_config", {}))
    if payload["kind"] == "svm":
        width = params["dims"]["width"]
        vectors = np.asarray(params["support_vectors"], dtype=np.float64).reshape(-1, width)
        return SvmModel(
            support_vectors=vectors,
            coefs=np.asarray(params["coefs"], dtype=np.float64),
            bias=float(params["bias"]),
            gamma=float(params["gamma"]),
            c=float(params["c"]),
            standardizer=standardizer,
            config=SvmConfig(**config),
            metadata=payload.get("metadata", {}),
        )
    if payload["kind"] == "mlp":
        if "hidden" in config:
            config["hidden"] = tuple(config["hidden"])
        dims = tuple(params["dims"])
        layers = [
            (np.asarray(layer["W"], dtype=np.float64).reshape(fan_in, fan_out), np.asarray(layer["b"], dtype=np.float64))
            for layer, fan_in, fan_out in zip(params["layers"], dims[:-1], dims[1:])
        ]
        return MlpModel(dims, layers, standardizer, MlpConfig(**config), payload.get("metadata", {}))
    raise ConfigError(f"Unknown model kind {payload['kind']!r}")


def save_model(model: Model, path: str) -> None:
    write_json(path, model_to_dict(model))


def load_model(path: str) -> Model:
    return model_from_dict(read_json(path))


def predict(model: Model, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Labels as +1/-1 plus a per-row score (SVM margin or Cribriform probability)."""
    if isinstance(model, SvmModel):
        return predict_svm(model, X)
    labels, probs = predict_mlp(model, X)
    return np.where(labels == 1, 1, -1), probs[:, 1]
