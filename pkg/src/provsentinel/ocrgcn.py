"""One-class relational GCN: one model per node type, scored by distance to a hypersphere.

Each type model is a stack of relational graph convolutions run over the
whole encoded graph (so messages arrive from every neighbor type), followed
by a soft-boundary one-class objective on the embeddings of its own type:

    L = r^2 + 1/(beta*N) * sum_v max(0, ||h_v - c||^2 - r^2)

Training alternates a gradient step on the weights with a refit of the
center (embedding mean) and radius (the (1-beta)-quantile of distances).
"""

from __future__ import annotations

import base64
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .features import EncodedGraph, IdleScaler, encode_graph, fit_idle_scaler
from .graph_store import GraphError, ProvenanceGraph

logger = logging.getLogger(__name__)

MODEL_MAGIC = "PROVSENTINEL-MODEL-v1"


class DegenerateModelWarning(UserWarning):
    pass


class ModelError(ValueError):
    pass


@dataclass
class TrainingConfig:
    learning_rate: float = 0.005
    n_layers: int = 3
    hidden_dim: int = 32
    beta: float = 0.5
    min_con: float = 0.001
    max_con: float = 0.05
    max_epochs: int = 100
    patience: int = 10
    rng_seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if not 0 < self.min_con <= self.max_con < 1:
            raise ValueError("need 0 < min_con <= max_con < 1")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")


@dataclass
class RgcnParams:
    weights: list  # per layer: (n_relations, d_in, d_out)
    biases: list  # per layer: (d_out,)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_relations(self) -> int:
        return self.weights[0].shape[0]

    def copy(self) -> "RgcnParams":
        return RgcnParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, vector) -> "RgcnParams":
        out = self.copy()
        pos = 0
        for arrs in zip(out.weights, out.biases):
            for a in arrs:
                a[...] = np.reshape(vector[pos : pos + a.size], a.shape)
                pos += a.size
        return out


@dataclass
class Hypersphere:
    center: np.ndarray
    radius: float
    threshold: float

    def __post_init__(self):
        if self.radius < 0 or self.threshold < 0:
            raise ValueError("radius and threshold must be non-negative")


@dataclass
class TypeModel:
    node_type: str
    params: RgcnParams
    sphere: Hypersphere
    contamination: float
    scaler: IdleScaler
    loss_history: list = field(default_factory=list)
    degenerate: bool = False


def init_params(n_relations, in_dim, hidden_dim=32, n_layers=3, rng=None) -> RgcnParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(rng)
    weights, biases = [], []
    d_in = in_dim
    for _ in range(n_layers):
        limit = np.sqrt(6.0 / (d_in + hidden_dim))
        weights.append(rng.uniform(-limit, limit, size=(n_relations, d_in, hidden_dim)))
        biases.append(np.zeros(hidden_dim))
        d_in = hidden_dim
    return RgcnParams(weights, biases)


def _check_compat(params: RgcnParams, enc: EncodedGraph):
    if params.n_relations != enc.n_relations:
        raise ModelError(
            f"model expects {params.n_relations} relations, encoded graph has {enc.n_relations}; "
            "re-encode the graph with the training vocabulary"
        )
    if params.weights[0].shape[1] != enc.features.shape[1]:
        raise ModelError(
            f"model expects {params.weights[0].shape[1]} input features, "
            f"graph has {enc.features.shape[1]}"
        )


def _forward(params: RgcnParams, enc: EncodedGraph):
    h = enc.features
    cache = []
    last = params.n_layers - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        n_rel, d_in, d_out = w.shape
        if h.shape[1] != d_in:
            raise ModelError(f"layer {layer}: input width {h.shape[1]} != {d_in}")
        msgs = np.hstack([a @ h for a in enc.relations])  # (n, R*d_in)
        z = msgs @ w.reshape(n_rel * d_in, d_out) + b
        cache.append((msgs, z))
        h = z if layer == last else np.maximum(z, 0.0)
    return h, cache


def rgcn_forward(params: RgcnParams, enc: EncodedGraph, node_type=None) -> np.ndarray:
    """Final-layer embeddings; rows for ``node_type`` only when given, else every node."""
    _check_compat(params, enc)
    h, _ = _forward(params, enc)
    if node_type is None:
        return h
    return h[enc.type_index[node_type]]


def _backward(params: RgcnParams, enc: EncodedGraph, cache, grad_h):
    grads_w = [None] * params.n_layers
    grads_b = [None] * params.n_layers
    last = params.n_layers - 1
    g = grad_h
    for layer in range(last, -1, -1):
        w = params.weights[layer]
        n_rel, d_in, d_out = w.shape
        msgs, z = cache[layer]
        dz = g if layer == last else g * (z > 0)
        grads_w[layer] = (msgs.T @ dz).reshape(n_rel, d_in, d_out)
        grads_b[layer] = dz.sum(axis=0)
        if layer == 0:
            break
        dmsgs = dz @ w.reshape(n_rel * d_in, d_out).T
        g = sum(a.T @ dmsgs[:, r * d_in : (r + 1) * d_in] for r, a in enumerate(enc.relations))
    return RgcnParams(grads_w, grads_b)


def one_class_loss(emb, center, radius, beta):
    """Soft-boundary loss and its gradient with respect to the embeddings."""
    n = emb.shape[0]
    diff = emb - center
    dist2 = np.einsum("ij,ij->i", diff, diff)
    excess = dist2 - radius**2
    loss = radius**2 + np.maximum(excess, 0.0).sum() / (beta * n)
    grad = np.where((excess > 0)[:, None], 2.0 * diff / (beta * n), 0.0)
    return loss, grad


def loss_and_grad(params: RgcnParams, enc: EncodedGraph, rows, center, radius, beta):
    """One-class loss over ``rows`` and its gradient with respect to every parameter."""
    _check_compat(params, enc)
    h, cache = _forward(params, enc)
    loss, g_rows = one_class_loss(h[rows], center, radius, beta)
    grad_h = np.zeros_like(h)
    np.add.at(grad_h, rows, g_rows)
    return loss, _backward(params, enc, cache, grad_h)


def _fit_sphere(emb, beta):
    center = emb.mean(axis=0)
    dist = np.sqrt(np.einsum("ij,ij->i", emb - center, emb - center))
    radius = float(np.quantile(dist, 1.0 - beta)) if len(dist) else 0.0
    return center, radius


def _excess_scores(emb, center, radius):
    diff = emb - center
    return np.maximum(np.einsum("ij,ij->i", diff, diff) - radius**2, 0.0)


def _threshold(scores, contamination):
    if len(scores) == 0:
        return 0.0
    # "higher" keeps the strictly-above count at or below contamination * N
    return float(np.quantile(scores, 1.0 - contamination, method="higher"))


def estimate_contamination(validation_labels=None, config: TrainingConfig | None = None) -> float:
    """Share of malicious validation nodes clamped to [min_con, max_con]; min_con without labels."""
    config = config or TrainingConfig()
    if validation_labels is None:
        return config.min_con
    labels = np.asarray(list(validation_labels), dtype=bool)
    if labels.size == 0:
        return config.min_con
    return float(np.clip(labels.mean(), config.min_con, config.max_con))


def _f1(flags, truth):
    tp = np.sum(flags & truth)
    fp = np.sum(flags & ~truth)
    fn = np.sum(~flags & truth)
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def fit_type_model(enc: EncodedGraph, node_type, config: TrainingConfig | None = None, validation=None) -> TypeModel:
    """Train the one-class RGCN for a single node type on a benign encoded graph.

    ``validation`` is an optional ``(EncodedGraph, malicious_node_ids)`` pair;
    with it the contamination factor comes from the labels and early stopping
    tracks validation F1. Otherwise 10% of the training nodes are held out
    and early stopping tracks their true-negative rate.
    """
    config = config or TrainingConfig()
    rng = np.random.default_rng(config.rng_seed)
    rows = np.asarray(enc.type_index.get(node_type, []), dtype=np.int64)
    params = init_params(enc.n_relations, enc.features.shape[1], config.hidden_dim, config.n_layers, rng)

    val_truth = None
    if validation is not None:
        val_enc, malicious = validation
        malicious = set(malicious)
        val_rows = np.asarray(val_enc.type_index.get(node_type, []), dtype=np.int64)
        val_truth = np.array([val_enc.node_ids[i] in malicious for i in val_rows], dtype=bool)
        contamination = estimate_contamination(val_truth, config) if val_rows.size else config.min_con
    else:
        contamination = estimate_contamination(None, config)

    if rows.size < 2:
        warnings.warn(
            f"node type {node_type!r} has {rows.size} training node(s); using a degenerate model",
            DegenerateModelWarning,
            stacklevel=2,
        )
        emb = rgcn_forward(params, enc)[rows]
        center = emb[0] if rows.size else np.zeros(config.hidden_dim)
        return TypeModel(node_type, params, Hypersphere(center, 0.0, 0.0), contamination, enc.scaler, [], True)

    order = rng.permutation(rows.size)
    n_hold = int(round(config.val_fraction * rows.size)) if validation is None else 0
    if rows.size - n_hold < 2:
        n_hold = 0
    holdout = rows[np.sort(order[:n_hold])]
    train = rows[np.sort(order[n_hold:])]

    emb = rgcn_forward(params, enc)
    center, radius = _fit_sphere(emb[train], config.beta)
    best, best_metric, wait = params.copy(), -np.inf, 0
    history = []
    for _ in range(config.max_epochs):
        loss, grads = loss_and_grad(params, enc, train, center, radius, config.beta)
        history.append(float(loss))
        for k in range(params.n_layers):
            params.weights[k] -= config.learning_rate * grads.weights[k]
            params.biases[k] -= config.learning_rate * grads.biases[k]
        emb = rgcn_forward(params, enc)
        center, radius = _fit_sphere(emb[train], config.beta)
        threshold = _threshold(_excess_scores(emb[train], center, radius), contamination)
        if val_truth is not None:
            val_emb = rgcn_forward(params, val_enc)[val_rows]
            metric = _f1(_excess_scores(val_emb, center, radius) > threshold, val_truth)
        elif holdout.size:
            metric = float(np.mean(_excess_scores(emb[holdout], center, radius) <= threshold))
        else:
            metric = -loss
        if metric >= best_metric:
            best, best_metric, wait = params.copy(), metric, 0
        else:
            wait += 1
            if wait >= config.patience:
                break

    emb = rgcn_forward(best, enc)[rows]
    center, radius = _fit_sphere(emb, config.beta)
    threshold = _threshold(_excess_scores(emb, center, radius), contamination)
    sphere = Hypersphere(center, radius, threshold)
    return TypeModel(node_type, best, sphere, contamination, enc.scaler, history)


def score_embeddings(embeddings, sphere: Hypersphere) -> np.ndarray:
    """Squared distance beyond the radius, zero inside the sphere."""
    return _excess_scores(np.atleast_2d(embeddings), sphere.center, sphere.radius)


def score_nodes(model: TypeModel, enc: EncodedGraph) -> dict:
    """Anomaly score for every node of the model's type in ``enc``."""
    if model.node_type not in enc.type_index:
        return {}
    emb = rgcn_forward(model.params, enc, model.node_type)
    scores = score_embeddings(emb, model.sphere)
    return dict(zip(enc.type_node_ids(model.node_type), scores.tolist()))


def detect_anomalies(models: dict, enc: EncodedGraph) -> dict:
    """Nodes whose score exceeds their type's threshold, mapped to their score."""
    flagged = {}
    for node_type in enc.type_vocab:
        rows = enc.type_index.get(node_type)
        if rows is None or rows.size == 0:
            continue
        model = models.get(node_type)
        if model is None:
            logger.warning("no model for node type %r; skipping %d node(s)", node_type, rows.size)
            continue
        for node, score in score_nodes(model, enc).items():
            if score > model.sphere.threshold:
                flagged[node] = score
    return flagged


# -- persistence ---------------------------------------------------------------


def _pack(arr) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def _unpack(blob) -> np.ndarray:
    raw = base64.b64decode(blob["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(blob["shape"]).copy()


def _model_to_dict(m: TypeModel) -> dict:
    return {
        "node_type": m.node_type,
        "weights": [_pack(w) for w in m.params.weights],
        "biases": [_pack(b) for b in m.params.biases],
        "center": _pack(m.sphere.center),
        "radius": m.sphere.radius,
        "threshold": m.sphere.threshold,
        "contamination": m.contamination,
        "scaler": m.scaler.to_dict(),
        "loss_history": m.loss_history,
        "degenerate": m.degenerate,
    }


def _model_from_dict(d: dict) -> TypeModel:
    params = RgcnParams([_unpack(w) for w in d["weights"]], [_unpack(b) for b in d["biases"]])
    sphere = Hypersphere(_unpack(d["center"]), float(d["radius"]), float(d["threshold"]))
    return TypeModel(
        d["node_type"],
        params,
        sphere,
        float(d["contamination"]),
        IdleScaler(**d["scaler"]),
        list(d.get("loss_history", [])),
        bool(d.get("degenerate", False)),
    )


# -- estimator -----------------------------------------------------------------


class OCRGCNDetector(BaseEstimator):
    """Per-node-type one-class RGCN anomaly detector over provenance graphs.

    ``fit`` takes a benign :class:`ProvenanceGraph`; ``decision_function`` and
    ``predict`` take a graph to score and return arrays aligned with its
    ``node_ids`` (nodes of types without a model score 0 and are never flagged).
    """

    def __init__(
        self,
        learning_rate=0.005,
        n_layers=3,
        hidden_dim=32,
        beta=0.5,
        min_con=0.001,
        max_con=0.05,
        max_epochs=100,
        patience=10,
        val_fraction=0.1,
        random_state=0,
        n_jobs=1,
    ):
        self.learning_rate = learning_rate
        self.n_layers = n_layers
        self.hidden_dim = hidden_dim
        self.beta = beta
        self.min_con = min_con
        self.max_con = max_con
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self) -> TrainingConfig:
        return TrainingConfig(
            learning_rate=self.learning_rate,
            n_layers=self.n_layers,
            hidden_dim=self.hidden_dim,
            beta=self.beta,
            min_con=self.min_con,
            max_con=self.max_con,
            max_epochs=self.max_epochs,
            patience=self.patience,
            rng_seed=self.random_state,
            val_fraction=self.val_fraction,
        )

    def fit(self, graph: ProvenanceGraph, y=None, validation=None):
        """Train one model per node type.

        ``validation`` is an optional ``(ProvenanceGraph, malicious_ids)`` pair.
        """
        _check_graph(graph)
        config = self._config()
        self.scaler_ = fit_idle_scaler(graph)
        self.edge_vocab_ = list(graph.edge_vocab)
        self.type_vocab_ = list(graph.type_vocab)
        enc = encode_graph(graph, self.scaler_, self.edge_vocab_, self.type_vocab_)
        val = None
        if validation is not None:
            val_graph, malicious = validation
            val = (self.encode(val_graph), set(malicious))
        types = [t for t in self.type_vocab_ if enc.type_index[t].size]
        fitted = Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(fit_type_model)(enc, t, config, val) for t in types
        )
        self.models_ = {m.node_type: m for m in fitted}
        return self

    def encode(self, graph: ProvenanceGraph) -> EncodedGraph:
        check_is_fitted(self, "models_")
        _check_graph(graph)
        type_vocab = list(self.type_vocab_) + [t for t in graph.type_vocab if t not in self.type_vocab_]
        return encode_graph(graph, self.scaler_, self.edge_vocab_, type_vocab)

    def score_samples(self, graph) -> dict:
        """Node id -> anomaly score for every node with a model."""
        enc = self.encode(graph)
        scores = {}
        for model in self.models_.values():
            scores.update(score_nodes(model, enc))
        return scores

    def decision_function(self, graph) -> np.ndarray:
        scores = self.score_samples(graph)
        return np.array([scores.get(n, 0.0) for n in graph.node_ids])

    def predict(self, graph) -> np.ndarray:
        flagged = self.detect(graph)
        return np.array([int(n in flagged) for n in graph.node_ids])

    def detect(self, graph) -> dict:
        return detect_anomalies(self.models_, self.encode(graph))

    @property
    def thresholds_(self) -> dict:
        return {t: m.sphere.threshold for t, m in self.models_.items()}

    # -- snapshot ------------------------------------------------------------

    def to_bytes(self) -> bytes:
        check_is_fitted(self, "models_")
        body = {
            "config": asdict(self._config()),
            "n_jobs": self.n_jobs,
            "edge_vocab": self.edge_vocab_,
            "type_vocab": self.type_vocab_,
            "scaler": self.scaler_.to_dict(),
            "models": [_model_to_dict(self.models_[t]) for t in self.type_vocab_ if t in self.models_],
        }
        return (MODEL_MAGIC + "\n" + json.dumps(body, separators=(",", ":")) + "\n").encode()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "OCRGCNDetector":
        raw = Path(path).read_bytes()
        header, sep, body = raw.partition(b"\n")
        if header != MODEL_MAGIC.encode() or not sep:
            if header.startswith(b"PROVSENTINEL-MODEL-"):
                raise ModelError(f"unsupported model version {header.decode(errors='replace')!r}")
            raise ModelError(f"{path}: not a model snapshot (missing {MODEL_MAGIC} header)")
        try:
            data = json.loads(body)
            cfg = data["config"]
            det = cls(
                learning_rate=cfg["learning_rate"],
                n_layers=cfg["n_layers"],
                hidden_dim=cfg["hidden_dim"],
                beta=cfg["beta"],
                min_con=cfg["min_con"],
                max_con=cfg["max_con"],
                max_epochs=cfg["max_epochs"],
                patience=cfg["patience"],
                val_fraction=cfg["val_fraction"],
                random_state=cfg["rng_seed"],
                n_jobs=data.get("n_jobs", 1),
            )
            det.edge_vocab_ = list(data["edge_vocab"])
            det.type_vocab_ = list(data["type_vocab"])
            det.scaler_ = IdleScaler(**data["scaler"])
            det.models_ = {m["node_type"]: _model_from_dict(m) for m in data["models"]}
        except (ValueError, KeyError, TypeError) as exc:
            raise ModelError(f"{path}: truncated or corrupted model snapshot ({exc})") from None
        return det


def _check_graph(graph):
    if not isinstance(graph, ProvenanceGraph):
        raise TypeError(f"expected a ProvenanceGraph, got {type(graph).__name__}")
    if graph.n_nodes == 0:
        raise GraphError("graph has no nodes")
