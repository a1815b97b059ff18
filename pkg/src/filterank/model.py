"""Two-task network: P(F_i=1|Q) for every filter and P(B=1|F,Q) per filter.

Layout::

    [location, platform, device embeddings | dense] -> 64 -> 32 (ReLU trunk)
        trunk -> k logits                              (engagement head)
        [trunk | filter embedding] -> 32 -> 1 logit    (conversion tower)

Everything is float64 numpy with hand-written backprop; ``gradient_check``
compares it against central differences.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attribution import TrainingExample
from .features import EncodedFeatures, FeatureBatch, FeatureSchema, encode_rows, fit_schema

logger = logging.getLogger(__name__)

FORMAT_NAME = "filterank-model"
FORMAT_VERSION = 1
PROB_CLAMP = 1e-7


class ModelFormatError(Exception):
    """Weight file is unreadable, truncated or from another format version."""


class SchemaMismatchError(Exception):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden_sizes: tuple[int, ...] = (64, 32)
    conversion_hidden: int = 32
    loss_weights: tuple[float, float] = (1.0, 1.0)  # (engagement, booking)
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if len(self.hidden_sizes) != 2 or any(h <= 0 for h in self.hidden_sizes):
            raise ValueError("hidden_sizes must be two positive ints")
        if self.conversion_hidden <= 0:
            raise ValueError("conversion_hidden must be positive")
        w_e, w_b = self.loss_weights
        if w_e < 0 or w_b < 0 or (w_e == 0 and w_b == 0):
            raise ValueError("loss weights must be non-negative and not both zero")
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid optimisation settings")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["hidden_sizes"] = tuple(d["hidden_sizes"])
        d["loss_weights"] = tuple(d["loss_weights"])
        return cls(**d)


@dataclass
class ModelParams:
    arrays: dict[str, np.ndarray]
    schema: FeatureSchema
    config: ModelConfig

    @property
    def k(self) -> int:
        return self.schema.k

    def freeze(self) -> "ModelParams":
        for a in self.arrays.values():
            a.flags.writeable = False
        return self

    def copy(self) -> "ModelParams":
        return ModelParams({n: a.copy() for n, a in self.arrays.items()}, self.schema, self.config)


@dataclass(frozen=True)
class PredictionPair:
    engagement_probs: np.ndarray
    booking_prob: float


# Parameters touched only by one head; everything else is shared.
ENGAGEMENT_ONLY = ("W_eng", "b_eng")
CONVERSION_ONLY = ("emb_filter", "W_conv1", "b_conv1", "W_conv2", "b_conv2")


def _emb_name(feature: str) -> str:
    return f"emb_{feature}"


def init(config: ModelConfig, schema: FeatureSchema, k: int | None = None, seed: int | None = None) -> ModelParams:
    """He-scaled weights, zero biases, small Gaussian embeddings."""
    k = schema.k if k is None else k
    if k != schema.k:
        raise ValueError("k disagrees with schema")
    rng = np.random.default_rng(config.seed if seed is None else seed)
    h1, h2 = config.hidden_sizes
    arrays: dict[str, np.ndarray] = {}
    in_dim = schema.dense_dim
    for c in schema.categorical:
        arrays[_emb_name(c.name)] = rng.normal(0.0, 0.1, size=(c.size, c.embedding_dim))
        in_dim += c.embedding_dim
    arrays["emb_filter"] = rng.normal(0.0, 0.1, size=(k + 1, schema.filter_embedding_dim))

    def dense(name, fan_in, fan_out, gain=2.0):
        arrays[f"W_{name}"] = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))
        arrays[f"b_{name}"] = np.zeros(fan_out)

    dense("1", in_dim, h1)
    dense("2", h1, h2)
    dense("eng", h2, k, gain=1.0)
    dense("conv1", h2 + schema.filter_embedding_dim, config.conversion_hidden)
    dense("conv2", config.conversion_hidden, 1, gain=1.0)
    return ModelParams(arrays, schema, config)


def input_dim(params: ModelParams) -> int:
    return params.arrays["W_1"].shape[0]


def _check_batch(params: ModelParams, batch: FeatureBatch) -> None:
    schema = params.schema
    if batch.categorical.shape[1:] != (len(schema.categorical),):
        raise ValueError(f"expected {len(schema.categorical)} categorical columns, got {batch.categorical.shape}")
    if batch.dense.shape[1:] != (schema.dense_dim,):
        raise ValueError(f"expected dense width {schema.dense_dim}, got {batch.dense.shape}")
    for j, c in enumerate(schema.categorical):
        col = batch.categorical[:, j]
        if len(col) and (col.min() < 0 or col.max() >= c.size):
            raise ValueError(f"index out of range for {c.name}")
    if len(batch) and (batch.filter_index.min() < 0 or batch.filter_index.max() > schema.k):
        raise ValueError("filter index out of range")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _trunk_inputs(params: ModelParams, batch: FeatureBatch) -> np.ndarray:
    parts = [params.arrays[_emb_name(c.name)][batch.categorical[:, j]] for j, c in enumerate(params.schema.categorical)]
    parts.append(batch.dense)
    return np.concatenate(parts, axis=1)


def _forward_cache(params: ModelParams, x: np.ndarray, f_emb: np.ndarray) -> dict:
    a = params.arrays
    z1 = x @ a["W_1"] + a["b_1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ a["W_2"] + a["b_2"]
    a2 = np.maximum(z2, 0.0)
    logit_e = a2 @ a["W_eng"] + a["b_eng"]
    c_in = np.concatenate([a2, f_emb], axis=1)
    zc = c_in @ a["W_conv1"] + a["b_conv1"]
    ac = np.maximum(zc, 0.0)
    logit_b = (ac @ a["W_conv2"] + a["b_conv2"])[:, 0]
    return dict(x=x, z1=z1, a1=a1, z2=z2, a2=a2, c_in=c_in, zc=zc, ac=ac,
                p_e=_sigmoid(logit_e), p_b=_sigmoid(logit_b))


def forward_batch(params: ModelParams, batch: FeatureBatch) -> tuple[np.ndarray, np.ndarray]:
    """Return engagement probs (n, k) and booking probs (n,)."""
    _check_batch(params, batch)
    cache = _forward_cache(params, _trunk_inputs(params, batch), params.arrays["emb_filter"][batch.filter_index])
    return cache["p_e"], cache["p_b"]


def forward(params: ModelParams, encoded: EncodedFeatures) -> PredictionPair:
    p_e, p_b = forward_batch(params, FeatureBatch.from_encoded([encoded], params.schema))
    return PredictionPair(p_e[0], float(p_b[0]))


def _bce(p, y):
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))


def _dbce_dlogit(p, y):
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    return np.where(inside, p - y, 0.0)


def loss(pred: PredictionPair, example: TrainingExample, weights: tuple[float, float] = (1.0, 1.0)) -> float:
    """Weighted sum of mean-over-filters engagement BCE and booking BCE."""
    w_e, w_b = weights
    l_eng = float(np.mean(_bce(np.asarray(pred.engagement_probs), np.asarray(example.filters, dtype=float))))
    l_book = float(_bce(np.array(pred.booking_prob), float(example.booking_label)))
    return w_e * l_eng + w_b * l_book


@dataclass
class Rows:
    """Training rows: one per applied filter, or one no-filter row per search."""

    batch: FeatureBatch
    eng_labels: np.ndarray  # (n, k)
    book_labels: np.ndarray  # (n,)
    eng_weight: np.ndarray  # (n,) splits a search's engagement term across its rows
    book_weight: np.ndarray  # (n,)
    search_index: np.ndarray  # (n,) position of the source example

    def __len__(self) -> int:
        return len(self.book_labels)

    def take(self, idx) -> "Rows":
        return Rows(self.batch.take(idx), self.eng_labels[idx], self.book_labels[idx],
                    self.eng_weight[idx], self.book_weight[idx], self.search_index[idx])


def filter_tokens(filters: Sequence[int], none_token: int) -> list[int]:
    tokens = [i for i, b in enumerate(filters) if b]
    return tokens or [none_token]


def build_rows(examples: Sequence[TrainingExample], schema: FeatureSchema) -> Rows:
    queries, tokens, eng, book, ew, bw, src = [], [], [], [], [], [], []
    for i, ex in enumerate(examples):
        toks = filter_tokens(ex.filters, schema.none_filter)
        for t in toks:
            queries.append(ex.query)
            tokens.append(t)
            eng.append(ex.filters)
            book.append(ex.booking_label)
            ew.append(ex.weight / len(toks))
            bw.append(ex.weight)
            src.append(i)
    batch = encode_rows(queries, tokens, schema)
    return Rows(
        batch,
        np.asarray(eng, dtype=float).reshape(len(tokens), schema.k),
        np.asarray(book, dtype=float),
        np.asarray(ew, dtype=float),
        np.asarray(bw, dtype=float),
        np.asarray(src, dtype=np.int64),
    )


def batch_loss_and_grads(params: ModelParams, rows: Rows, weights: tuple[float, float],
                         need_grads: bool = True) -> tuple[float, dict[str, np.ndarray] | None]:
    """Mean weighted loss over rows and its gradient for every parameter array."""
    a = params.arrays
    w_e, w_b = weights
    n = len(rows)
    k = params.k
    x = _trunk_inputs(params, rows.batch)
    f_emb = a["emb_filter"][rows.batch.filter_index]
    c = _forward_cache(params, x, f_emb)
    l_eng = _bce(c["p_e"], rows.eng_labels).mean(axis=1)
    l_book = _bce(c["p_b"], rows.book_labels)
    total = float(np.sum(w_e * rows.eng_weight * l_eng + w_b * rows.book_weight * l_book) / n)
    if not need_grads:
        return total, None

    g = {name: np.zeros_like(arr) for name, arr in a.items()}
    h2 = a["W_2"].shape[1]

    d_logit_b = (w_b * rows.book_weight / n) * _dbce_dlogit(c["p_b"], rows.book_labels)
    d_logit_b = d_logit_b[:, None]
    g["W_conv2"] = c["ac"].T @ d_logit_b
    g["b_conv2"] = d_logit_b.sum(axis=0)
    d_zc = (d_logit_b @ a["W_conv2"].T) * (c["zc"] > 0)
    g["W_conv1"] = c["c_in"].T @ d_zc
    g["b_conv1"] = d_zc.sum(axis=0)
    d_cin = d_zc @ a["W_conv1"].T
    np.add.at(g["emb_filter"], rows.batch.filter_index, d_cin[:, h2:])

    d_logit_e = (w_e * rows.eng_weight / (n * k))[:, None] * _dbce_dlogit(c["p_e"], rows.eng_labels)
    g["W_eng"] = c["a2"].T @ d_logit_e
    g["b_eng"] = d_logit_e.sum(axis=0)

    d_a2 = d_logit_e @ a["W_eng"].T + d_cin[:, :h2]
    d_z2 = d_a2 * (c["z2"] > 0)
    g["W_2"] = c["a1"].T @ d_z2
    g["b_2"] = d_z2.sum(axis=0)
    d_z1 = (d_z2 @ a["W_2"].T) * (c["z1"] > 0)
    g["W_1"] = x.T @ d_z1
    g["b_1"] = d_z1.sum(axis=0)
    d_x = d_z1 @ a["W_1"].T

    col = 0
    for j, spec in enumerate(params.schema.categorical):
        name = _emb_name(spec.name)
        np.add.at(g[name], rows.batch.categorical[:, j], d_x[:, col:col + spec.embedding_dim])
        col += spec.embedding_dim
    return total, g


class Adam:
    """Adam with optional decoupled weight decay on weight matrices."""

    def __init__(self, params: ModelParams, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(v) for n, v in params.arrays.items()}
        self.v = {n: np.zeros_like(v) for n, v in params.arrays.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, grad in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            if self.weight_decay and name.startswith("W_"):
                params.arrays[name] *= 1.0 - self.lr * self.weight_decay
            params.arrays[name] -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    eval_loss: list[float] = field(default_factory=list)
    eval_pr_auc_engagement: list[float] = field(default_factory=list)
    eval_pr_auc_booking: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def predict_rows(params: ModelParams, rows: Rows, chunk: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    pe, pb = [], []
    for start in range(0, len(rows), chunk):
        e, b = forward_batch(params, rows.batch.take(slice(start, start + chunk)))
        pe.append(e)
        pb.append(b)
    if not pe:
        return np.zeros((0, params.k)), np.zeros(0)
    return np.concatenate(pe), np.concatenate(pb)


def evaluate_rows(params: ModelParams, rows: Rows) -> dict[str, float]:
    from .evaluation import pr_auc

    loss_value, _ = batch_loss_and_grads(params, rows, params.config.loss_weights, need_grads=False)
    pe, pb = predict_rows(params, rows)
    first = np.r_[True, rows.search_index[1:] != rows.search_index[:-1]]
    out = {"loss": loss_value}
    try:
        out["pr_auc_engagement"] = pr_auc(pe[first].ravel(), rows.eng_labels[first].ravel())
    except ValueError:
        out["pr_auc_engagement"] = float("nan")
    try:
        out["pr_auc_booking"] = pr_auc(pb, rows.book_labels)
    except ValueError:
        out["pr_auc_booking"] = float("nan")
    return out


def train(
    train_set: Sequence[TrainingExample],
    eval_set: Sequence[TrainingExample] = (),
    config: ModelConfig = ModelConfig(),
    schema: FeatureSchema | None = None,
    k: int | None = None,
) -> tuple[ModelParams, History]:
    """Mini-batch Adam on the joint loss.

    Row order is reshuffled each epoch from ``config.seed``; the run is
    deterministic for a fixed config and data order.
    """
    if not train_set:
        raise ValueError("train_set is empty")
    if schema is None:
        schema = fit_schema(train_set, k if k is not None else len(train_set[0].filters))
    params = init(config, schema)
    rows = build_rows(train_set, schema)
    eval_rows = build_rows(eval_set, schema) if eval_set else None
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    history = History()
    for epoch in range(config.epochs):
        order = rng.permutation(len(rows))
        running, count = 0.0, 0
        for start in range(0, len(rows), config.batch_size):
            idx = order[start:start + config.batch_size]
            value, grads = batch_loss_and_grads(params, rows.take(idx), config.loss_weights)
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"loss became {value} at epoch {epoch}, batch starting {start} (lr={config.learning_rate})"
                )
            opt.step(params, grads)
            running += value * len(idx)
            count += len(idx)
        history.train_loss.append(running / count)
        if eval_rows is not None:
            ev = evaluate_rows(params, eval_rows)
            history.eval_loss.append(ev["loss"])
            history.eval_pr_auc_engagement.append(ev["pr_auc_engagement"])
            history.eval_pr_auc_booking.append(ev["pr_auc_booking"])
        logger.info("epoch %d train_loss %.5f", epoch + 1, history.train_loss[-1])
    return params, history


def full_loss(params: ModelParams, rows: Rows, weights: tuple[float, float] | None = None) -> float:
    return batch_loss_and_grads(params, rows, weights or params.config.loss_weights, need_grads=False)[0]


def _sample_coordinates(params: ModelParams, rows: Rows, per_tensor: int, rng) -> list[tuple[str, tuple]]:
    coords = []
    for name in sorted(params.arrays):
        arr = params.arrays[name]
        if name.startswith("emb_"):
            # only rows referenced by the batch can have a non-zero gradient
            if name == "emb_filter":
                used = np.unique(rows.batch.filter_index)
            else:
                feature = name[len("emb_"):]
                j = [c.name for c in params.schema.categorical].index(feature)
                used = np.unique(rows.batch.categorical[:, j])
            for _ in range(per_tensor):
                coords.append((name, (int(rng.choice(used)), int(rng.integers(arr.shape[1])))))
        else:
            for _ in range(per_tensor):
                coords.append((name, tuple(int(rng.integers(s)) for s in arr.shape)))
    return coords


def gradient_errors(
    params: ModelParams,
    examples: Sequence[TrainingExample] | Rows,
    epsilon: float = 1e-5,
    *,
    weights: tuple[float, float] | None = None,
    per_tensor: int = 8,
    seed: int = 0,
    floor: float = 1e-6,
) -> dict[str, float]:
    """Worst relative error per parameter array, analytic vs. central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    round-off on vanishing gradients from dominating.  ``per_tensor``
    coordinates are drawn from every parameter array (at least 100 in total).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must be in [1e-6, 1e-3]")
    rows = examples if isinstance(examples, Rows) else build_rows(examples, params.schema)
    weights = weights or params.config.loss_weights
    work = params.copy()
    _, grads = batch_loss_and_grads(work, rows, weights)
    rng = np.random.default_rng(seed)
    per_tensor = max(per_tensor, -(-100 // len(work.arrays)))
    worst = {name: 0.0 for name in work.arrays}
    for name, idx in _sample_coordinates(work, rows, per_tensor, rng):
        arr = work.arrays[name]
        old = arr[idx]
        arr[idx] = old + epsilon
        up = batch_loss_and_grads(work, rows, weights, need_grads=False)[0]
        arr[idx] = old - epsilon
        down = batch_loss_and_grads(work, rows, weights, need_grads=False)[0]
        arr[idx] = old
        numeric = (up - down) / (2.0 * epsilon)
        analytic = grads[name][idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst[name] = max(worst[name], err)
    return worst


def gradient_check(params: ModelParams, examples: Sequence[TrainingExample] | Rows, epsilon: float = 1e-5,
                   **kwargs) -> float:
    """Largest relative gradient error over all sampled coordinates (see ``gradient_errors``)."""
    return max(gradient_errors(params, examples, epsilon, **kwargs).values())


# -- persistence -------------------------------------------------------------

MODEL_FILE = "model.bin"
SCHEMA_FILE = "schema.json"


def save(params: ModelParams, schema: FeatureSchema | None, path: str | Path) -> Path:
    """Write ``model.bin`` (zip of .npy arrays plus a JSON header) and ``schema.json``."""
    schema = schema or params.schema
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "schema_sha256": schema.fingerprint(),
        "k": schema.k,
        "config": params.config.to_json(),
        "arrays": sorted(params.arrays),
    }
    buf = io.BytesIO()
    # fixed entry timestamps keep the file, and so the version hash, a pure function of the weights
    stamp = (2020, 1, 1, 0, 0, 0)
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", date_time=stamp), json.dumps(meta, sort_keys=True))
        for name in sorted(params.arrays):
            arr_buf = io.BytesIO()
            np.save(arr_buf, np.ascontiguousarray(params.arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=stamp), arr_buf.getvalue())
    (out / MODEL_FILE).write_bytes(buf.getvalue())
    schema.save(out / SCHEMA_FILE)
    return out


def load(path: str | Path) -> ModelParams:
    base = Path(path)
    try:
        schema = FeatureSchema.load(base / SCHEMA_FILE)
    except (OSError, ValueError, KeyError) as exc:
        raise ModelFormatError(f"cannot read schema: {exc}") from exc
    try:
        with zipfile.ZipFile(base / MODEL_FILE) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format") != FORMAT_NAME or meta.get("version") != FORMAT_VERSION:
                raise ModelFormatError(f"unsupported model format {meta.get('format')} v{meta.get('version')}")
            if meta["schema_sha256"] != schema.fingerprint():
                raise SchemaMismatchError("schema.json does not match the schema the weights were trained with")
            arrays = {
                name: np.load(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False) for name in meta["arrays"]
            }
            config = ModelConfig.from_json(meta["config"])
    except (SchemaMismatchError, ModelFormatError):
        raise
    except (OSError, zipfile.BadZipFile, KeyError, ValueError, EOFError) as exc:
        raise ModelFormatError(f"corrupt model file: {exc}") from exc
    params = ModelParams(arrays, schema, config)
    expected = init(config, schema)
    for name, arr in expected.arrays.items():
        if name not in arrays or arrays[name].shape != arr.shape:
            raise ModelFormatError(f"array {name} missing or has wrong shape")
    return params


def model_version(path: str | Path) -> str:
    """Hash prefix of the weight file."""
    return hashlib.sha256((Path(path) / MODEL_FILE).read_bytes()).hexdigest()[:12]
