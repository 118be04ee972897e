"""GIN-based system performance predictors, written directly in NumPy.

Encoder: an optional per-node input projection ``relu(x W0 + b0)``, then two
GIN layers, each ``relu(W2 relu(W1 (x_v + sum_{u in N(v)} x_u) + b1) + b2)``
(epsilon fixed at 0; the graph's self-loops make the self term appear twice),
followed by global mean pooling.

Heads:
  * throughput: ``output_scale * softplus(w . g + b)``, where ``output_scale``
    is the geometric mean of the training targets. Training starts on the
    log-ratio loss and switches to MAPE (see ``train_throughput``);
  * relative: a shared scorer ``s = w . g + b`` applied to both schemes, and
    ``p(A faster) = sigmoid(s_A - s_B)``, trained with binary cross entropy.

All batches hold graphs of one topology so aggregation is a single dense
``(N, N)`` matrix broadcast over the batch.
"""
from __future__ import annotations

import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .samples import PairSample, Sample, split_groups
from .sysgraph import FEATURE_DIM, Normalizer, SystemGraph, features_from_raw, normalizer_fit

log = logging.getLogger(__name__)

ENCODER_PARAMS = ("gin1.w1", "gin1.b1", "gin1.w2", "gin1.b2",
                  "gin2.w1", "gin2.b1", "gin2.w2", "gin2.b2")
INPUT_PARAMS = ("enc.w", "enc.b")
HEAD_PARAMS = {"throughput": ("thr.w", "thr.b"), "relative": ("rel.w", "rel.b")}


def encoder_keys(params: dict) -> tuple[str, ...]:
    return (INPUT_PARAMS if "enc.w" in params else ()) + ENCODER_PARAMS


def aggregation_matrix(graph: SystemGraph) -> np.ndarray:
    """``I + A`` with ``A[dst, src]`` counting in-edges (self-loops included)."""
    return np.eye(graph.n_nodes) + graph.adjacency()


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    """Logistic function with ``sigmoid(-z) == 1 - sigmoid(z)`` holding exactly."""
    z = np.asarray(z, dtype=float)
    pos = 1.0 / (1.0 + np.exp(-np.abs(z)))
    return np.where(z >= 0, pos, 1.0 - pos)


def init_params(hidden: int, seed: int, feature_dim: int = FEATURE_DIM,
                input_layer: bool = True) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)

    def he(fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))

    p = {}
    gin_in = feature_dim
    if input_layer:
        p["enc.w"], p["enc.b"] = he(feature_dim, hidden), np.full(hidden, 0.01)
        gin_in = hidden
    p.update({
        "gin1.w1": he(gin_in, hidden), "gin1.b1": np.zeros(hidden),
        "gin1.w2": he(hidden, hidden), "gin1.b2": np.zeros(hidden),
        "gin2.w1": he(hidden, hidden), "gin2.b1": np.zeros(hidden),
        "gin2.w2": he(hidden, hidden), "gin2.b2": np.zeros(hidden),
        "thr.w": rng.normal(0.0, np.sqrt(1.0 / hidden), size=hidden), "thr.b": np.zeros(1),
        "rel.w": rng.normal(0.0, np.sqrt(1.0 / hidden), size=hidden), "rel.b": np.zeros(1),
    })
    return p


def _gin_forward(M, X, w1, b1, w2, b2):
    U = np.matmul(M, X)
    Z1 = U @ w1 + b1
    R1 = np.maximum(Z1, 0.0)
    Z2 = R1 @ w2 + b2
    H = np.maximum(Z2, 0.0)
    return H, (U, Z1, R1, Z2)


def _gin_backward(M, dH, cache, w1, w2, prefix, grads, need_input=True):
    U, Z1, R1, Z2 = cache
    dZ2 = dH * (Z2 > 0)
    grads[prefix + "w2"] += np.einsum("bnh,bnk->hk", R1, dZ2)
    grads[prefix + "b2"] += dZ2.sum(axis=(0, 1))
    dZ1 = (dZ2 @ w2.T) * (Z1 > 0)
    grads[prefix + "w1"] += np.einsum("bnf,bnh->fh", U, dZ1)
    grads[prefix + "b1"] += dZ1.sum(axis=(0, 1))
    if need_input:
        return np.matmul(M.T, dZ1 @ w1.T)
    return None


def encode_batch(params: dict, M: np.ndarray, X: np.ndarray, keep_cache: bool = False):
    """Graph embeddings ``(B, H)`` for a batch ``X`` of shape ``(B, N, F)`` sharing ``M``."""
    c0 = None
    if "enc.w" in params:
        Z0 = X @ params["enc.w"] + params["enc.b"]
        c0 = (X, Z0)
        X = np.maximum(Z0, 0.0)
    H1, c1 = _gin_forward(M, X, params["gin1.w1"], params["gin1.b1"], params["gin1.w2"], params["gin1.b2"])
    H2, c2 = _gin_forward(M, H1, params["gin2.w1"], params["gin2.b1"], params["gin2.w2"], params["gin2.b2"])
    g = H2.mean(axis=1)
    if keep_cache:
        return g, (c0, c1, c2, H2.shape[1])
    return g


def _encode_backward(params, M, dg, cache, grads):
    c0, c1, c2, n = cache
    dH2 = np.repeat(dg[:, None, :] / n, n, axis=1)
    dH1 = _gin_backward(M, dH2, c2, params["gin2.w1"], params["gin2.w2"], "gin2.", grads)
    dX0 = _gin_backward(M, dH1, c1, params["gin1.w1"], params["gin1.w2"], "gin1.", grads, need_input=c0 is not None)
    if c0 is not None:
        X, Z0 = c0
        dZ0 = dX0 * (Z0 > 0)
        grads["enc.w"] += np.einsum("bnf,bnh->fh", X, dZ0)
        grads["enc.b"] += dZ0.sum(axis=(0, 1))


def encode(graph: SystemGraph, features: np.ndarray, weights: dict) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.shape[0] != graph.n_nodes:
        raise ValueError(f"feature rows ({features.shape[0]}) do not match graph nodes ({graph.n_nodes})")
    first = weights["enc.w"] if "enc.w" in weights else weights["gin1.w1"]
    if features.shape[1] != first.shape[0]:
        raise ValueError(f"feature dim {features.shape[1]} != encoder input {first.shape[0]}")
    return encode_batch(weights, aggregation_matrix(graph), features[None])[0]


def throughput_loss_and_grads(params, M, X, y, scale, loss_kind: str = "mape"):
    """Loss of the throughput head and its gradient w.r.t. every parameter.

    ``loss_kind`` is ``"mape"`` or ``"log"`` (mean ``|ln(pred / y)|``, which
    matches MAPE to first order but penalises under-prediction symmetrically).
    """
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    g, cache = encode_batch(params, M, X, keep_cache=True)
    z = g @ params["thr.w"] + params["thr.b"][0]
    pred = scale * softplus(z)
    if loss_kind == "log":
        ratio = np.log(np.maximum(pred, 1e-300) / y)
        loss = float(np.mean(np.abs(ratio)))
        dpred = np.sign(ratio) / np.maximum(pred, 1e-300) / len(y)
    elif loss_kind == "mape":
        loss = float(np.mean(np.abs(pred - y) / y))
        dpred = np.sign(pred - y) / y / len(y)
    else:
        raise ValueError(f"unknown loss {loss_kind!r}")
    dz = dpred * scale * sigmoid(z)
    grads["thr.w"] += g.T @ dz
    grads["thr.b"] += dz.sum()
    _encode_backward(params, M, np.outer(dz, params["thr.w"]), cache, grads)
    return loss, grads


def relative_loss_and_grads(params, M, XA, XB, y):
    """Binary cross entropy of ``p(A faster)`` and its gradient."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    gA, cA = encode_batch(params, M, XA, keep_cache=True)
    gB, cB = encode_batch(params, M, XB, keep_cache=True)
    w, b = params["rel.w"], params["rel.b"][0]
    d = (gA @ w + b) - (gB @ w + b)
    loss = float(np.mean(softplus(d) - y * d))
    dd = (sigmoid(d) - y) / len(y)
    grads["rel.w"] += gA.T @ dd - gB.T @ dd
    # rel.b cancels in s_A - s_B, so its gradient stays zero
    _encode_backward(params, M, np.outer(dd, w), cA, grads)
    _encode_backward(params, M, np.outer(-dd, w), cB, grads)
    return loss, grads


@dataclass
class PredictorModel:
    hidden: int
    params: dict[str, np.ndarray]
    normalizer: Normalizer | None = None
    output_scale: float = 1.0
    head: str = "both"
    trained: bool = False
    metadata: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, hidden: int = 64, seed: int = 0, head: str = "both",
              normalizer: Normalizer | None = None, input_layer: bool = True) -> "PredictorModel":
        if hidden < 1:
            raise ValueError("hidden width must be positive")
        return cls(hidden, init_params(hidden, seed, input_layer=input_layer), normalizer, head=head)

    @classmethod
    def zeros(cls, hidden: int = 64, input_layer: bool = True) -> "PredictorModel":
        m = cls.fresh(hidden, input_layer=input_layer)
        m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
        return m

    def features(self, graph: SystemGraph, raw: np.ndarray) -> np.ndarray:
        if self.normalizer is None:
            raise ValueError("model has no fitted normalizer")
        return features_from_raw(graph, raw, self.normalizer)

    def _flag_untrained(self):
        if not self.trained:
            self.metadata["used_untrained"] = True

    def predict_throughput(self, graph: SystemGraph, features: np.ndarray) -> float:
        self._flag_untrained()
        g = encode(graph, features, self.params)
        return float(self.output_scale * softplus(g @ self.params["thr.w"] + self.params["thr.b"][0]))

    def score(self, graph: SystemGraph, features: np.ndarray) -> float:
        """Scalar scheme score of the relative head; higher means faster."""
        g = encode(graph, features, self.params)
        return float(g @ self.params["rel.w"] + self.params["rel.b"][0])

    def scores_batch(self, M: np.ndarray, X: np.ndarray) -> np.ndarray:
        return encode_batch(self.params, M, X) @ self.params["rel.w"] + self.params["rel.b"][0]

    def predict_relative(self, graph: SystemGraph, feats_a: np.ndarray, feats_b: np.ndarray) -> float:
        self._flag_untrained()
        if np.shape(feats_a) != np.shape(feats_b) or np.shape(feats_a)[0] != graph.n_nodes:
            raise ValueError("feature matrices do not share the graph topology")
        return float(sigmoid(self.score(graph, feats_a) - self.score(graph, feats_b)))


def predict_throughput(model: PredictorModel, graph: SystemGraph, features: np.ndarray) -> float:
    return model.predict_throughput(graph, features)


def predict_relative(model: PredictorModel, graph: SystemGraph, feats_a, feats_b) -> float:
    return model.predict_relative(graph, feats_a, feats_b)


# --------------------------------------------------------------------------- training

class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, keys: Sequence[str], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k in keys:
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * grads[k]
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * grads[k] ** 2
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _bucket(items, graph_of):
    buckets: dict = defaultdict(list)
    graphs = {}
    for idx, it in enumerate(items):
        g = graph_of(it)
        sig = g.signature()
        buckets[sig].append(idx)
        graphs[sig] = g
    return [(aggregation_matrix(graphs[sig]), np.asarray(ix)) for sig, ix in sorted(buckets.items(), key=lambda kv: len(kv[0][0]))]


def _minibatches(buckets, batch_size, rng):
    batches = []
    for M, ix in buckets:
        perm = ix[rng.permutation(len(ix))]
        for i in range(0, len(perm), batch_size):
            batches.append((M, perm[i:i + batch_size]))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def cosine_lr(lr: float, epoch: int, epochs: int, floor: float = 0.05) -> float:
    """Cosine decay from ``lr`` down to ``floor * lr`` over the run."""
    frac = epoch / max(epochs - 1, 1)
    return lr * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * frac)))


def _fit_normalizer(raws: Sequence[np.ndarray]) -> Normalizer:
    return normalizer_fit(np.concatenate([np.ravel(r) for r in raws]))


def _stack(graph: SystemGraph, raws, normalizer) -> np.ndarray:
    return np.stack([features_from_raw(graph, r, normalizer) for r in raws])


def mape_within(pred: np.ndarray, true: np.ndarray, bound: float = 0.2) -> float:
    return float(np.mean(np.abs(pred - true) / true <= bound))


def evaluate_throughput(model: PredictorModel, samples: Sequence[Sample]) -> dict:
    pred = np.array([model.predict_throughput(s.graph, model.features(s.graph, s.raw)) for s in samples])
    true = np.array([s.throughput for s in samples])
    err = np.abs(pred - true) / true
    return {"mape": float(err.mean()), "within_10": float(np.mean(err <= 0.1)),
            "within_20": float(np.mean(err <= 0.2)), "n": len(samples)}


def evaluate_relative(model: PredictorModel, pairs: Sequence[PairSample]) -> float:
    if not pairs:
        return float("nan")
    correct = 0
    for p in pairs:
        prob = model.predict_relative(p.graph, model.features(p.graph, p.raw_a), model.features(p.graph, p.raw_b))
        correct += int((prob > 0.5) == bool(p.label))
    return correct / len(pairs)


def train_throughput(samples: Sequence[Sample], epochs: int = 200, lr: float = 1e-3, seed: int = 0,
                     hidden: int = 64, batch_size: int = 32, val_samples: Sequence[Sample] | None = None,
                     warmup: float = 0.5, input_layer: bool = True) -> tuple[PredictorModel, float]:
    """Fit encoder + throughput head; returns the model and validation MAPE.

    The first ``warmup`` fraction of epochs minimises the log-ratio loss, the
    rest MAPE. Plain MAPE from a random start tends to slide every prediction
    towards the smallest targets, where its gradient vanishes. The weights of
    the epoch with the lowest training MAPE are kept.
    """
    if len(samples) < 2 and val_samples is None:
        raise ValueError("need at least two samples")
    if not samples:
        raise ValueError("no training samples")
    if val_samples is None:
        train, val = split_groups(samples, 0.7, seed)
    else:
        train, val = list(samples), list(val_samples)
    targets = np.array([s.throughput for s in train])
    if np.all(targets == targets[0]):
        log.warning("all training targets are equal; the throughput head has nothing to learn")
    normalizer = _fit_normalizer([s.raw for s in train])
    model = PredictorModel.fresh(hidden, seed, "throughput", normalizer, input_layer)
    model.output_scale = float(np.exp(np.mean(np.log(targets))))
    keys = encoder_keys(model.params) + HEAD_PARAMS["throughput"]
    opt = Adam(model.params, lr)
    rng = np.random.default_rng(seed)
    buckets = _bucket(train, lambda s: s.graph)
    feats = {}
    for M, ix in buckets:
        g = train[ix[0]].graph
        feats[id(M)] = (g, ix, _stack(g, [train[i].raw for i in ix], normalizer))
    pos = {}
    for M, ix in buckets:
        pos.update({int(i): k for k, i in enumerate(ix)})
    n_warm = int(round(warmup * epochs))

    def train_mape():
        err = 0.0
        for M, ix in buckets:
            _, _, X_all = feats[id(M)]
            z = encode_batch(model.params, M, X_all) @ model.params["thr.w"] + model.params["thr.b"][0]
            err += float(np.sum(np.abs(model.output_scale * softplus(z) - targets[ix]) / targets[ix]))
        return err / len(train)

    history = []
    best, best_params = np.inf, None
    for epoch in range(epochs):
        total, count = 0.0, 0
        step_lr = cosine_lr(lr, epoch, epochs)
        kind = "log" if epoch < n_warm else "mape"
        for M, idx in _minibatches(buckets, batch_size, rng):
            _, _, X_all = feats[id(M)]
            X = X_all[[pos[int(i)] for i in idx]]
            loss, grads = throughput_loss_and_grads(model.params, M, X, targets[idx], model.output_scale, kind)
            opt.step(model.params, grads, keys, step_lr)
            total += loss * len(idx)
            count += len(idx)
        history.append(total / count)
        if epoch >= n_warm - 1:
            current = train_mape()
            if current < best:
                best, best_params = current, {k: v.copy() for k, v in model.params.items()}
    if best_params is not None:
        model.params = best_params
    model.trained = True
    model.metadata.update(history=history, epochs=epochs, lr=lr, seed=seed, n_train=len(train), n_val=len(val),
                          train_mape=best)
    if val:
        metrics = evaluate_throughput(model, val)
        model.metadata["validation"] = metrics
        return model, metrics["mape"]
    return model, float("nan")


def train_relative(pairs: Sequence[PairSample], epochs: int = 100, lr: float = 1e-3, seed: int = 0,
                   hidden: int = 64, batch_size: int = 64, val_pairs: Sequence[PairSample] | None = None,
                   input_layer: bool = True) -> tuple[PredictorModel, float]:
    """Fit encoder + pairwise scorer with BCE; returns the model and validation accuracy."""
    if not pairs:
        raise ValueError("no training pairs")
    pairs = list(pairs)
    if val_pairs is None:
        rng0 = np.random.default_rng(seed)
        perm = rng0.permutation(len(pairs))
        cut = max(1, int(round(0.7 * len(pairs))))
        train = [pairs[i] for i in perm[:cut]]
        val = [pairs[i] for i in perm[cut:]]
    else:
        train, val = pairs, list(val_pairs)
    labels = np.array([p.label for p in train], dtype=float)
    if np.all(labels == labels[0]):
        log.warning("all training labels are equal")
    normalizer = _fit_normalizer([p.raw_a for p in train] + [p.raw_b for p in train])
    model = PredictorModel.fresh(hidden, seed, "relative", normalizer, input_layer)
    keys = encoder_keys(model.params) + HEAD_PARAMS["relative"]
    opt = Adam(model.params, lr)
    rng = np.random.default_rng(seed)
    buckets = _bucket(train, lambda p: p.graph)
    cache = {}
    for M, ix in buckets:
        g = train[ix[0]].graph
        cache[id(M)] = (_stack(g, [train[i].raw_a for i in ix], normalizer),
                        _stack(g, [train[i].raw_b for i in ix], normalizer),
                        {int(i): k for k, i in enumerate(ix)})
    history = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        step_lr = cosine_lr(lr, epoch, epochs)
        for M, idx in _minibatches(buckets, batch_size, rng):
            XA, XB, pos = cache[id(M)]
            rows = [pos[int(i)] for i in idx]
            loss, grads = relative_loss_and_grads(model.params, M, XA[rows], XB[rows], labels[idx])
            opt.step(model.params, grads, keys, step_lr)
            total += loss * len(idx)
            count += len(idx)
        history.append(total / count)
    model.trained = True
    model.metadata.update(history=history, epochs=epochs, lr=lr, seed=seed, n_train=len(train), n_val=len(val))
    if val:
        acc = evaluate_relative(model, val)
        model.metadata["validation_accuracy"] = acc
        return model, acc
    return model, float("nan")


# --------------------------------------------------------------------------- gradient check

def grad_check(model: PredictorModel, sample: Sample | None = None, pair: PairSample | None = None,
               n_weights: int = 30, step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences.

    Checks the MAPE loss on ``sample`` and the BCE loss on ``pair`` (whichever
    are given) over a seeded random subset of ``n_weights`` scalars per loss.
    """
    rng = np.random.default_rng(seed)
    params = {k: v.astype(np.float64).copy() for k, v in model.params.items()}
    norm = model.normalizer or Normalizer(0.0, 10.0)
    losses = []
    if sample is not None:
        M = aggregation_matrix(sample.graph)
        X = features_from_raw(sample.graph, sample.raw, norm)[None]
        y = np.array([sample.throughput], dtype=float)
        losses.append((lambda p, M=M, X=X, y=y: throughput_loss_and_grads(p, M, X, y, model.output_scale),
                       encoder_keys(params) + HEAD_PARAMS["throughput"]))
    if pair is not None:
        M = aggregation_matrix(pair.graph)
        XA = features_from_raw(pair.graph, pair.raw_a, norm)[None]
        XB = features_from_raw(pair.graph, pair.raw_b, norm)[None]
        y = np.array([pair.label], dtype=float)
        losses.append((lambda p, M=M, XA=XA, XB=XB, y=y: relative_loss_and_grads(p, M, XA, XB, y),
                       encoder_keys(params) + HEAD_PARAMS["relative"]))
    worst = 0.0
    for fn, keys in losses:
        _, grads = fn(params)
        sizes = np.array([params[k].size for k in keys])
        for _ in range(n_weights):
            k = keys[rng.choice(len(keys), p=sizes / sizes.sum())]
            flat = int(rng.integers(params[k].size))
            orig = params[k].flat[flat]
            params[k].flat[flat] = orig + step
            lp, _ = fn(params)
            params[k].flat[flat] = orig - step
            lm, _ = fn(params)
            params[k].flat[flat] = orig
            numeric = (lp - lm) / (2 * step)
            analytic = grads[k].flat[flat]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------- checkpoint

MAGIC = b"CIGNNPRD"
FORMAT_VERSION = 1
_FLAG_NORMALIZER = 1
_FLAG_TRAINED = 2


def save_checkpoint(model: PredictorModel, path: str | Path) -> None:
    flags = (_FLAG_NORMALIZER if model.normalizer else 0) | (_FLAG_TRAINED if model.trained else 0)
    v_min, v_max = (model.normalizer.v_min, model.normalizer.v_max) if model.normalizer else (0.0, 0.0)
    head = model.head.encode()
    out = bytearray(MAGIC)
    first = model.params["enc.w"] if "enc.w" in model.params else model.params["gin1.w1"]
    out += struct.pack("<HHII", FORMAT_VERSION, flags, model.hidden, first.shape[0])
    out += struct.pack("<ddd", v_min, v_max, model.output_scale)
    out += struct.pack("<I", len(head)) + head
    out += struct.pack("<I", len(model.params))
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> PredictorModel:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError("not a predictor checkpoint")
    off = 8
    version, flags, hidden, _fdim = struct.unpack_from("<HHII", buf, off)
    off += 12
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    v_min, v_max, scale = struct.unpack_from("<ddd", buf, off)
    off += 24
    (hl,) = struct.unpack_from("<I", buf, off)
    off += 4
    head = buf[off:off + hl].decode()
    off += hl
    (nblocks,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(nblocks):
        (nl,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nl].decode()
        off += nl
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += 8 * count
    norm = Normalizer(v_min, v_max) if flags & _FLAG_NORMALIZER else None
    return PredictorModel(hidden, params, norm, scale, head, bool(flags & _FLAG_TRAINED))

