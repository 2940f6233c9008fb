"""Fully connected ReLU network with softmax output, written against NumPy.

Everything works on one flat float64 parameter vector; layer views are
carved out of it on demand. Besides the forward pass and the gradient of
the summed cross-entropy loss, `hvp` computes exact Hessian-vector
products with Pearlmutter's R-operator (forward-over-reverse), which is
what the second-order meta-gradient needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, PreconditionError

PROB_CLAMP = 1e-12
_LOG_CLAMP = np.log(PROB_CLAMP)
DEFAULT_HIDDEN = (256, 128, 128)
INIT_SCHEME = "glorot_uniform"
HVP_METHOD = "r_operator"
CHECKPOINT_VERSION = 1
SUM = "sum"
MEAN = "mean"
REDUCTIONS = (SUM, MEAN)


@dataclass(frozen=True)
class NetworkShape:
    input_dim: int
    hidden: tuple = DEFAULT_HIDDEN
    output_dim: int = 7

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise PreconditionError(f"invalid layer sizes in {self}")
        if self.output_dim < 2:
            raise PreconditionError("output_dim must be at least 2")

    @property
    def sizes(self) -> tuple:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum((a + 1) * b for a, b in zip(s[:-1], s[1:]))

    def slices(self):
        """Per layer: (weight slice, weight shape, bias slice)."""
        out, off = [], 0
        s = self.sizes
        for a, b in zip(s[:-1], s[1:]):
            w = slice(off, off + a * b)
            off += a * b
            bias = slice(off, off + b)
            off += b
            out.append((w, (a, b), bias))
        return out

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden), "output_dim": self.output_dim}

    @classmethod
    def from_dict(cls, d) -> "NetworkShape":
        return cls(int(d["input_dim"]), tuple(d["hidden"]), int(d["output_dim"]))


@dataclass(frozen=True)
class ParameterSet:
    shape: NetworkShape
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        flat = np.array(self.flat, dtype=np.float64, copy=True).ravel()
        if flat.size != self.shape.n_params:
            raise PreconditionError(
                f"flat vector has {flat.size} entries, shape needs {self.shape.n_params}"
            )
        flat.flags.writeable = False
        object.__setattr__(self, "flat", flat)

    def layers(self):
        return unflatten(self.flat, self.shape)

    def __eq__(self, other):
        return (
            isinstance(other, ParameterSet)
            and self.shape == other.shape
            and np.array_equal(self.flat, other.flat)
        )

    __hash__ = None


def unflatten(flat, shape: NetworkShape) -> list:
    return [(flat[w].reshape(ws), flat[b]) for w, ws, b in shape.slices()]


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


def init_network(shape: NetworkShape, seed: int) -> ParameterSet:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    flat = np.zeros(shape.n_params)
    for w, (fan_in, fan_out), _ in shape.slices():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        flat[w] = rng.uniform(-limit, limit, size=fan_in * fan_out)
    return ParameterSet(shape, flat)


def _as_flat(params):
    if isinstance(params, ParameterSet):
        return params.flat, params.shape
    raise TypeError(f"expected ParameterSet, got {type(params).__name__}")


def _check_input(X, shape):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != shape.input_dim:
        raise PreconditionError(f"input has {X.shape[1]} features, network expects {shape.input_dim}")
    return X, single


def _forward_pass(flat, shape, X):
    """Return (layers, activations, pre-activations, logits)."""
    layers = unflatten(flat, shape)
    acts = [X]
    pre = []
    h = X
    for W, b in layers[:-1]:
        z = h @ W + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    W, b = layers[-1]
    return layers, acts, pre, h @ W + b


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(params: ParameterSet, X) -> np.ndarray:
    flat, shape = _as_flat(params)
    X, single = _check_input(X, shape)
    out = _forward_pass(flat, shape, X)[3]
    return out[0] if single else out


def forward(params: ParameterSet, X) -> np.ndarray:
    """Class probabilities for one sample (1-D) or a batch (2-D)."""
    flat, shape = _as_flat(params)
    X, single = _check_input(X, shape)
    probs = _softmax(_forward_pass(flat, shape, X)[3])
    return probs[0] if single else probs


def cross_entropy(probs, y) -> float:
    """-sum_k y_k ln p_k for a one-hot `y`, with p clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != probs.shape:
        raise PreconditionError(f"label length {y.shape} != prediction length {probs.shape}")
    if not (np.all((y == 0) | (y == 1)) and y.sum() == 1):
        raise PreconditionError("label vector is not one-hot")
    return float(-np.log(max(probs[int(np.argmax(y))], PROB_CLAMP)))


def one_hot(labels, n_classes) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _scale(reduction, n) -> float:
    if reduction == SUM:
        return 1.0
    if reduction == MEAN:
        return 1.0 / n
    raise PreconditionError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")


def _check_batch(X, labels, shape):
    X, _ = _check_input(X, shape)
    labels = np.asarray(labels, dtype=int).ravel()
    if X.shape[0] == 0:
        raise PreconditionError("empty batch")
    if labels.size != X.shape[0]:
        raise PreconditionError(f"{X.shape[0]} inputs but {labels.size} labels")
    if labels.min() < 0 or labels.max() >= shape.output_dim:
        raise PreconditionError(f"labels must lie in [0, {shape.output_dim})")
    return X, labels


def _loss_terms(z, labels):
    logp = _log_softmax(z)[np.arange(labels.size), labels]
    live = logp >= _LOG_CLAMP  # clamped samples contribute a constant
    return -np.maximum(logp, _LOG_CLAMP), live


def batch_loss(params: ParameterSet, X, labels, reduction=SUM) -> float:
    """Cross-entropy over the batch, summed (default) or averaged.

    Labels are class indices.
    """
    flat, shape = _as_flat(params)
    return flat_loss(flat, shape, X, labels, reduction)


def flat_loss(flat, shape, X, labels, reduction=SUM) -> float:
    X, labels = _check_batch(X, labels, shape)
    z = _forward_pass(flat, shape, X)[3]
    return float(_loss_terms(z, labels)[0].sum()) * _scale(reduction, labels.size)


def _backward(layers, acts, pre, delta):
    """Reverse pass from the output-layer error `delta`; returns flat gradient and deltas."""
    grads = [None] * len(layers)
    deltas = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        deltas[i] = delta
        W, _ = layers[i]
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ W.T) * (pre[i - 1] > 0)
    return flatten(grads), deltas


def flat_loss_and_grad(flat, shape, X, labels, reduction=SUM):
    X, labels = _check_batch(X, labels, shape)
    c = _scale(reduction, labels.size)
    layers, acts, pre, z = _forward_pass(flat, shape, X)
    terms, live = _loss_terms(z, labels)
    delta = (_softmax(z) - one_hot(labels, shape.output_dim)) * (c * live)[:, None]
    g, _ = _backward(layers, acts, pre, delta)
    return float(terms.sum()) * c, g


def grad(params: ParameterSet, X, labels, reduction=SUM) -> np.ndarray:
    """Gradient of `batch_loss` w.r.t. the flat parameter vector."""
    flat, shape = _as_flat(params)
    return flat_loss_and_grad(flat, shape, X, labels, reduction)[1]


def flat_hvp(flat, shape, X, labels, vec, reduction=SUM) -> np.ndarray:
    X, labels = _check_batch(X, labels, shape)
    c = _scale(reduction, labels.size)
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != flat.shape:
        raise PreconditionError(f"vector length {vec.size} != parameter count {flat.size}")
    layers, acts, pre, z = _forward_pass(flat, shape, X)
    _, live = _loss_terms(z, labels)
    live = c * live
    p = _softmax(z)
    delta = (p - one_hot(labels, shape.output_dim)) * live[:, None]
    _, deltas = _backward(layers, acts, pre, delta)
    vlayers = unflatten(vec, shape)

    # Forward R-pass: directional derivatives of activations.
    r_acts = [np.zeros_like(X)]
    r_z = None
    for i, ((W, _), (VW, Vb)) in enumerate(zip(layers, vlayers)):
        r_z = r_acts[i] @ W + acts[i] @ VW + Vb
        if i < len(layers) - 1:
            r_acts.append(r_z * (pre[i] > 0))
    r_delta = p * (r_z - (p * r_z).sum(axis=1, keepdims=True)) * live[:, None]

    # Backward R-pass.
    out = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        out[i] = (r_acts[i].T @ deltas[i] + acts[i].T @ r_delta, r_delta.sum(axis=0))
        if i > 0:
            W, _ = layers[i]
            VW, _ = vlayers[i]
            r_delta = (r_delta @ W.T + deltas[i] @ VW.T) * (pre[i - 1] > 0)
    return flatten(out)


def hvp(params: ParameterSet, X, labels, vec, reduction=SUM) -> np.ndarray:
    """Hessian of `batch_loss` times `vec` (exact; ReLU curvature is 0 a.e.)."""
    flat, shape = _as_flat(params)
    return flat_hvp(flat, shape, X, labels, vec, reduction)


def save_checkpoint(path, header: dict, arrays: dict) -> None:
    """One JSON header line, then each array as little-endian float64."""
    header = dict(header)
    header["format_version"] = CHECKPOINT_VERSION
    header["arrays"] = [{"name": k, "length": int(np.asarray(v).size)} for k, v in arrays.items()]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(blob + b"\n")
        for v in arrays.values():
            fh.write(np.asarray(v, dtype="<f8").ravel().tobytes())


def load_checkpoint(path) -> tuple:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: no checkpoint header")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header: {exc}") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unknown checkpoint version {header.get('format_version')!r}")
    arrays = {}
    off = nl + 1
    for spec in header["arrays"]:
        n = spec["length"] * 8
        if off + n > len(data):
            raise FormatError(f"{path}: checkpoint truncated in array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(data[off:off + n], dtype="<f8").astype(np.float64)
        off += n
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes after arrays")
    return header, arrays


def save_parameters(path, params: ParameterSet, seed=None) -> None:
    save_checkpoint(
        path,
        {"shape": params.shape.to_dict(), "seed": seed, "init_scheme": INIT_SCHEME},
        {"theta": params.flat},
    )


def load_parameters(path) -> ParameterSet:
    header, arrays = load_checkpoint(path)
    return ParameterSet(NetworkShape.from_dict(header["shape"]), arrays["theta"])
