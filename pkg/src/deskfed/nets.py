"""Minimal dense-network substrate with exact analytic gradients.

Client classifiers, the parameter auto-encoder, and the actor/critic heads
are all plain fully connected stacks over float64 numpy arrays. The
parameters of one network live in a single flat vector plus a layer
manifest, which makes weighted averaging, noise injection, and binary
checkpointing trivial.

Flat layout: for each layer in manifest order, the weight matrix
(in_dim x out_dim, row major) followed by the bias vector (out_dim).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "softmax", "identity")

LOSS_KINDS = ("cross_entropy", "mse")


@dataclass(frozen=True)
class LayerSpec:
    """One fully connected layer: y = act(x W + b)."""

    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(
                f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def size(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


def validate_manifest(manifest: Sequence[LayerSpec]) -> tuple[LayerSpec, ...]:
    """Check layer chaining and softmax placement; return a tuple manifest."""
    manifest = tuple(manifest)
    if not manifest:
        raise ValueError("manifest must contain at least one layer")
    for a, b in zip(manifest, manifest[1:]):
        if a.out_dim != b.in_dim:
            raise ValueError(
                f"layer chain broken: out_dim {a.out_dim} feeds in_dim {b.in_dim}"
            )
    for spec in manifest[:-1]:
        if spec.activation == "softmax":
            raise ValueError("softmax is only valid on the final layer")
    return manifest


def manifest_dim(manifest: Sequence[LayerSpec]) -> int:
    return sum(spec.size for spec in manifest)


def layer_slices(manifest: Sequence[LayerSpec]) -> list[tuple[slice, slice]]:
    """(weight slice, bias slice) into the flat vector for each layer."""
    out = []
    offset = 0
    for spec in manifest:
        w_end = offset + spec.in_dim * spec.out_dim
        b_end = w_end + spec.out_dim
        out.append((slice(offset, w_end), slice(w_end, b_end)))
        offset = b_end
    return out


@dataclass
class FlatParams:
    """A network's parameters as one flat float64 vector plus its manifest."""

    values: np.ndarray
    manifest: tuple[LayerSpec, ...]

    def __post_init__(self):
        self.manifest = validate_manifest(self.manifest)
        self.values = np.asarray(self.values, dtype=np.float64)
        expected = manifest_dim(self.manifest)
        if self.values.ndim != 1 or self.values.size != expected:
            raise ValueError(
                f"flat vector has {self.values.size} values, manifest needs {expected}"
            )

    @property
    def d(self) -> int:
        return self.values.size

    def copy(self) -> "FlatParams":
        return FlatParams(self.values.copy(), self.manifest)


@dataclass
class Batch:
    """A minibatch of inputs with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError("batch inputs must be a 2-d matrix")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError(
                f"labels length {self.labels.shape} does not match "
                f"batch size {self.inputs.shape[0]}"
            )

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class Gradients:
    """Gradient vector laid out identically to the paired FlatParams."""

    values: np.ndarray


def init_params(
    manifest: Sequence[LayerSpec],
    seed: int,
    final_layer_zero: bool = False,
) -> FlatParams:
    """Glorot-uniform weights, zero biases, driven by an explicit seed.

    final_layer_zero zeroes the last layer entirely, which pins the initial
    output of policy heads at exactly zero.
    """
    manifest = validate_manifest(manifest)
    rng = np.random.default_rng(seed)
    values = np.zeros(manifest_dim(manifest))
    for spec, (w_sl, _) in zip(manifest, layer_slices(manifest)):
        limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        values[w_sl] = rng.uniform(-limit, limit, spec.in_dim * spec.out_dim)
    if final_layer_zero:
        w_sl, b_sl = layer_slices(manifest)[-1]
        values[w_sl] = 0.0
        values[b_sl] = 0.0
    return FlatParams(values, manifest)


def unflatten(params: FlatParams) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views of (W, b) per layer, W shaped (in_dim, out_dim)."""
    out = []
    for spec, (w_sl, b_sl) in zip(params.manifest, layer_slices(params.manifest)):
        w = params.values[w_sl].reshape(spec.in_dim, spec.out_dim)
        out.append((w, params.values[b_sl]))
    return out


def flatten_layers(
    layers: Sequence[tuple[np.ndarray, np.ndarray]],
    manifest: Sequence[LayerSpec],
) -> FlatParams:
    """Inverse of unflatten."""
    manifest = validate_manifest(manifest)
    if len(layers) != len(manifest):
        raise ValueError(f"{len(layers)} layers for {len(manifest)} manifest entries")
    chunks = []
    for (w, b), spec in zip(layers, manifest):
        if w.shape != (spec.in_dim, spec.out_dim) or b.shape != (spec.out_dim,):
            raise ValueError(
                f"layer shape {w.shape}/{b.shape} does not match "
                f"{spec.in_dim}x{spec.out_dim}"
            )
        chunks.append(np.asarray(w, dtype=np.float64).ravel())
        chunks.append(np.asarray(b, dtype=np.float64))
    return FlatParams(np.concatenate(chunks), manifest)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "softmax":
        return _softmax(z)
    return z


def _activation_backward(kind: str, z, a, d_a):
    if kind == "relu":
        return d_a * (z > 0.0)
    if kind == "tanh":
        return d_a * (1.0 - a * a)
    if kind == "softmax":
        return a * (d_a - (d_a * a).sum(axis=1, keepdims=True))
    return d_a


def forward_array(params: FlatParams, x: np.ndarray, want_trace: bool = False):
    """Forward pass on a raw (B x in_dim) matrix.

    With want_trace, also returns the per-layer (input, pre-activation,
    activation) triples needed by backward().
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.manifest[0].in_dim:
        raise ValueError(
            f"input width {x.shape[-1] if x.ndim else '?'} does not match "
            f"first layer in_dim {params.manifest[0].in_dim}"
        )
    trace = []
    a = x
    for spec, (w, b) in zip(params.manifest, unflatten(params)):
        z = a @ w + b
        a_next = _activate(spec.activation, z)
        if want_trace:
            trace.append((a, z, a_next))
        a = a_next
    if want_trace:
        return a, trace
    return a


def _backprop(params: FlatParams, trace, dz_last: np.ndarray):
    """Shared backward loop given the gradient at the final pre-activation."""
    grads = np.zeros_like(params.values)
    slices = layer_slices(params.manifest)
    weights = unflatten(params)
    d_z = dz_last
    d_x = None
    for k in range(len(params.manifest) - 1, -1, -1):
        x_in, z, a = trace[k]
        if k < len(params.manifest) - 1:
            d_z = _activation_backward(params.manifest[k].activation, z, a, d_x)
        w, _ = weights[k]
        w_sl, b_sl = slices[k]
        grads[w_sl] = (x_in.T @ d_z).ravel()
        grads[b_sl] = d_z.sum(axis=0)
        d_x = d_z @ w.T
    return grads, d_x


def backward(params: FlatParams, trace, d_out: np.ndarray):
    """Backpropagate d(loss)/d(output) through a trace.

    Returns (flat gradient vector, d(loss)/d(input)).
    """
    x_in, z, a = trace[-1]
    dz_last = _activation_backward(params.manifest[-1].activation, z, a, d_out)
    return _backprop(params, trace, dz_last)


def forward(params: FlatParams, batch: Batch) -> np.ndarray:
    """Network output for a batch, shape (B x out_dim)."""
    return forward_array(params, batch.inputs)


def _one_hot(labels: np.ndarray, num: int) -> np.ndarray:
    out = np.zeros((labels.size, num))
    out[np.arange(labels.size), labels] = 1.0
    return out


def loss_and_grad(params: FlatParams, batch: Batch, loss_kind: str = "cross_entropy"):
    """Batch-mean loss and its exact gradient.

    cross_entropy expects a softmax final layer and works in log space with
    max subtraction. mse compares outputs against one-hot labels.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if len(batch) < 1:
        raise ValueError("batch is empty")
    out, trace = forward_array(params, batch.inputs, want_trace=True)
    for k, (_, z, _) in enumerate(trace):
        if not np.isfinite(z).all():
            raise FloatingPointError(f"non-finite pre-activation in layer {k}")
    n = len(batch)
    classes = params.manifest[-1].out_dim
    if batch.labels.min() < 0 or batch.labels.max() >= classes:
        raise ValueError(
            f"labels outside [0, {classes}): saw {int(batch.labels.max())}"
        )
    if loss_kind == "cross_entropy":
        if params.manifest[-1].activation != "softmax":
            raise ValueError("cross_entropy requires a softmax final layer")
        z_last = trace[-1][1]
        log_p = _log_softmax(z_last)
        loss = -log_p[np.arange(n), batch.labels].mean()
        dz_last = (np.exp(log_p) - _one_hot(batch.labels, classes)) / n
        grads, _ = _backprop(params, trace, dz_last)
    else:
        target = _one_hot(batch.labels, classes)
        diff = out - target
        loss = float((diff * diff).mean())
        d_out = 2.0 * diff / diff.size
        grads, _ = backward(params, trace, d_out)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss at the output layer")
    return float(loss), Gradients(grads)


def sgd_step(params: FlatParams, grads: Gradients, lr: float) -> FlatParams:
    """Plain gradient step: params - lr * grads."""
    if grads.values.shape != params.values.shape:
        raise ValueError(
            f"gradient length {grads.values.size} does not match d={params.d}"
        )
    return FlatParams(params.values - lr * grads.values, params.manifest)


def mse_vec(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    diff = a - b
    return float((diff * diff).mean())


class AdamState:
    """Adam moments for one flat parameter vector."""

    def __init__(self, dim: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)

    def step(self, values: np.ndarray, grads: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grads))
    if norm > max_norm > 0.0:
        return grads * (max_norm / norm)
    return grads


# ---------------------------------------------------------------------------
# Checkpoint format: one JSON header line, then d little-endian float64
# values. Composite files (auto-encoder, agent) concatenate named blocks
# after a leading JSON meta line.
# ---------------------------------------------------------------------------

def _manifest_to_json(manifest) -> list:
    return [[s.in_dim, s.out_dim, s.activation] for s in manifest]


def _manifest_from_json(raw) -> tuple[LayerSpec, ...]:
    return tuple(LayerSpec(int(i), int(o), str(a)) for i, o, a in raw)


def _read_header_line(f: BinaryIO) -> dict:
    raw = bytearray()
    while True:
        ch = f.read(1)
        if not ch:
            raise ValueError("checkpoint truncated: missing header line")
        if ch == b"\n":
            break
        raw.extend(ch)
    return json.loads(raw.decode("utf-8"))


def write_param_block(f: BinaryIO, params: FlatParams, seed: int = 0,
                      name: str | None = None) -> None:
    header = {
        "manifest": _manifest_to_json(params.manifest),
        "d": params.d,
        "seed": int(seed),
    }
    if name is not None:
        header["name"] = name
    f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
    f.write(params.values.astype("<f8").tobytes())


def read_param_block(f: BinaryIO) -> tuple[FlatParams, dict]:
    header = _read_header_line(f)
    d = int(header["d"])
    raw = f.read(8 * d)
    if len(raw) != 8 * d:
        raise ValueError(
            f"checkpoint truncated: expected {8 * d} payload bytes, got {len(raw)}"
        )
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return FlatParams(values, _manifest_from_json(header["manifest"])), header


def save_params(path, params: FlatParams, seed: int = 0) -> None:
    with open(path, "wb") as f:
        write_param_block(f, params, seed=seed)


def load_params(path) -> tuple[FlatParams, int]:
    with open(path, "rb") as f:
        params, header = read_param_block(f)
    return params, int(header.get("seed", 0))


def save_sections(path, sections: dict[str, FlatParams],
                  meta: dict | None = None, seed: int = 0) -> None:
    """Write several named networks plus a JSON meta line to one file."""
    meta = dict(meta or {})
    meta["sections"] = sorted(sections)
    with open(path, "wb") as f:
        f.write((json.dumps(meta, sort_keys=True) + "\n").encode("utf-8"))
        for name in sorted(sections):
            write_param_block(f, sections[name], seed=seed, name=name)


def load_sections(path) -> tuple[dict[str, FlatParams], dict]:
    with open(path, "rb") as f:
        meta = _read_header_line(f)
        names = meta.get("sections")
        if not isinstance(names, list):
            raise ValueError("checkpoint meta line lacks a sections list")
        sections = {}
        for expected in names:
            params, header = read_param_block(f)
            name = header.get("name")
            if name != expected:
                raise ValueError(
                    f"checkpoint section order mismatch: wanted {expected!r}, "
                    f"found {name!r}"
                )
            sections[name] = params
    return sections, meta
