"""Fully-connected maxout (and ReLU baseline) networks in float64.

Hidden layer ``l`` stores weights of shape ``(n_l, K, n_{l-1})`` and biases of
shape ``(n_l, K)``; unit ``i`` outputs ``max_k W[i, k] @ x + b[i, k]``. ReLU
layers keep a single affine feature (``K = 1``) and an implicit zero branch.
The output layer is affine. ``depth`` counts hidden layers plus the output
layer, so a network with ``depth == 1`` is purely linear.

All routines accept a single input vector or a batch ``(B, n0)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ACTIVATIONS = ("maxout", "relu")
BIAS_MODES = ("gaussian", "zero")


@dataclass(frozen=True)
class Architecture:
    n0: int
    widths: tuple[int, ...]
    nL: int
    K: int = 5
    activation: str = "maxout"
    bias_mode: str = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.bias_mode not in BIAS_MODES:
            raise ValueError(f"bias_mode must be one of {BIAS_MODES}, got {self.bias_mode!r}")
        if self.n0 < 1 or self.nL < 1 or any(w < 1 for w in self.widths):
            raise ValueError("all layer widths must be >= 1")
        if self.activation == "maxout" and self.K < 2:
            raise ValueError(f"maxout rank must be >= 2, got {self.K}")

    @property
    def depth(self) -> int:
        return len(self.widths) + 1

    @property
    def sizes(self) -> tuple[int, ...]:
        """``(n0, n1, ..., n_{L-1}, nL)``."""
        return (self.n0, *self.widths, self.nL)

    @property
    def rank(self) -> int:
        """Number of stored affine features per unit."""
        return self.K if self.activation == "maxout" else 1

    @property
    def n_units(self) -> int:
        return sum(self.widths)

    def to_dict(self) -> dict:
        return {"n0": self.n0, "widths": list(self.widths), "nL": self.nL, "K": self.K,
                "activation": self.activation, "bias_mode": self.bias_mode}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(n0=d["n0"], widths=tuple(d.get("widths", ())), nL=d["nL"],
                   K=d.get("K", 5), activation=d.get("activation", "maxout"),
                   bias_mode=d.get("bias_mode", "gaussian"))


@dataclass(frozen=True)
class InitScheme:
    """Gaussian initialization with hidden-weight variance ``c / fan_in``.

    ``bias_mode=None`` defers to the architecture.
    """

    c: float
    bias_mode: Optional[str] = None
    seed: int = 0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"scale constant c must be positive, got {self.c}")
        if self.bias_mode is not None and self.bias_mode not in BIAS_MODES:
            raise ValueError(f"bias_mode must be one of {BIAS_MODES}, got {self.bias_mode!r}")


@dataclass
class ParamSet:
    """Network parameters; also used as the container for their gradients."""

    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    w_out: np.ndarray
    b_out: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        """Flat list ``[W1, b1, ..., W_out, b_out]``; entries alias the stored arrays."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out + [self.w_out, self.b_out]

    def copy(self) -> "ParamSet":
        return ParamSet(self.arch, [W.copy() for W in self.weights],
                        [b.copy() for b in self.biases], self.w_out.copy(), self.b_out.copy())

    def zeros_like(self) -> "ParamSet":
        return ParamSet(self.arch, [np.zeros_like(W) for W in self.weights],
                        [np.zeros_like(b) for b in self.biases],
                        np.zeros_like(self.w_out), np.zeros_like(self.b_out))

    def n_weights(self) -> int:
        return sum(W.size for W in self.weights) + self.w_out.size

    def save(self, path) -> None:
        """Write a flat little-endian float64 file headed by the architecture as JSON."""
        header = json.dumps(self.arch.to_dict()).encode()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for a in self.arrays():
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_params(path) -> ParamSet:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    arch = Architecture.from_dict(json.loads(raw[8:8 + hlen]))
    data = np.frombuffer(raw[8 + hlen:], dtype="<f8").astype(np.float64)
    template = _zero_params(arch)
    arrays, pos = [], 0
    for a in template.arrays():
        arrays.append(data[pos:pos + a.size].reshape(a.shape).copy())
        pos += a.size
    if pos != data.size:
        raise ValueError(f"{path}: payload size does not match architecture")
    return _from_arrays(arch, arrays)


def _from_arrays(arch: Architecture, arrays: Sequence[np.ndarray]) -> ParamSet:
    hidden = arrays[:-2]
    return ParamSet(arch, list(hidden[0::2]), list(hidden[1::2]), arrays[-2], arrays[-1])


def _zero_params(arch: Architecture) -> ParamSet:
    sizes, R = arch.sizes, arch.rank
    weights = [np.zeros((sizes[l], R, sizes[l - 1])) for l in range(1, arch.depth)]
    biases = [np.zeros((sizes[l], R)) for l in range(1, arch.depth)]
    return ParamSet(arch, weights, biases, np.zeros((arch.nL, sizes[-2])), np.zeros(arch.nL))


def init_params(arch: Architecture, scheme: InitScheme,
                rng: Optional[np.random.Generator] = None) -> ParamSet:
    """Sample parameters: hidden ``N(0, c/fan_in)``, output ``N(0, 1/n_{L-1})``.

    Uses ``rng`` when given, otherwise a generator seeded from ``scheme.seed``.
    Biases share their layer's variance, or are zero in zero-bias mode.
    """
    if rng is None:
        rng = np.random.default_rng(scheme.seed)
    bias_mode = scheme.bias_mode or arch.bias_mode
    sizes, R = arch.sizes, arch.rank
    weights, biases = [], []
    for l in range(1, arch.depth):
        std = np.sqrt(scheme.c / sizes[l - 1])
        weights.append(std * rng.standard_normal((sizes[l], R, sizes[l - 1])))
        if bias_mode == "gaussian":
            biases.append(std * rng.standard_normal((sizes[l], R)))
        else:
            biases.append(np.zeros((sizes[l], R)))
    std = np.sqrt(1.0 / sizes[-2])
    w_out = std * rng.standard_normal((arch.nL, sizes[-2]))
    b_out = std * rng.standard_normal(arch.nL) if bias_mode == "gaussian" else np.zeros(arch.nL)
    return ParamSet(arch, weights, biases, w_out, b_out)


@dataclass
class ForwardTrace:
    """Per-layer record of one forward pass.

    ``inputs[l]`` is the input to hidden layer ``l + 1`` (so ``inputs[0]`` is x),
    ``pre[l]`` holds the pre-activation features and ``kstar[l]`` the selected
    feature per unit. For ReLU layers ``kstar`` is 0 when the unit is active and
    1 when the zero branch wins.
    """

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    kstar: list[np.ndarray]
    output: np.ndarray
    batched: bool = field(default=False, repr=False)

    def pattern(self) -> np.ndarray:
        """Concatenated activation pattern, shape ``(B, n_units)`` or ``(n_units,)``."""
        if not self.kstar:
            shape = (self.output.shape[0], 0) if self.batched else (0,)
            return np.zeros(shape, dtype=np.int64)
        return np.concatenate(self.kstar, axis=-1)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], False
    if x.ndim != 2:
        raise ValueError(f"input must be a vector or a (B, n0) batch, got shape {x.shape}")
    return x, True


def _hidden_layer(W: np.ndarray, b: np.ndarray, X: np.ndarray, activation: str):
    n, R, fan_in = W.shape
    z = (X @ W.reshape(n * R, fan_in).T + b.reshape(-1)).reshape(X.shape[0], n, R)
    if activation == "maxout":
        # argmax returns the first maximizer: ties go to the lowest index
        k = np.argmax(z, axis=-1)
        out = np.take_along_axis(z, k[..., None], axis=-1)[..., 0]
    else:
        a = z[..., 0]
        k = (a < 0).astype(np.int64)
        out = np.where(k == 0, a, 0.0)
    return z, k, out


def forward(params: ParamSet, x) -> ForwardTrace:
    """Forward pass recording inputs, pre-activations and selected features."""
    X, batched = _as_batch(x)
    if X.shape[1] != params.arch.n0:
        raise ValueError(f"input dimension {X.shape[1]} != n0 = {params.arch.n0}")
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("non-finite network input")
    inputs, pre, kstar = [], [], []
    h = X
    for W, b in zip(params.weights, params.biases):
        z, k, out = _hidden_layer(W, b, h, params.arch.activation)
        inputs.append(h)
        pre.append(z)
        kstar.append(k)
        h = out
    inputs.append(h)
    y = h @ params.w_out.T + params.b_out
    if not batched:
        inputs = [a[0] for a in inputs]
        pre = [a[0] for a in pre]
        kstar = [a[0] for a in kstar]
        y = y[0]
    return ForwardTrace(inputs, pre, kstar, y, batched)


def network_output(params: ParamSet, x) -> np.ndarray:
    return forward(params, x).output


def selected_rows(params: ParamSet, layer: int, kstar: np.ndarray) -> np.ndarray:
    """Rows of the local linear map of hidden layer ``layer`` (0-based).

    ``kstar`` of shape ``(n_l,)`` gives ``(n_l, n_{l-1})``; a batch ``(B, n_l)``
    gives ``(B, n_l, n_{l-1})``. Inactive ReLU units contribute zero rows.
    """
    W = params.weights[layer]
    if params.arch.activation == "relu":
        return W[:, 0, :] * (kstar == 0)[..., None]
    n = W.shape[0]
    return W[np.arange(n), kstar]


@dataclass
class JacobianResult:
    J: np.ndarray
    kstar: list[np.ndarray]


def input_jacobian(params: ParamSet, x) -> JacobianResult:
    """Input-output Jacobian ``W_out @ Wbar^(L-1) @ ... @ Wbar^(1)`` at a single input."""
    trace = forward(params, x)
    if trace.batched:
        raise ValueError("input_jacobian expects a single input vector")
    M = np.eye(params.arch.n0)
    for l, k in enumerate(trace.kstar):
        M = selected_rows(params, l, k) @ M
    return JacobianResult(params.w_out @ M, trace.kstar)


def jvp(params: ParamSet, x, d, trace: Optional[ForwardTrace] = None) -> np.ndarray:
    """Directional derivative ``J(x) d``; batched over rows of ``x`` and ``d``."""
    if trace is None:
        trace = forward(params, x)
    D = np.asarray(d, dtype=np.float64)
    batched = trace.batched
    if not batched:
        D = D[None, :]
        kstars = [k[None, :] for k in trace.kstar]
    else:
        D = np.broadcast_to(D, (trace.output.shape[0], params.arch.n0))
        kstars = trace.kstar
    for l, k in enumerate(kstars):
        W = params.weights[l]
        n, R, fan_in = W.shape
        proj = (D @ W.reshape(n * R, fan_in).T).reshape(D.shape[0], n, R)
        if params.arch.activation == "relu":
            D = proj[..., 0] * (k == 0)
        else:
            D = np.take_along_axis(proj, k[..., None], axis=-1)[..., 0]
    out = D @ params.w_out.T
    return out if batched else out[0]


def _check_unit(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if abs(np.linalg.norm(u) - 1.0) > 1e-12:
        raise ValueError(f"direction must have unit norm, got |u| = {np.linalg.norm(u)!r}")
    return u


def directional_derivative_sq(params: ParamSet, x, u) -> float:
    """``||J(x) u||^2`` as a product of per-layer squared norms.

    The direction is pushed through each selected linear map and renormalized;
    the result is ``||W_out u^(L-1)||^2`` times the product of the squared norms
    collected along the way. A direction that becomes exactly zero ends the
    product at 0.
    """
    u = _check_unit(u)
    trace = forward(params, x)
    if trace.batched:
        raise ValueError("directional_derivative_sq expects a single input vector")
    prod = 1.0
    for l, k in enumerate(trace.kstar):
        v = selected_rows(params, l, k) @ u
        s = float(v @ v)
        if s == 0.0:
            return 0.0
        prod *= s
        u = v / np.sqrt(s)
    v = params.w_out @ u
    return prod * float(v @ v)


def activation_length(params: ParamSet, x, l: int) -> float:
    """Normalized activation length ``||x^(l)||^2 / n_l`` for ``0 <= l <= L-1``."""
    if not 0 <= l < params.arch.depth:
        raise IndexError(f"layer index must lie in [0, {params.arch.depth - 1}], got {l}")
    h = forward(params, x).inputs[l]
    if h.ndim != 1:
        raise ValueError("activation_length expects a single input vector")
    return float(h @ h) / h.shape[0]


def backward(params: ParamSet, trace: ForwardTrace, upstream) -> ParamSet:
    """Parameter gradients of ``<upstream, N(x)>`` summed over the batch.

    Only the selected feature of each unit receives gradient; every other
    feature's weights and bias get exactly zero.
    """
    G = np.asarray(upstream, dtype=np.float64)
    if trace.batched:
        G = np.broadcast_to(G, trace.output.shape)
        inputs, kstars = trace.inputs, trace.kstar
    else:
        G = G.reshape(1, -1)
        inputs = [a[None, :] for a in trace.inputs]
        kstars = [k[None, :] for k in trace.kstar]
    if G.shape[1] != params.arch.nL:
        raise ValueError(f"upstream dimension {G.shape[1]} != nL = {params.arch.nL}")
    grads = params.zeros_like()
    grads.w_out[...] = G.T @ inputs[-1]
    grads.b_out[...] = G.sum(axis=0)
    delta = G @ params.w_out
    relu = params.arch.activation == "relu"
    for l in range(len(params.weights) - 1, -1, -1):
        W = params.weights[l]
        n, R, fan_in = W.shape
        B = delta.shape[0]
        dz = np.zeros((B, n, R))
        if relu:
            dz[..., 0] = delta * (kstars[l] == 0)
        else:
            np.put_along_axis(dz, kstars[l][..., None], delta[..., None], axis=-1)
        dz2 = dz.reshape(B, n * R)
        grads.weights[l][...] = (dz2.T @ inputs[l]).reshape(n, R, fan_in)
        grads.biases[l][...] = dz.sum(axis=0)
        if l > 0:
            delta = dz2 @ W.reshape(n * R, fan_in)
    return grads


def param_gradients(params: ParamSet, x, upstream) -> ParamSet:
    """Gradient of ``<upstream, N(x)>`` with respect to every parameter."""
    return backward(params, forward(params, x), upstream)
