"""Fully connected networks with hand-written reverse mode, plus input transforms.

Batches are row-major: an input of shape ``(n, d_in)`` gives outputs of
shape ``(n, d_out)``. One-dimensional inputs are treated as a single row.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

ACTIVATIONS = ("GELU", "TANH", "RELU")


class DimensionMismatch(ValueError):
    pass


def activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "GELU":
        return 0.5 * a * (1.0 + erf(a / _SQRT2))
    if name == "TANH":
        return np.tanh(a)
    if name == "RELU":
        return np.maximum(a, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def activate_grad(name: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Derivative of the activation at pre-activation ``a`` (``h`` is its output)."""
    if name == "GELU":
        return 0.5 * (1.0 + erf(a / _SQRT2)) + a * _INV_SQRT_2PI * np.exp(-0.5 * a * a)
    if name == "TANH":
        return 1.0 - h * h
    if name == "RELU":
        return (a > 0).astype(a.dtype)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Mlp:
    layer_dims: tuple[int, ...]
    activation: str = "GELU"
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        self.activation = self.activation.upper()
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.layer_dims) < 2:
            raise ValueError("need at least input and output widths")
        if not self.weights:
            self.weights = [np.zeros((i, o)) for i, o in zip(self.layer_dims, self.layer_dims[1:])]
            self.biases = [np.zeros(o) for o in self.layer_dims[1:]]
        for (i, o), W, b in zip(zip(self.layer_dims, self.layer_dims[1:]), self.weights, self.biases):
            if W.shape != (i, o) or b.shape != (o,):
                raise DimensionMismatch(f"layer shape {W.shape}/{b.shape} != ({i}, {o})")

    @classmethod
    def init(cls, layer_dims, activation: str = "GELU", rng: np.random.Generator | None = None) -> "Mlp":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(0) if rng is None else rng
        dims = tuple(int(d) for d in layer_dims)
        weights, biases = [], []
        for i, o in zip(dims, dims[1:]):
            bound = np.sqrt(6.0 / (i + o))
            weights.append(rng.uniform(-bound, bound, size=(i, o)))
            biases.append(np.zeros(o))
        return cls(dims, activation, weights, biases)

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.layer_dims, self.layer_dims[1:]))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DimensionMismatch(f"expected {self.n_params} parameters, got {theta.shape}")
        pos = 0
        for l, (i, o) in enumerate(zip(self.layer_dims, self.layer_dims[1:])):
            self.weights[l] = theta[pos : pos + i * o].reshape(i, o).copy()
            pos += i * o
            self.biases[l] = theta[pos : pos + o].copy()
            pos += o

    def with_flat(self, theta: np.ndarray) -> "Mlp":
        net = Mlp(self.layer_dims, self.activation)
        net.set_flat(theta)
        return net

    def copy(self) -> "Mlp":
        return self.with_flat(self.get_flat())


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.layer_dims[0]:
        raise DimensionMismatch(f"input width {X.shape[-1]} != {net.layer_dims[0]}")
    return X, single


def forward_trace(net: Mlp, X: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer (pre-activation, output) pairs; the first entry holds the input.

    For GELU the stored "pre-activation" slot also keeps the Gaussian CDF so
    the backward pass does not recompute ``erf``.
    """
    trace = [(X, X)]
    h = X
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ W
        a += b
        if l == last:
            h = a
        elif net.activation == "GELU":
            cdf = erf(a * (1.0 / _SQRT2))
            cdf += 1.0
            cdf *= 0.5
            h = a * cdf
            a = _GeluPre(a, cdf)
        else:
            h = activate(net.activation, a)
        trace.append((a, h))
    return trace


class _GeluPre:
    """Pre-activation of a GELU layer bundled with its cached CDF."""

    __slots__ = ("a", "cdf")

    def __init__(self, a, cdf):
        self.a, self.cdf = a, cdf


def _trace_grad(activation: str, a, h) -> np.ndarray:
    if isinstance(a, _GeluPre):
        pre = a.a
        g = np.exp(-0.5 * pre * pre)
        g *= pre
        g *= _INV_SQRT_2PI
        g += a.cdf
        return g
    return activate_grad(activation, a, h)


def forward(net: Mlp, x) -> np.ndarray:
    X, single = _as_batch(net, x)
    out = forward_trace(net, X)[-1][1]
    return out[0] if single else out


def backward(net: Mlp, x, cotangent, trace=None, param_grad: bool = True):
    """Gradients of ``sum(cotangent * forward(net, x))``.

    Returns ``(flat parameter gradient, input gradient)``. The parameter
    gradient is summed over the batch; the input gradient keeps one row per
    sample. ``param_grad=False`` skips the weight terms and returns ``None``
    in their place.
    """
    X, single = _as_batch(net, x)
    C = np.asarray(cotangent, dtype=float)
    C = C[None, :] if C.ndim == 1 else C
    if C.shape != (X.shape[0], net.layer_dims[-1]):
        raise DimensionMismatch(f"cotangent shape {C.shape} does not match output")
    if trace is None:
        trace = forward_trace(net, X)
    n_layers = len(net.weights)
    grads = [None] * n_layers
    delta = C
    for l in range(n_layers - 1, -1, -1):
        if l < n_layers - 1:
            a, h = trace[l + 1]
            delta = delta * _trace_grad(net.activation, a, h)
        h_in = trace[l][1]
        if param_grad:
            grads[l] = (h_in.T @ delta, delta.sum(axis=0))
        delta = delta @ net.weights[l].T
    gx = delta[0] if single else delta
    if not param_grad:
        return None, gx
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    return flat, gx


@dataclass
class FourierMap:
    """Frozen random Fourier features ``[cos(2 pi B x), sin(2 pi B x)]``."""

    B: np.ndarray
    sigma: float = 1.0

    @classmethod
    def sample(cls, m: int, d: int, sigma: float, rng: np.random.Generator) -> "FourierMap":
        return cls(rng.normal(0.0, sigma, size=(m, d)), float(sigma))

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=float)
        self.B.setflags(write=False)

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def out_dim(self) -> int:
        return 2 * self.m

    def digest(self) -> str:
        return hashlib.sha256(self.B.tobytes()).hexdigest()


def fourier_features(fmap: FourierMap, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    proj = 2.0 * np.pi * (x @ fmap.B.T)
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=-1)


@dataclass
class Normalizer:
    """Per-column affine map of ``[lo, hi]`` onto ``[-1, 1]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if np.any(~(self.hi > self.lo)):
            raise ValueError("normalizer bounds need max > min per variable")

    @classmethod
    def fit(cls, data: np.ndarray, pad: float = 1e-12) -> "Normalizer":
        """Bounds from data columns; constant columns are widened symmetrically."""
        data = np.atleast_2d(data)
        lo, hi = data.min(axis=0), data.max(axis=0)
        flat = hi - lo <= pad
        lo = np.where(flat, lo - 0.5, lo)
        hi = np.where(flat, hi + 0.5, hi)
        return cls(lo, hi)

    @property
    def scale(self) -> np.ndarray:
        return 2.0 / (self.hi - self.lo)

    def normalize(self, a):
        return 2.0 * (np.asarray(a, dtype=float) - self.lo) / (self.hi - self.lo) - 1.0

    def denormalize(self, v):
        return (np.asarray(v, dtype=float) + 1.0) * 0.5 * (self.hi - self.lo) + self.lo


def normalize(norm: Normalizer, alpha):
    return norm.normalize(alpha)


# ---------------------------------------------------------------------------
# checkpoint text blocks


def _fmt(x) -> str:
    return format(float(x), ".17g")


def mlp_to_lines(net: Mlp, fmap: FourierMap | None = None) -> list[str]:
    lines = ["layer_dims " + " ".join(str(d) for d in net.layer_dims), f"activation {net.activation}"]
    if fmap is not None:
        lines.append(f"fourier {fmap.m} {_fmt(fmap.sigma)} {fmap.B.shape[1]}")
        lines.extend(_fmt(v) for v in fmap.B.ravel())
    theta = net.get_flat()
    lines.append(f"params {len(theta)}")
    lines.extend(_fmt(v) for v in theta)
    return lines


def mlp_from_lines(lines: list[str], pos: int = 0) -> tuple[Mlp, FourierMap | None, int]:
    """Parse a network block starting at ``lines[pos]``; returns the next position."""
    head = lines[pos].split()
    if head[0] != "layer_dims":
        raise ValueError(f"expected layer_dims, got {lines[pos]!r}")
    dims = [int(v) for v in head[1:]]
    activation = lines[pos + 1].split()[1]
    pos += 2
    fmap = None
    if lines[pos].startswith("fourier"):
        _, m, sigma, d = lines[pos].split()
        m, d = int(m), int(d)
        vals = [float(v) for v in lines[pos + 1 : pos + 1 + m * d]]
        fmap = FourierMap(np.array(vals).reshape(m, d), float(sigma))
        pos += 1 + m * d
    _, n = lines[pos].split()
    n = int(n)
    theta = np.array([float(v) for v in lines[pos + 1 : pos + 1 + n]])
    net = Mlp(dims, activation)
    net.set_flat(theta)
    return net, fmap, pos + 1 + n


def save_checkpoint(path, net: Mlp, fmap: FourierMap | None = None) -> None:
    with open(path, "w") as fh:
        fh.write("\n".join(mlp_to_lines(net, fmap)) + "\n")


def load_checkpoint(path) -> tuple[Mlp, FourierMap | None]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    net, fmap, _ = mlp_from_lines(lines)
    return net, fmap
