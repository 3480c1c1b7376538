"""Dense-network substrate: MLP forward/backward, init, optimizers, file I/O.

All actors, critics and encoders in the package are plain MLPs with
leaky-ReLU hidden units built on these routines. The hot paths (forward,
backward, Adam) dispatch to the selected kernel backend; everything here
is float64.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

NET_FORMAT_VERSION = 1

HIDDEN_ACTIVATIONS = ("leaky-relu",)
OUTPUT_ACTIVATIONS = ("none", "tanh")
INIT_SCHEMES = ("orthogonal", "uniform-scaled")


@dataclass(frozen=True)
class NetSpec:
    input_dim: int
    hidden_size: int
    hidden_layers: int
    output_dim: int
    hidden_activation: str = "leaky-relu"
    output_activation: str = "none"

    def __post_init__(self):
        for name in ("input_dim", "hidden_size", "hidden_layers", "output_dim"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unsupported output activation {self.output_activation!r}")

    def layer_shapes(self):
        """(out, in) per layer: input->hidden, hidden->hidden, hidden->output."""
        dims = [self.input_dim] + [self.hidden_size] * self.hidden_layers + [self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def out_act_code(self):
        return kernels.OUT_TANH if self.output_activation == "tanh" else kernels.OUT_NONE

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden_size": self.hidden_size,
            "hidden_layers": self.hidden_layers,
            "output_dim": self.output_dim,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class NetWeights:
    """Per-layer weight matrices (out, in) and bias vectors (out,).

    Flat order is layer-major, each matrix row-major, bias after its matrix.
    """

    def __init__(self, W, b):
        self.W = [np.ascontiguousarray(w, dtype=np.float64) for w in W]
        self.b = [np.ascontiguousarray(x, dtype=np.float64) for x in b]
        if len(self.W) != len(self.b):
            raise ValueError("weight/bias layer count mismatch")

    def params(self):
        out = []
        for w, b in zip(self.W, self.b):
            out.append(w)
            out.append(b)
        return out

    @property
    def n_params(self):
        return sum(p.size for p in self.params())

    def copy(self):
        return NetWeights([w.copy() for w in self.W], [b.copy() for b in self.b])

    def to_flat(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {flat.size}")
        i = 0
        for p in self.params():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size
        return self

    def check_finite(self):
        for p in self.params():
            if not np.all(np.isfinite(p)):
                raise FloatingPointError("non-finite parameter detected")

    def matches(self, spec: NetSpec):
        shapes = spec.layer_shapes()
        if len(shapes) != len(self.W):
            return False
        return all(w.shape == s and b.shape == (s[0],)
                   for w, b, s in zip(self.W, self.b, shapes))


def orthogonal_matrix(rows, cols, rng):
    """Random matrix with orthonormal rows or columns on the thin side."""
    n = max(rows, cols)
    m = min(rows, cols)
    a = rng.standard_normal((n, m))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))   # fix QR sign ambiguity for determinism
    return np.ascontiguousarray(q if rows >= cols else q.T)


def init_weights(spec: NetSpec, scheme="uniform-scaled", seed=0, gain=1.0):
    """Seeded weight init; biases start at zero.

    'uniform-scaled' draws U(+-sqrt(6/fan_in)) (He-style fan-in scaling);
    'orthogonal' gives orthonormal rows/columns on the thin dimension.
    `gain` multiplies the drawn matrices.
    """
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    rng = np.random.default_rng(seed)
    W, b = [], []
    for out_dim, in_dim in spec.layer_shapes():
        if scheme == "orthogonal":
            w = orthogonal_matrix(out_dim, in_dim, rng)
        else:
            bound = np.sqrt(6.0 / in_dim)
            w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        W.append(gain * w)
        b.append(np.zeros(out_dim))
    return NetWeights(W, b)


def _check_input(spec, x, batched):
    x = np.asarray(x, dtype=np.float64)
    if batched:
        if x.ndim != 2 or x.shape[1] != spec.input_dim:
            raise ValueError(f"expected input (batch, {spec.input_dim}), got {x.shape}")
    else:
        if x.shape != (spec.input_dim,):
            raise ValueError(f"expected input of length {spec.input_dim}, got {x.shape}")
    return x


def forward(spec: NetSpec, weights: NetWeights, x):
    """Single-input forward pass; x has length spec.input_dim."""
    x = _check_input(spec, x, batched=False)
    y = kernels.mlp_forward(weights.W, weights.b, x[None, :], spec.out_act_code)
    return y[0]


def forward_batch(spec: NetSpec, weights: NetWeights, X):
    X = _check_input(spec, X, batched=True)
    return kernels.mlp_forward(weights.W, weights.b, X, spec.out_act_code)


def forward_cached(spec: NetSpec, weights: NetWeights, X):
    """Batched forward keeping the cache needed by backward_cached."""
    X = _check_input(spec, X, batched=True)
    Y, As, Zs = kernels.mlp_forward_cached(weights.W, weights.b, X, spec.out_act_code)
    return Y, (As, Zs)


class Grads:
    """Parameter gradients mirroring a NetWeights, plus the input gradient."""

    def __init__(self, dW, db, dX):
        self.dW = dW
        self.db = db
        self.dX = dX

    def params(self):
        out = []
        for w, b in zip(self.dW, self.db):
            out.append(w)
            out.append(b)
        return out

    def to_flat(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def scaled(self, c):
        return Grads([c * w for w in self.dW], [c * b for b in self.db],
                     None if self.dX is None else c * self.dX)

    def add_(self, other):
        for a, g in zip(self.dW, other.dW):
            a += g
        for a, g in zip(self.db, other.db):
            a += g
        return self


def backward_cached(spec: NetSpec, weights: NetWeights, Y, cache, dY):
    """Backprop using the cache from forward_cached; dY is (batch, out)."""
    As, Zs = cache
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != Y.shape:
        raise ValueError(f"output gradient shape {dY.shape} != output shape {Y.shape}")
    dWs, dbs, dX = kernels.mlp_backward(weights.W, As, Zs, Y, dY, spec.out_act_code)
    return Grads(dWs, dbs, dX)


def backward(spec: NetSpec, weights: NetWeights, x, output_gradient):
    """Single-input forward+backward; returns parameter and input gradients."""
    x = _check_input(spec, x, batched=False)
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != (spec.output_dim,):
        raise ValueError(f"expected output gradient of length {spec.output_dim}, got {g.shape}")
    Y, cache = forward_cached(spec, weights, x[None, :])
    grads = backward_cached(spec, weights, Y, cache, g[None, :])
    grads.dX = grads.dX[0]
    return grads


def finite_difference_gradient(loss_fn, weights: NetWeights, epsilon=1e-5):
    """Central-difference gradient of loss_fn(weights) per parameter.

    The independent oracle for every backprop path in the package: it never
    calls backward itself.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    work = weights.copy()
    dW = [np.zeros_like(w) for w in weights.W]
    db = [np.zeros_like(b) for b in weights.b]
    for p, g in zip(work.params(), Grads(dW, db, None).params()):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + epsilon
            hi = loss_fn(work)
            flat_p[i] = orig - epsilon
            lo = loss_fn(work)
            flat_p[i] = orig
            flat_g[i] = (hi - lo) / (2.0 * epsilon)
    return Grads(dW, db, None)


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def make_optimizer(kind, learning_rate, weights: NetWeights):
    opt = OptimizerState(kind=kind, learning_rate=learning_rate)
    if kind == "adam":
        opt.m = [np.zeros_like(p) for p in weights.params()]
        opt.v = [np.zeros_like(p) for p in weights.params()]
    return opt


def optimizer_step(opt: OptimizerState, weights: NetWeights, grads: Grads):
    """Apply one update in place; returns (weights, opt) for chaining."""
    params = weights.params()
    glist = grads.params()
    if len(params) != len(glist) or any(p.shape != g.shape for p, g in zip(params, glist)):
        raise ValueError("gradient shapes do not match parameters")
    opt.step += 1
    if opt.kind == "sgd":
        kernels.sgd_step(params, glist, opt.learning_rate)
    else:
        kernels.adam_step(params, glist, opt.m, opt.v, opt.step,
                          opt.learning_rate, opt.beta1, opt.beta2, opt.eps)
    return weights, opt


def save_net(directory, name, spec: NetSpec, weights: NetWeights, seed=None):
    """Write <name>.netjson manifest + <name>.netbin flat little-endian array."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    flat = weights.to_flat().astype("<f8")
    manifest = {
        "format_version": NET_FORMAT_VERSION,
        "spec": spec.to_dict(),
        "shapes": [[int(s) for s in w.shape] for w in weights.W],
        "count": int(flat.size),
        "dtype": "<f8",
        "seed": seed,
    }
    (directory / f"{name}.netjson").write_text(json.dumps(manifest, indent=1))
    flat.tofile(directory / f"{name}.netbin")


def load_net(directory, name):
    """Load a (spec, weights) pair saved by save_net; rejects unknown versions."""
    directory = Path(directory)
    manifest = json.loads((directory / f"{name}.netjson").read_text())
    version = manifest.get("format_version")
    if version != NET_FORMAT_VERSION:
        raise ValueError(f"unsupported net format version {version!r}")
    spec = NetSpec.from_dict(manifest["spec"])
    flat = np.fromfile(directory / f"{name}.netbin", dtype="<f8")
    if flat.size != manifest["count"]:
        raise ValueError("netbin size does not match manifest")
    W = [np.zeros((o, i)) for o, i in spec.layer_shapes()]
    b = [np.zeros(o) for o, _ in spec.layer_shapes()]
    weights = NetWeights(W, b).set_flat(flat)
    if not weights.matches(spec):
        raise ValueError("weight shapes inconsistent with spec")
    return spec, weights
