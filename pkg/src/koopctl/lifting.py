"""Observable networks: rectifier MLP forward/backward passes, the joint
decode+dynamics fitting loss, an adaptive-moment optimizer with decoupled
weight decay, and a sampled Lipschitz-constant estimate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths [in, h1, ..., out]; rectified-linear hidden layers,
    linear output."""

    layer_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise ValueError("need at least one hidden layer")
        if any(s <= 0 for s in sizes):
            raise ValueError("layer sizes must be positive")

    @property
    def dim_in(self):
        return self.layer_sizes[0]

    @property
    def dim_out(self):
        return self.layer_sizes[-1]


@dataclass
class MlpParams:
    """Per-layer weight matrices (out x in) and bias vectors."""

    weights: list
    biases: list

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def spec(self) -> MlpSpec:
        sizes = [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]
        return MlpSpec(tuple(sizes))


def init_params(spec: MlpSpec, rng) -> MlpParams:
    # Uniform +-sqrt(6/(fan_in+fan_out)) keeps early activations scaled.
    weights, biases = [], []
    for fi, fo in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        lim = np.sqrt(6.0 / (fi + fo))
        weights.append(rng.uniform(-lim, lim, size=(fo, fi)))
        biases.append(np.zeros(fo))
    return MlpParams(weights, biases)


def mlp_forward_batch(params: MlpParams, X):
    """Columns of X are inputs; returns the stacked outputs."""
    Z = np.atleast_2d(np.asarray(X, dtype=float))
    if Z.shape[0] != params.weights[0].shape[1]:
        raise ValueError(
            f"input dim {Z.shape[0]} != network input {params.weights[0].shape[1]}"
        )
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        Z = w @ Z + b[:, None]
        if i < last:
            Z = np.maximum(Z, 0.0)
    return Z


def mlp_forward(params: MlpParams, x):
    return mlp_forward_batch(params, np.asarray(x, dtype=float).reshape(-1, 1))[:, 0]


def _forward_cached(params, X):
    acts = [X]  # post-activation values per layer, input first
    pre = []
    Z = X
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        A = w @ Z + b[:, None]
        pre.append(A)
        Z = np.maximum(A, 0.0) if i < last else A
        acts.append(Z)
    return acts, pre


def mlp_backprop(params: MlpParams, X, dOut):
    """Gradients of sum(dOut * f(X)) w.r.t. weights and biases.

    The rectifier subgradient at 0 is taken as 0.
    """
    acts, pre = _forward_cached(params, np.atleast_2d(np.asarray(X, dtype=float)))
    dW = [None] * len(params.weights)
    db = [None] * len(params.biases)
    delta = np.atleast_2d(dOut)
    for i in range(len(params.weights) - 1, -1, -1):
        dW[i] = delta @ acts[i].T
        db[i] = delta.sum(axis=1)
        if i > 0:
            delta = params.weights[i].T @ delta
            delta = delta * (pre[i - 1] > 0.0)
    return dW, db


# -- lifting maps -------------------------------------------------------------

class IdentityLifting:
    """g(x) = x; used for linear sanity benchmarks and oracle tests."""

    trainable = False

    def __init__(self, n: int):
        self.dim_in = int(n)
        self.dim_out = int(n)
        self.params = None

    def lift(self, x):
        return np.asarray(x, dtype=float)

    def lift_batch(self, X):
        return np.atleast_2d(np.asarray(X, dtype=float))

    def to_dict(self):
        return {"kind": "identity", "n": self.dim_in}


class MlpLifting:
    """g(x) = net(x); the decoder matrix is learned."""

    trainable = True
    kind = "mlp"

    def __init__(self, params: MlpParams):
        self.params = params
        self.dim_in = params.weights[0].shape[1]
        self.dim_out = params.weights[-1].shape[0]

    def lift(self, x):
        return mlp_forward(self.params, x)

    def lift_batch(self, X):
        return mlp_forward_batch(self.params, X)

    def grad_batch(self, X, dG):
        """Parameter cotangent of sum(dG * lift_batch(X))."""
        return mlp_backprop(self.params, X, dG)

    def with_params(self, params: MlpParams):
        return type(self)(params)

    def to_dict(self):
        return {
            "kind": self.kind,
            "layer_sizes": list(self.params.spec().layer_sizes),
            "weights": [w.tolist() for w in self.params.weights],
            "biases": [b.tolist() for b in self.params.biases],
        }


class ConcatLifting(MlpLifting):
    """g(x) = [x; net(x)], so the leading lifted coordinates are the state
    itself and the exact decoder is [I 0]."""

    kind = "concat"

    def __init__(self, params: MlpParams):
        super().__init__(params)
        self.dim_out = self.dim_in + params.weights[-1].shape[0]

    def lift(self, x):
        x = np.asarray(x, dtype=float)
        return np.concatenate([x, mlp_forward(self.params, x)])

    def lift_batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.vstack([X, mlp_forward_batch(self.params, X)])

    def grad_batch(self, X, dG):
        # The top n rows of g are x itself and carry no parameter gradient.
        return mlp_backprop(self.params, X, dG[self.dim_in:, :])


def make_lifting(mode: str, spec_or_n, rng=None, params: MlpParams | None = None):
    if mode == "identity":
        return IdentityLifting(spec_or_n)
    if params is None:
        params = init_params(spec_or_n, rng)
    if mode == "mlp":
        return MlpLifting(params)
    if mode == "concat":
        return ConcatLifting(params)
    raise ValueError(f"unknown lifting mode {mode!r}")


def lifting_from_dict(d):
    if d["kind"] == "identity":
        return IdentityLifting(d["n"])
    params = MlpParams(
        [np.array(w, dtype=float) for w in d["weights"]],
        [np.array(b, dtype=float) for b in d["biases"]],
    )
    sizes = tuple(d["layer_sizes"])
    if params.spec().layer_sizes != sizes:
        raise ValueError("checkpoint layer sizes inconsistent with arrays")
    return {"mlp": MlpLifting, "concat": ConcatLifting}[d["kind"]](params)


def save_checkpoint(lifting, path) -> None:
    payload = {"format": "koopctl-lifting", "version": 1}
    payload.update(lifting.to_dict())
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path):
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "koopctl-lifting" or payload.get("version") != 1:
        raise ValueError("unrecognized checkpoint format")
    return lifting_from_dict(payload)


# -- fitting loss --------------------------------------------------------------

def loss_eval(lifting, A, B, C, X, Y, U) -> float:
    """Sum of squared decode and lifted-dynamics residuals over the window."""
    G = lifting.lift_batch(X)
    H = lifting.lift_batch(Y)
    r1 = Y - C @ H
    r2 = H - A @ G - (B @ U if U.shape[0] else 0.0)
    return float(np.sum(r1 * r1) + np.sum(r2 * r2))


def loss_grad(lifting, A, B, C, X, Y, U):
    """Exact parameter gradient of loss_eval with A, B, C held fixed."""
    G = lifting.lift_batch(X)
    H = lifting.lift_batch(Y)
    r1 = Y - C @ H
    r2 = H - A @ G - (B @ U if U.shape[0] else 0.0)
    dH = -2.0 * (C.T @ r1) + 2.0 * r2
    dG = -2.0 * (A.T @ r2)
    dW1, db1 = lifting.grad_batch(X, dG)
    dW2, db2 = lifting.grad_batch(Y, dH)
    return (
        [a + b for a, b in zip(dW1, dW2)],
        [a + b for a, b in zip(db1, db2)],
    )


# -- optimizer ------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Adaptive-moment state with decoupled weight decay."""

    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_init(params: MlpParams, lr=1e-3, weight_decay=1e-4) -> OptimizerState:
    arrays = params.arrays()
    return OptimizerState(
        m=[np.zeros_like(a) for a in arrays],
        v=[np.zeros_like(a) for a in arrays],
        lr=lr,
        weight_decay=weight_decay,
    )


def optimizer_step(params: MlpParams, grads, state: OptimizerState):
    """One update; returns (new params, new state)."""
    dW, db = grads
    garrays = []
    for gw, gb in zip(dW, db):
        garrays.append(gw)
        garrays.append(gb)
    parrays = params.arrays()
    t = state.step + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(parrays, garrays, state.m, state.v):
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        p = p - state.lr * (mhat / (np.sqrt(vhat) + state.eps)) - state.lr * state.weight_decay * p
        new_m.append(m)
        new_v.append(v)
        new_p.append(p)
    weights = new_p[0::2]
    biases = new_p[1::2]
    st = OptimizerState(
        step=t, m=new_m, v=new_v, lr=state.lr,
        weight_decay=state.weight_decay, beta1=state.beta1,
        beta2=state.beta2, eps=state.eps,
    )
    return MlpParams(weights, biases), st


# -- diagnostics ------------------------------------------------------------------

def lipschitz_estimate(lifting, samples) -> float:
    """Max pairwise ratio ||g(x)-g(y)|| / ||x-y||; a lower bound on the true
    Lipschitz constant of the lifting over the sampled region."""
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    G = lifting.lift_batch(X.T).T  # rows are lifted samples
    best = 0.0
    found = False
    chunk = 512
    for i0 in range(0, X.shape[0], chunk):
        xs = X[i0:i0 + chunk]
        gs = G[i0:i0 + chunk]
        dx = np.linalg.norm(xs[:, None, :] - X[None, :, :], axis=2)
        dg = np.linalg.norm(gs[:, None, :] - G[None, :, :], axis=2)
        mask = dx > 0.0
        if np.any(mask):
            found = True
            best = max(best, float(np.max(dg[mask] / dx[mask])))
    if not found:
        raise ValueError("all samples coincide; Lipschitz ratio undefined")
    return best
