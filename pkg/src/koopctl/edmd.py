"""Batch identification of the lifted linear model: closed-form least-squares
solves, Gram-inverse initialization, rank diagnostics, and prediction.

With ridge lam > 0 the solves use the regularized normal equations so the
iterative updates reproduce the batch solution exactly; with lam = 0 they use
an SVD pseudoinverse with relative cutoff 1e-12.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import RankError
from .lifting import load_checkpoint, save_checkpoint
from .snapshots import DataMatrices


def check_full_row_rank(M, tol: float = 1e-9):
    """(is_full, numerical_rank): full iff the smallest singular value
    exceeds tol times the largest."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return False, 0
    rank = int(np.sum(s > tol * s[0]))
    return rank == M.shape[0], rank


def _regressor(data: DataMatrices):
    return np.vstack([data.G, data.U]) if data.U.shape[0] else data.G


def _solve_regularized(H, Z, lam, ridge_a=0, r=None):
    gram = Z @ Z.T
    reg = np.full(Z.shape[0], lam)
    if ridge_a and r is not None:
        reg[:r] += ridge_a
    gram[np.diag_indices_from(gram)] += reg
    return np.linalg.solve(gram, (H @ Z.T).T).T


def solve_batch(data: DataMatrices, lam: float = 0.0, ridge_a: float = 0.0):
    """Least-squares [A B] fitting the lifted one-step dynamics.

    ridge_a adds extra Tikhonov weight on the A-block only (optional
    shrinkage toward a contractive A)."""
    Z = _regressor(data)
    r = data.G.shape[0]
    if lam == 0.0 and ridge_a == 0.0:
        full, rank = check_full_row_rank(Z)
        if not full:
            raise RankError(
                f"[G;U] has numerical rank {rank} < {Z.shape[0]}",
                numerical_rank=rank, tol=1e-9,
            )
        AB = data.H @ np.linalg.pinv(Z, rcond=1e-12)
    else:
        AB = _solve_regularized(data.H, Z, lam, ridge_a, r)
    return AB[:, :r], AB[:, r:]


def solve_decoder(data: DataMatrices, lam: float = 0.0):
    """Least-squares decoder mapping lifted successors back to states."""
    if lam == 0.0:
        full, rank = check_full_row_rank(data.H)
        if not full:
            raise RankError(
                f"H has numerical rank {rank} < {data.H.shape[0]}",
                numerical_rank=rank, tol=1e-9,
            )
        return data.Y @ np.linalg.pinv(data.H, rcond=1e-12)
    return _solve_regularized(data.Y, data.H, lam)


def _inverse_gram(M, lam):
    gram = M @ M.T
    gram[np.diag_indices_from(gram)] += lam
    try:
        L = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        full, rank = check_full_row_rank(M)
        raise RankError(
            f"Gram matrix singular (rank {rank} of {M.shape[0]}); "
            "increase the window or use lam > 0",
            numerical_rank=rank, tol=1e-9,
        )
    inv = np.linalg.inv(L)
    P = inv.T @ inv
    return 0.5 * (P + P.T)


def init_grams(data: DataMatrices, lam: float = 0.0):
    """Inverse (ridged) Gram matrices of [G;U] and H."""
    return _inverse_gram(_regressor(data), lam), _inverse_gram(data.H, lam)


@dataclass
class LiftedModel:
    """Lifted linear surrogate with the Gram inverses needed for iterative
    updates.  Treated as an immutable snapshot: updates build new values."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    P: np.ndarray
    Pbar: np.ndarray
    lifting: object
    lam: float = 0.0
    tau: int = 0
    fixed_decoder: bool = False

    @property
    def n(self):
        return self.C.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def r(self):
        return self.A.shape[0]

    def lift(self, x):
        return self.lifting.lift(x)

    def evolve(self, **updated):
        """Next-update snapshot with replaced fields and tau incremented."""
        return replace(self, tau=self.tau + 1, **updated)


def build_model(columns_or_data, lifting, lam: float = 0.0, tau: int = 0,
                fixed_decoder: bool = False) -> LiftedModel:
    """Batch solve + Gram initialization over a window."""
    if isinstance(columns_or_data, DataMatrices):
        data = columns_or_data
    else:
        from .snapshots import assemble_data_matrices
        data = assemble_data_matrices(columns_or_data, lifting)
    A, B = solve_batch(data, lam)
    if fixed_decoder:
        n, r = data.X.shape[0], data.G.shape[0]
        C = np.hstack([np.eye(n), np.zeros((n, r - n))])
    else:
        C = solve_decoder(data, lam)
    P, Pbar = init_grams(data, lam)
    return LiftedModel(A=A, B=B, C=C, P=P, Pbar=Pbar, lifting=lifting,
                       lam=lam, tau=tau, fixed_decoder=fixed_decoder)


def predict_step(model: LiftedModel, x, u):
    """One-step state prediction through the lifted model."""
    g = model.lift(np.asarray(x, dtype=float))
    u = np.asarray(u, dtype=float).reshape(model.m)
    g_next = model.A @ g + (model.B @ u if model.m else 0.0)
    return model.C @ g_next


def predict_rollout(model: LiftedModel, x0, u_seq, steps: int, relift: bool = False):
    """Multi-step prediction; the default keeps the rollout in the lifted
    space (nominal-system semantics) and decodes each step for output.

    u_seq: (steps, m) or None for autonomous models.  Returns (steps, n).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if model.m:
        U = np.asarray(u_seq, dtype=float).reshape(steps, model.m)
    else:
        U = np.zeros((steps, 0))
    out = np.empty((steps, model.n))
    g = model.lift(np.asarray(x0, dtype=float))
    for j in range(steps):
        g = model.A @ g + (model.B @ U[j] if model.m else 0.0)
        x_hat = model.C @ g
        out[j] = x_hat
        if relift:
            g = model.lift(x_hat)
    return out


# -- serialization -----------------------------------------------------------

def _model_paths(path):
    path = os.fspath(path)
    if not path.endswith(".npz"):
        path += ".npz"
    return path, path[: -len(".npz")] + ".theta.json"


def save_model(model: LiftedModel, path) -> None:
    """Writes `<stem>.npz` plus a lifting checkpoint `<stem>.theta.json`
    referenced from the model file; the round trip is bit-exact."""
    path, theta_path = _model_paths(path)
    save_checkpoint(model.lifting, theta_path)
    np.savez(
        path,
        format="koopctl-model",
        version=1,
        n=model.n, m=model.m, r=model.r,
        tau=model.tau, lam=model.lam,
        fixed_decoder=model.fixed_decoder,
        A=model.A, B=model.B, C=model.C, P=model.P, Pbar=model.Pbar,
        theta_ref=os.path.basename(theta_path),
    )


def load_model(path) -> LiftedModel:
    path, _ = _model_paths(path)
    with np.load(path, allow_pickle=False) as z:
        if str(z["format"]) != "koopctl-model" or int(z["version"]) != 1:
            raise ValueError("unrecognized model format")
        theta_path = os.path.join(os.path.dirname(path), str(z["theta_ref"]))
        lifting = load_checkpoint(theta_path)
        model = LiftedModel(
            A=z["A"], B=z["B"], C=z["C"], P=z["P"], Pbar=z["Pbar"],
            lifting=lifting, lam=float(z["lam"]), tau=int(z["tau"]),
            fixed_decoder=bool(z["fixed_decoder"]),
        )
        expect = (int(z["n"]), int(z["m"]), int(z["r"]))
    if (model.n, model.m, model.r) != expect:
        raise ValueError("model dimension metadata inconsistent with arrays")
    return model
