"""Sliding-window iterative identification: the rank-2b update of the lifted
system matrices and their Gram inverses, the O(b^3) feasibility check, the
two update gates, the estimation-error diagnostic, and the online loop.

The update simultaneously removes the window's b oldest columns and adds the
b newest via one low-rank correction.  With Gamma = (E + Z^T P Z)^{-1}:

    [A' B'] = [A B] + (W - [A B] Z) Gamma Z^T P
    P'      = P - P Z Gamma Z^T P

and analogously for the decoder with (V, W, Pbar).  With the same ridge on
the Gram matrices this reproduces the batch solve on the advanced window
exactly, which is the module's master oracle.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .edmd import LiftedModel, predict_step
from .errors import FeasibilityError
from .snapshots import Snapshot, TrajectoryBuffer, UpdateBatch

log = logging.getLogger(__name__)

REFAC_INTERVAL = 100  # accepted updates between Gram re-factorizations


@dataclass(frozen=True)
class GateConfig:
    """Update gating: the residual threshold gate skips updates while the
    current model still fits the new batch; the improvement gate rejects
    candidates that fit the new batch worse than the current model."""

    epsilon: float = 0.0
    epsilon_gate_enabled: bool = False
    improvement_gate_enabled: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


@dataclass
class UpdateRecord:
    tau: int
    accepted: bool
    reason: str  # accepted | infeasible | epsilon-gate | improvement-gate
    err_before: float
    err_after: float
    wall_us: float


@dataclass(frozen=True)
class ErrorBoundInputs:
    """Empirical rates feeding the one-step estimation-error bound."""

    mu_x: float
    mu_u: float
    mu_g: float
    e_recon: float

    def __post_init__(self):
        if min(self.mu_x, self.mu_u, self.mu_g, self.e_recon) < 0:
            raise ValueError("bound inputs must be non-negative")


def feasibility_check(model: LiftedModel, batch: UpdateBatch, tol: float = 1e-9) -> bool:
    """True iff both small symmetric matrices E + Z^T P Z and
    E + W^T Pbar W are invertible at relative eigenvalue tolerance tol.

    Equivalent to the advanced window's data matrices keeping full row rank;
    costs O(b^3) independent of the window width.
    """
    for M in (batch.E + batch.Z.T @ model.P @ batch.Z,
              batch.E + batch.W.T @ model.Pbar @ batch.W):
        eig = np.abs(np.linalg.eigvalsh(0.5 * (M + M.T)))
        if eig.max() == 0.0 or eig.min() <= tol * eig.max():
            return False
    return True


def _woodbury(theta_mat, P, Z, W, E):
    """Shared low-rank correction: returns (theta', P')."""
    S = E + Z.T @ P @ Z
    try:
        gamma = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        raise FeasibilityError("update core matrix is singular; batch should "
                               "have been screened by the feasibility check")
    PZ = P @ Z
    theta_new = theta_mat + (W - theta_mat @ Z) @ gamma @ PZ.T
    P_new = P - PZ @ gamma @ PZ.T
    return theta_new, 0.5 * (P_new + P_new.T)


def update_dynamics(model: LiftedModel, batch: UpdateBatch):
    """Rank-2b update of [A B] and the inverse Gram of [G;U]."""
    AB = np.hstack([model.A, model.B])
    AB_new, P_new = _woodbury(AB, model.P, batch.Z, batch.W, batch.E)
    r = model.r
    return AB_new[:, :r], AB_new[:, r:], P_new


def update_decoder(model: LiftedModel, batch: UpdateBatch):
    """Rank-2b update of C and the inverse Gram of H."""
    C_new, Pbar_new = _woodbury(model.C, model.Pbar, batch.W, batch.V, batch.E)
    return C_new, Pbar_new


def apply_update(model: LiftedModel, batch: UpdateBatch) -> LiftedModel:
    """Candidate model after one accepted batch (tau advances)."""
    A, B, P = update_dynamics(model, batch)
    C, Pbar = update_decoder(model, batch)
    if model.fixed_decoder:
        C = model.C
    return model.evolve(A=A, B=B, C=C, P=P, Pbar=Pbar)


def fitting_error_sq(model: LiftedModel, Xn, Un, Yn) -> float:
    """Squared Frobenius one-step fitting error of the model on a batch."""
    G = model.lifting.lift_batch(Xn)
    pred = model.C @ (model.A @ G + (model.B @ Un if Un.shape[0] else 0.0))
    return float(np.sum((pred - Yn) ** 2))


def gate_epsilon(model: LiftedModel, Xn, Un, Yn, epsilon: float) -> bool:
    """True when the current model's fit on the new batch is already within
    the threshold, so the update is skipped."""
    return fitting_error_sq(model, Xn, Un, Yn) <= epsilon


def gate_improvement(old: LiftedModel, cand: LiftedModel, Xn, Un, Yn) -> bool:
    """True when the candidate fits the new batch at least as well as the
    current model; otherwise the candidate is discarded."""
    return fitting_error_sq(cand, Xn, Un, Yn) <= fitting_error_sq(old, Xn, Un, Yn)


def error_bound(inputs: ErrorBoundInputs, model: LiftedModel) -> float:
    """One-step estimation-error bound from the empirical variation rates,
    the lifting's Lipschitz estimate, and the window reconstruction error.
    Diagnostic only (the bound is asymptotic in the network width)."""
    ca = np.linalg.norm(model.C @ model.A, 2)
    cb = np.linalg.norm(model.C @ model.B, 2) if model.m else 0.0
    return (ca * inputs.mu_g + 1.0) * inputs.mu_x + cb * inputs.mu_u + inputs.e_recon


def reconstruction_error(model: LiftedModel, columns) -> float:
    """Max ||x - C g(x)|| over a window's states."""
    X = np.column_stack([c.x for c in columns])
    rec = model.C @ model.lifting.lift_batch(X)
    return float(np.max(np.linalg.norm(rec - X, axis=0))) if X.size else 0.0


def empirical_rates(columns) -> tuple[float, float]:
    """Running maxima of per-step state/input increments over a window."""
    mu_x = 0.0
    mu_u = 0.0
    for c in columns:
        mu_x = max(mu_x, float(np.linalg.norm(c.x_next - c.x)))
    for a, b in zip(columns[:-1], columns[1:]):
        if a.u.size:
            mu_u = max(mu_u, float(np.linalg.norm(b.u - a.u)))
    return mu_x, mu_u


@dataclass
class OnlineResult:
    model: LiftedModel
    records: list
    pred_k: np.ndarray      # indices of predicted snapshots
    x_true: np.ndarray      # (N, n)
    x_pred: np.ndarray      # (N, n)
    wall_s: float = 0.0
    stalled: bool = False
    max_retained: int = 0
    bound_log: list = field(default_factory=list)


def process_ready_batch(model: LiftedModel, buffer: TrajectoryBuffer,
                        gates: GateConfig, accumulate: bool = False,
                        accept_count: int = 0):
    """Run one candidate update on a full new batch.

    Returns (model, UpdateRecord).  The buffer is advanced on acceptance and
    its new batch is cleared on any skip or rejection, so the window moves by
    exactly b or not at all.
    """
    t0 = time.perf_counter()
    if accumulate:
        batch = buffer.addition_batch(model.lifting)
        Xn, Un, Yn = buffer.new_batch_arrays()
        err_before = fitting_error_sq(model, Xn, Un, Yn)
        model = apply_update(model, batch)
        buffer.absorb_new()
        err_after = fitting_error_sq(model, Xn, Un, Yn)
        rec = UpdateRecord(model.tau, True, "accepted", err_before, err_after,
                           (time.perf_counter() - t0) * 1e6)
        return model, rec

    batch = buffer.update_batch(model.lifting)
    Xn, Un, Yn = buffer.new_batch_arrays()
    if not feasibility_check(model, batch):
        buffer.clear_new()
        rec = UpdateRecord(model.tau, False, "infeasible", float("nan"),
                           float("nan"), (time.perf_counter() - t0) * 1e6)
        return model, rec
    err_before = fitting_error_sq(model, Xn, Un, Yn)
    if gates.epsilon_gate_enabled and err_before <= gates.epsilon:
        buffer.clear_new()
        rec = UpdateRecord(model.tau, False, "epsilon-gate", err_before,
                           err_before, (time.perf_counter() - t0) * 1e6)
        return model, rec
    cand = apply_update(model, batch)
    err_after = fitting_error_sq(cand, Xn, Un, Yn)
    if gates.improvement_gate_enabled and err_after > err_before:
        buffer.clear_new()
        rec = UpdateRecord(model.tau, False, "improvement-gate", err_before,
                           err_after, (time.perf_counter() - t0) * 1e6)
        return model, rec
    buffer.advance()
    if (accept_count + 1) % REFAC_INTERVAL == 0:
        # Hygiene: rebuild the Gram inverses from the window to stop drift.
        from .edmd import init_grams
        from .snapshots import assemble_data_matrices
        data = assemble_data_matrices(buffer.window_columns(), cand.lifting)
        P, Pbar = init_grams(data, cand.lam)
        cand = cand.evolve(P=P, Pbar=Pbar, tau=cand.tau - 1)
    rec = UpdateRecord(cand.tau, True, "accepted", err_before, err_after,
                       (time.perf_counter() - t0) * 1e6)
    return cand, rec


def run_online_learning(snapshots, model0: LiftedModel, buffer: TrajectoryBuffer,
                        gates: GateConfig, *, method: str = "sliding",
                        stall_limit: int = 10, track_bound: bool = False,
                        theta_refresh_steps: int = 0) -> OnlineResult:
    """Stream snapshots through the learning loop.

    Per arriving snapshot: emit the one-step prediction made by the current
    model from the previous snapshot, push, and when b new snapshots have
    accumulated run the feasibility check, the gates, and the candidate
    update.  `method` is "sliding" (remove + add), "accumulate" (add only),
    or "fixed" (never update).
    """
    if method not in ("sliding", "accumulate", "fixed"):
        raise ValueError(f"unknown online method {method!r}")
    model = model0
    records: list[UpdateRecord] = []
    ks, xt, xp = [], [], []
    bound_log = []
    consec_infeasible = 0
    accept_count = 0
    stalled = False
    max_retained = buffer.retained_count
    t_start = time.perf_counter()
    for s in snapshots:
        prev = buffer._pending
        if prev is not None:
            ks.append(s.k)
            xt.append(np.asarray(s.x, dtype=float))
            xp.append(predict_step(model, prev.x, prev.u))
        buffer.push(s)
        max_retained = max(max_retained, buffer.retained_count)
        if method != "fixed" and buffer.batch_ready:
            if track_bound:
                cols = buffer.window_columns()
                mu_x, mu_u = empirical_rates(cols)
                from .lifting import lipschitz_estimate
                mu_g = lipschitz_estimate(model.lifting, np.column_stack(
                    [c.x for c in cols]).T)
                bound_log.append(error_bound(ErrorBoundInputs(
                    mu_x, mu_u, mu_g, reconstruction_error(model, cols)), model))
            model, rec = process_ready_batch(
                model, buffer, gates, accumulate=(method == "accumulate"),
                accept_count=accept_count)
            records.append(rec)
            if rec.accepted:
                accept_count += 1
                consec_infeasible = 0
                if theta_refresh_steps > 0:
                    from .training import refresh_network
                    model = refresh_network(model, buffer.window_columns(),
                                            theta_refresh_steps)
            elif rec.reason == "infeasible":
                consec_infeasible += 1
                if consec_infeasible > stall_limit and not stalled:
                    stalled = True
                    log.warning("update stalled: %d consecutive infeasible "
                                "batches", consec_infeasible)
            else:
                consec_infeasible = 0
    wall = time.perf_counter() - t_start
    n = model.n
    return OnlineResult(
        model=model,
        records=records,
        pred_k=np.array(ks, dtype=int),
        x_true=np.array(xt, dtype=float).reshape(-1, n),
        x_pred=np.array(xp, dtype=float).reshape(-1, n),
        wall_s=wall,
        stalled=stalled,
        max_retained=max_retained,
        bound_log=bound_log,
    )


def stream_from_arrays(X, U, k0: int):
    """Snapshot iterator over trajectory arrays starting at index k0."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m = U.shape[1] if U.ndim == 2 else 0
    for i in range(X.shape[0]):
        u = U[i] if i < len(U) else np.zeros(m)
        yield Snapshot(X[i], np.asarray(u, dtype=float), k0 + i)
