"""Initial model fitting: alternate closed-form solves of the lifted system
matrices with gradient refinement of the observable network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .edmd import LiftedModel, build_model, solve_batch, solve_decoder
from .errors import RankError, TrainingError
from .lifting import (MlpSpec, init_params, loss_eval, loss_grad, make_lifting,
                      optimizer_init, optimizer_step)
from .snapshots import TrajectoryBuffer, assemble_data_matrices


@dataclass
class TrainConfig:
    epochs: int = 30
    grad_steps: int = 50      # gradient steps per alternation
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lam: float = 1e-3         # ridge on the Gram matrices
    spectral_penalty: float = 0.0  # extra Tikhonov on the A block
    mode: str = "mlp"         # mlp | concat | identity
    seed: int = 0


@dataclass
class TrainResult:
    lifting: object
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    loss_history: list = field(default_factory=list)


def _training_columns(buffer_or_columns):
    if isinstance(buffer_or_columns, TrajectoryBuffer):
        buf = buffer_or_columns
        cols = buf.window_columns() if buf.has_window else buf.all_columns()
    else:
        cols = list(buffer_or_columns)
    if not cols:
        raise TrainingError("no training transitions available", epoch=0)
    return cols


def _solve_all(lifting, cols, cfg):
    data = assemble_data_matrices(cols, lifting)
    A, B = solve_batch(data, cfg.lam, ridge_a=cfg.spectral_penalty)
    n, r = data.X.shape[0], data.G.shape[0]
    if cfg.mode == "concat":
        C = np.hstack([np.eye(n), np.zeros((n, r - n))])
    else:
        C = solve_decoder(data, cfg.lam)
    return data, A, B, C


def train_initial(buffer_or_columns, spec: MlpSpec | None, cfg: TrainConfig) -> TrainResult:
    """Alternating fit on the buffered window (or on all transitions when no
    window has been promoted yet).

    Each epoch solves the lifted matrices in closed form with the network
    fixed, then takes cfg.grad_steps optimizer steps on the network with the
    matrices fixed; a final closed-form solve keeps the returned matrices
    consistent with the returned network.  Deterministic given cfg.seed.
    """
    cols = _training_columns(buffer_or_columns)
    rng = np.random.default_rng(cfg.seed)
    n = cols[0].x.shape[0]
    if cfg.mode == "identity":
        lifting = make_lifting("identity", n)
    else:
        lifting = make_lifting(cfg.mode, spec, rng)

    history = []
    opt = None
    for epoch in range(cfg.epochs):
        try:
            data, A, B, C = _solve_all(lifting, cols, cfg)
        except RankError as exc:
            raise TrainingError(f"rank failure at epoch {epoch}: {exc}", epoch=epoch)
        history.append(loss_eval(lifting, A, B, C, data.X, data.Y, data.U))
        if not math.isfinite(history[-1]):
            raise TrainingError(
                f"non-finite loss {history[-1]} at epoch {epoch}", epoch=epoch
            )
        if not lifting.trainable:
            break
        if opt is None:
            opt = optimizer_init(lifting.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        params = lifting.params
        for _ in range(cfg.grad_steps):
            grads = loss_grad(lifting, A, B, C, data.X, data.Y, data.U)
            params, opt = optimizer_step(params, grads, opt)
            lifting = lifting.with_params(params)

    try:
        data, A, B, C = _solve_all(lifting, cols, cfg)
    except RankError as exc:
        raise TrainingError(f"rank failure at final solve: {exc}", epoch=cfg.epochs)
    final = loss_eval(lifting, A, B, C, data.X, data.Y, data.U)
    if not math.isfinite(final):
        raise TrainingError(f"non-finite final loss {final}", epoch=cfg.epochs)
    history.append(final)
    return TrainResult(lifting=lifting, A=A, B=B, C=C, loss_history=history)


def refresh_network(model: LiftedModel, cols, steps: int, lr=1e-3, weight_decay=1e-4) -> LiftedModel:
    """Optional online network refresh: a few gradient steps on the current
    window with the system matrices held fixed."""
    if not model.lifting.trainable or steps <= 0:
        return model
    data = assemble_data_matrices(cols, model.lifting)
    lifting = model.lifting
    params = lifting.params
    opt = optimizer_init(params, lr=lr, weight_decay=weight_decay)
    for _ in range(steps):
        grads = loss_grad(lifting, model.A, model.B, model.C, data.X, data.Y, data.U)
        params, opt = optimizer_step(params, grads, opt)
        lifting = lifting.with_params(params)
    return replace(model, lifting=lifting)


def build_initial_model(columns, lifting, lam: float, fixed_decoder=False) -> LiftedModel:
    """Batch solve + Gram initialization over an explicit column set."""
    return build_model(columns, lifting, lam=lam, fixed_decoder=fixed_decoder)
