"""Trajectory data stream: snapshots, the sliding-window buffer, and the
data/update matrices consumed by the identification algorithms.

The buffer stores completed transitions (x_k, u_k, x_{k+1}) rather than bare
states: the fitted window may become non-contiguous in time after a gate
rejects a batch, and a transition record stays self-contained either way.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, NotReadyError, SequencingError


@dataclass(frozen=True)
class Snapshot:
    """One (state, input) sample at discrete time index k."""

    x: np.ndarray
    u: np.ndarray
    k: int


@dataclass(frozen=True)
class Column:
    """A completed transition: state/input at k plus the successor state."""

    k: int
    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray


@dataclass(frozen=True)
class DataMatrices:
    """Column-stacked window data.  Columns are sampling instants."""

    X: np.ndarray  # n x w
    Y: np.ndarray  # n x w (one-step successors of X's columns)
    U: np.ndarray  # m x w
    G: np.ndarray  # r x w, lifted X
    H: np.ndarray  # r x w, lifted Y


@dataclass(frozen=True)
class UpdateBatch:
    """Rank-2b update data: outgoing window front then incoming batch.

    E is the signature matrix diag(-I_b, I_b); E @ E == I.
    """

    Z: np.ndarray  # (r+m) x 2b, [lifted state; input] columns
    W: np.ndarray  # r x 2b, lifted successors
    V: np.ndarray  # n x 2b, raw successors
    E: np.ndarray  # 2b x 2b
    b: int


def _check_vector(v, length, name):
    v = np.asarray(v, dtype=float)
    if v.shape != (length,):
        raise ValueError(f"{name} must have shape ({length},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} contains non-finite entries")
    return v


class TrajectoryBuffer:
    """Sliding-window store of transitions plus the accumulating new batch.

    Single-writer: one loop mutates the buffer; read-only views may be
    shared between mutations.  After each accepted update the retained
    record count is bounded by w + b + 1 (window + new batch + pending
    snapshot).
    """

    def __init__(self, n: int, m: int, w: int, b: int):
        if not (w >= b >= 1):
            raise ValueError(f"need w >= b >= 1, got w={w}, b={b}")
        self.n = int(n)
        self.m = int(m)
        self.w = int(w)
        self.b = int(b)
        self._window: list[Column] = []
        self._new: list[Column] = []
        self._pending: Snapshot | None = None
        self._last_k: int | None = None

    # -- stream ingestion ---------------------------------------------------

    def push(self, s: Snapshot) -> None:
        """Append the next snapshot; its index must continue the stream."""
        x = _check_vector(s.x, self.n, "x")
        u = _check_vector(s.u, self.m, "u")
        if self._last_k is not None and s.k != self._last_k + 1:
            raise SequencingError(
                f"snapshot index {s.k} does not follow stream index {self._last_k}"
            )
        if self._pending is not None and s.k == self._pending.k + 1:
            p = self._pending
            self._new.append(Column(p.k, p.x, p.u, x))
        self._pending = Snapshot(x, u, s.k)
        self._last_k = s.k

    @property
    def last_index(self):
        return self._last_k

    @property
    def pending(self):
        """The newest snapshot, still awaiting its successor."""
        return self._pending

    @property
    def has_window(self) -> bool:
        return bool(self._window)

    @property
    def window_start(self):
        return self._window[0].k if self._window else None

    @property
    def new_count(self) -> int:
        """Snapshots collected beyond the fitted window (all of them before
        a window exists)."""
        if self._window:
            return len(self._new)
        return len(self._new) + (1 if self._pending is not None else 0)

    @property
    def retained_count(self) -> int:
        """Number of retained records (transition columns plus pending)."""
        n = len(self._window) + len(self._new)
        return n + (1 if self._pending is not None else 0)

    def window_columns(self) -> list[Column]:
        return list(self._window)

    def new_columns(self) -> list[Column]:
        return list(self._new)

    def all_columns(self) -> list[Column]:
        return self._window + self._new

    # -- window management --------------------------------------------------

    def promote_window(self) -> None:
        """Adopt the latest w completed transitions as the fitted window.

        Older transitions are dropped; anything pending stays pending.
        """
        cols = self._window + self._new
        if len(cols) < self.w:
            raise CapacityError(
                f"need {self.w} completed transitions to form a window, have {len(cols)}"
            )
        self._window = cols[-self.w:]
        self._new = []

    @property
    def batch_ready(self) -> bool:
        return self.has_window and len(self._new) >= self.b

    def advance(self) -> None:
        """Slide the window by b: drop its oldest b transitions and absorb
        the new batch."""
        if not self.batch_ready:
            raise NotReadyError("no complete new batch to absorb")
        self._window = self._window[self.b:] + self._new[: self.b]
        self._new = self._new[self.b:]

    def absorb_new(self) -> None:
        """Consume the new batch without removing anything (window grows)."""
        if not self.batch_ready:
            raise NotReadyError("no complete new batch to absorb")
        self._window = self._window + self._new[: self.b]
        self._new = self._new[self.b:]

    def clear_new(self) -> None:
        """Discard the accumulated new snapshots (gate skip / rejection)."""
        self._new = []
        self._pending = None

    # -- matrix assembly ----------------------------------------------------

    def data_matrices(self, lifting) -> DataMatrices:
        if len(self._window) < self.w:
            raise CapacityError(
                f"window holds {len(self._window)} transitions, need {self.w}"
            )
        return assemble_data_matrices(self._window, lifting)

    def update_batch(self, lifting) -> UpdateBatch:
        """Rank-2b batch: the window's oldest b transitions (outgoing) and
        the first b new transitions (incoming)."""
        if len(self._new) < self.b:
            raise NotReadyError(
                f"have {len(self._new)} new transitions, need {self.b}"
            )
        if len(self._window) < self.w:
            raise CapacityError("window incomplete")
        cols = self._window[: self.b] + self._new[: self.b]
        return assemble_update_batch(cols, self.b, lifting)

    def addition_batch(self, lifting) -> UpdateBatch:
        """Rank-b batch from new data only (pure addition, E = I_b)."""
        if len(self._new) < self.b:
            raise NotReadyError(
                f"have {len(self._new)} new transitions, need {self.b}"
            )
        cols = self._new[: self.b]
        X = np.column_stack([c.x for c in cols])
        U = np.column_stack([c.u for c in cols]) if self.m else np.zeros((0, self.b))
        Z = np.vstack([lifting.lift_batch(X), U])
        W = lifting.lift_batch(np.column_stack([c.x_next for c in cols]))
        V = np.column_stack([c.x_next for c in cols])
        return UpdateBatch(Z=Z, W=W, V=V, E=np.eye(self.b), b=self.b)

    def new_batch_arrays(self):
        """(X_new, U_new, Y_new) over the first b new transitions."""
        if len(self._new) < self.b:
            raise NotReadyError("new batch incomplete")
        cols = self._new[: self.b]
        Xn = np.column_stack([c.x for c in cols])
        Un = np.column_stack([c.u for c in cols]) if self.m else np.zeros((0, self.b))
        Yn = np.column_stack([c.x_next for c in cols])
        return Xn, Un, Yn


def assemble_data_matrices(columns, lifting) -> DataMatrices:
    """Stack transitions column-wise and lift both sides."""
    if not columns:
        raise CapacityError("no transitions supplied")
    X = np.column_stack([c.x for c in columns])
    Y = np.column_stack([c.x_next for c in columns])
    m = columns[0].u.shape[0]
    U = (
        np.column_stack([c.u for c in columns])
        if m
        else np.zeros((0, len(columns)))
    )
    G = lifting.lift_batch(X)
    H = lifting.lift_batch(Y)
    return DataMatrices(X=X, Y=Y, U=U, G=G, H=H)


def assemble_update_batch(columns, b, lifting) -> UpdateBatch:
    """Build Z, W, V, E from b outgoing then b incoming transitions."""
    if len(columns) != 2 * b:
        raise ValueError(f"expected {2 * b} transitions, got {len(columns)}")
    X = np.column_stack([c.x for c in columns])
    m = columns[0].u.shape[0]
    U = np.column_stack([c.u for c in columns]) if m else np.zeros((0, 2 * b))
    Z = np.vstack([lifting.lift_batch(X), U])
    W = lifting.lift_batch(np.column_stack([c.x_next for c in columns]))
    V = np.column_stack([c.x_next for c in columns])
    E = np.diag(np.concatenate([-np.ones(b), np.ones(b)]))
    return UpdateBatch(Z=Z, W=W, V=V, E=E, b=b)


def feed_buffer(buffer: TrajectoryBuffer, X, U, k0: int = 0) -> None:
    """Push states X ((T+1) x n) with inputs U (T x m) in stream order.

    The final state's input defaults to zero when U is one row short.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.asarray(U, dtype=float).reshape(-1, buffer.m)
    for i in range(X.shape[0]):
        u = U[i] if i < U.shape[0] else np.zeros(buffer.m)
        buffer.push(Snapshot(X[i], u, k0 + i))


# -- CSV interchange --------------------------------------------------------

def trajectory_header(n, m):
    return ["k"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]


def write_trajectory_csv(path, X, U, k0: int = 0) -> None:
    """Rows `k,x1..xn,u1..um`; inputs beyond U's length are written as 0."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    U = np.asarray(U, dtype=float)
    n = X.shape[1]
    m = U.shape[1] if U.ndim == 2 else 0
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(trajectory_header(n, m))
        for i in range(X.shape[0]):
            u = U[i] if i < len(U) else np.zeros(m)
            wr.writerow([k0 + i] + [repr(v) for v in X[i]] + [repr(v) for v in u])


def read_trajectory_csv(path):
    """Returns (ks, X, U) parsed from the snapshot CSV format."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        n = sum(1 for h in header if h.startswith("x"))
        m = sum(1 for h in header if h.startswith("u"))
        ks, xs, us = [], [], []
        for row in rd:
            ks.append(int(row[0]))
            xs.append([float(v) for v in row[1:1 + n]])
            us.append([float(v) for v in row[1 + n:1 + n + m]])
    return np.array(ks), np.array(xs), np.array(us).reshape(len(ks), m)


def export_buffer_csv(buffer: TrajectoryBuffer, path) -> None:
    """Dump the retained (k, x, u) records, window first."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(trajectory_header(buffer.n, buffer.m))
        for c in buffer.all_columns():
            wr.writerow([c.k] + [repr(v) for v in c.x] + [repr(v) for v in c.u])
        if buffer._pending is not None:
            p = buffer._pending
            wr.writerow([p.k] + [repr(v) for v in p.x] + [repr(v) for v in p.u])
