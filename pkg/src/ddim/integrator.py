"""Method-of-steps integration of delay equations on the history grid.

The head ODE x'(t) = A x_t + B F(t, C x_t) is advanced with the classical
4-stage scheme.  Steps are aligned with the grid (h = tau/m), so every
discrete lag lands on a stored node at whole-step stage times; the two
half-step stages read delayed values through 4-point cubic interpolation of
stored heads.  Each interpolation stencil is chosen per lag index, never per
absolute time, which makes a restarted trajectory reproduce the original run
bit for bit.  Node values at the initial time and earlier come verbatim from
the initial segment, so the first interval integrates against the given
history, smooth or not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import (
    ConfigurationError,
    DegeneratePairError,
    DelayModel,
    DivergenceError,
    DomainError,
    HistoryGrid,
    HState,
    h_norm,
    trapezoid_weights,
)

__all__ = ["Trajectory", "evolve", "check_ulip", "UlipReport"]

_DIVERGENCE_GUARD = 1e8


def _lagrange4(x: float) -> np.ndarray:
    """Weights of the cubic through nodes {0,1,2,3} evaluated at position x."""
    nodes = np.arange(4.0)
    w = np.empty(4)
    for i in range(4):
        others = np.delete(nodes, i)
        w[i] = np.prod((x - others) / (nodes[i] - others))
    return w


# Midpoint weights per stencil shift: lag index 0 uses nodes {i..i+3},
# interior lags use {i-1..i+2}, the lag one node below zero uses {i-2..i+1}.
_W_FIRST = _lagrange4(0.5)
_W_INNER = _lagrange4(1.5)
_W_LAST = _lagrange4(2.5)


def _mid_rows(heads: np.ndarray, p: int, m: int) -> np.ndarray:
    """History rows x(t_p + h/2 + theta_j), j = 0..m-1, from stored heads.

    Stencils depend only on the lag index j, so the result is invariant under
    restarting the run from stored node values.
    """
    base = heads[p - m:p + 1]  # rows p-m .. p
    out = np.empty((m,) + heads.shape[1:])
    win = sliding_window_view(base, 4, axis=0)  # window start q -> rows q..q+3
    out[1:m - 1] = np.einsum("q,j...q->j...", _W_INNER, win[:m - 2])
    out[0] = np.tensordot(_W_FIRST, base[0:4], axes=(0, 0))
    out[m - 1] = np.tensordot(_W_LAST, base[m - 3:m + 1], axes=(0, 0))
    return out


def _mid_value(heads: np.ndarray, p: int) -> np.ndarray:
    """x(t_p + h/2) from nodes p-2..p+1 (the trailing-stencil read)."""
    return np.tensordot(_W_LAST, heads[p - 2:p + 2], axes=(0, 0))


class _FunctionalApplier:
    """Pre-resolved evaluation of a delay functional during stepping.

    ``rows`` holds history values at lag indices 0..m-1; the value at lag 0
    (the current head) is passed separately so stage values can be used.
    Works on stacked columns: rows (m, n, k), y (n, k) -> (out, k).
    """

    def __init__(self, L, grid: HistoryGrid):
        self.m = grid.m
        self.mass_rows = [(grid.node_of_lag(lag), mat) for lag, mat in L.point_masses]
        if L.kernel is not None:
            if L.kernel.shape[0] != grid.m + 1:
                raise ConfigurationError("kernel rows do not match the grid")
            w = trapezoid_weights(grid)
            self.kern_w = w[:, None, None] * L.kernel
        else:
            self.kern_w = None
        self.out_dim = L.out_dim

    def __call__(self, rows: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros((self.out_dim, y.shape[-1]))
        for r, mat in self.mass_rows:
            v = y if r == self.m else rows[r]
            out += mat @ v
        if self.kern_w is not None:
            out += np.einsum("ion,ink->ok", self.kern_w[:self.m], rows)
            out += self.kern_w[self.m] @ y
        return out


def _rk4_run(heads: np.ndarray, m: int, t0: float, h: float, K: int, rhs) -> None:
    """Advance ``heads`` in place over K steps.

    ``rhs(k, stage, t, y, rows)`` receives the step index, the stage number
    (0..3), the stage time, the stage head (n, kcols) and the history rows
    (m, n, kcols) for lag indices 0..m-1.
    """
    for k in range(K):
        p = m + k
        t = t0 + k * h
        y = heads[p]
        f1 = rhs(k, 0, t, y, heads[p - m:p])
        rows_mid = _mid_rows(heads, p, m)
        f2 = rhs(k, 1, t + 0.5 * h, y + 0.5 * h * f1, rows_mid)
        f3 = rhs(k, 2, t + 0.5 * h, y + 0.5 * h * f2, rows_mid)
        f4 = rhs(k, 3, t + h, y + h * f3, heads[p + 1 - m:p + 1])
        ynew = y + (h / 6.0) * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
        if not np.isfinite(ynew).all() or np.abs(ynew).max() > _DIVERGENCE_GUARD:
            raise DivergenceError("integration diverged", t + h)
        heads[p + 1] = ynew


@dataclass(frozen=True)
class Trajectory:
    """Dense record of a solution: heads x(t0 + (p - m) h) for p = 0..m+K.

    The first m+1 rows are the initial segment; node m carries the head at
    t0.  ``state_at`` reconstructs the full state at any node time.
    """

    model: DelayModel
    grid: HistoryGrid
    t0: float
    h: float
    K: int
    heads: np.ndarray  # (m + K + 1, n)

    def __post_init__(self):
        self.heads.setflags(write=False)

    @property
    def n(self) -> int:
        return self.heads.shape[1]

    @property
    def T(self) -> float:
        return self.K * self.h

    @property
    def times(self) -> np.ndarray:
        """Node times t0, t0+h, ..., t0+T."""
        return self.t0 + np.arange(self.K + 1) * self.h

    @property
    def head_path(self) -> np.ndarray:
        """x at node times, shape (K+1, n)."""
        return self.heads[self.grid.m:]

    def node_index(self, t: float) -> int:
        q = (t - self.t0) / self.h
        k = round(q)
        if abs(q - k) > 1e-9 * max(1.0, abs(q)):
            raise DomainError(f"t={t} is not a node time (h={self.h})")
        if k < 0 or k > self.K:
            raise DomainError(f"t={t} outside [{self.t0}, {self.t0 + self.T}]")
        return int(k)

    def head_at(self, t: float) -> np.ndarray:
        return self.heads[self.grid.m + self.node_index(t)]

    def state_at(self, t: float) -> HState:
        """Full state at a node time; seg rows are lagged heads, seg[m] is the head."""
        p = self.grid.m + self.node_index(t)
        seg = self.heads[p - self.grid.m:p + 1]
        return HState(self.heads[p], seg, continuous=True)

    def segment_mid(self, p: int) -> np.ndarray:
        """Interpolated segment at t_p + h/2 (all m+1 rows), for coefficient reads."""
        rows = np.empty((self.grid.m + 1, self.n))
        rows[:self.grid.m] = _mid_rows(self.heads, p, self.grid.m)
        rows[self.grid.m] = _mid_value(self.heads, p)
        return rows


def _nonlinear_rhs(model: DelayModel, grid: HistoryGrid):
    A = _FunctionalApplier(model.A_tilde, grid)
    if model.F is None:
        def rhs(k, stage, t, y, rows):
            return A(rows, y)
        return rhs
    C = _FunctionalApplier(model.C_tilde, grid)
    B = model.B_tilde

    def rhs(k, stage, t, y, rows):
        out = A(rows, y)
        c = C(rows, y)[:, 0]
        out = out + (B @ np.atleast_1d(model.F(t, c)))[:, None]
        return out

    return rhs


def evolve(model: DelayModel, v0: HState, t0: float, T: float, h: float) -> Trajectory:
    """Integrate the delay equation from a continuous-compatible state.

    The step must reproduce the state's grid spacing (h = tau/m) so that all
    discrete lags land on stored nodes, and T must be a whole number of steps.
    """
    if not v0.continuous:
        raise DomainError("evolve requires a continuous-compatible initial state")
    if T <= 0:
        raise DomainError("T must be positive")
    m = v0.m
    grid = HistoryGrid(model.tau, m)
    s = model.tau / h
    if abs(s - round(s)) > 1e-9 * max(1.0, s):
        raise ConfigurationError(f"h={h} does not divide tau={model.tau}")
    if round(s) != m:
        raise ConfigurationError(
            f"step h={h} must equal the grid spacing tau/m={grid.h} "
            f"(state sampled with m={m})"
        )
    q = T / h
    if abs(q - round(q)) > 1e-9 * max(1.0, q):
        raise ConfigurationError(f"T={T} is not a whole number of steps of h={h}")
    K = int(round(q))
    heads = np.empty((m + K + 1, v0.n, 1))
    heads[:m + 1] = v0.seg[:, :, None]
    _rk4_run(heads, m, t0, h, K, _nonlinear_rhs(model, grid))
    return Trajectory(model=model, grid=grid, t0=t0, h=h, K=K,
                      heads=np.ascontiguousarray(heads[:, :, 0]))


@dataclass(frozen=True)
class UlipReport:
    """Growth of the state-space distance between two solutions."""

    sup_ratio: float
    rate: float
    times: np.ndarray
    ratios: np.ndarray


def check_ulip(model: DelayModel, v1: HState, v2: HState, T: float, h: float) -> UlipReport:
    """Track |phi^t(v1) - phi^t(v2)|_H / |v1 - v2|_H at node times.

    Returns the sup over nodes and the exponential rate fitted to the tail.
    The caller compares against the a-priori bound M1 * exp(kappa t).
    """
    if np.array_equal(v1.head, v2.head) and np.array_equal(v1.seg, v2.seg):
        raise DegeneratePairError("check_ulip needs two distinct states")
    tr1 = evolve(model, v1, 0.0, T, h)
    tr2 = evolve(model, v2, 0.0, T, h)
    grid = tr1.grid
    d0 = h_norm(v1 - v2, grid)
    delta_sq = ((tr1.heads - tr2.heads) ** 2).sum(axis=1)
    w = trapezoid_weights(grid)
    seg_sq = np.correlate(delta_sq, w, mode="valid")  # sum_j w_j |d|^2[p-m+j]
    norms = np.sqrt(delta_sq[grid.m:] + seg_sq)
    ratios = norms / d0
    times = tr1.times
    pos = ratios > 0
    rate = float(np.polyfit(times[pos], np.log(ratios[pos]), 1)[0]) if pos.sum() > 1 else 0.0
    return UlipReport(sup_ratio=float(ratios.max()), rate=rate,
                      times=times, ratios=ratios)
