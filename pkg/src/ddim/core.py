"""State space and delay-functional primitives.

A state pairs a head vector x in R^n with a history segment phi sampled on a
uniform grid over [-tau, 0].  The L2 part of the inner product is a composite
trapezoid quadrature, so the metric on raw grid coordinates is diagonal.
Delay functionals combine point masses at grid-aligned lags with an optional
distributed kernel applied by the same quadrature.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DelayDimError",
    "DomainError",
    "ConfigurationError",
    "DivergenceError",
    "DegeneratePairError",
    "DegenerateFrameError",
    "BoundaryRootError",
    "ContourResolutionError",
    "VolumeUnderflowError",
    "HistoryGrid",
    "HState",
    "LinearFunctional",
    "DelayModel",
    "linear_model",
    "trapezoid_weights",
    "h_inner",
    "h_norm",
    "e_norm",
    "apply_functional",
    "check_mes",
    "MesReport",
]


class DelayDimError(Exception):
    """Base class for contract violations raised by this package."""


class DomainError(DelayDimError):
    """An argument lies outside the operation's stated domain."""


class ConfigurationError(DelayDimError):
    """Inconsistent discretization setup (off-grid lag, bad step, ...)."""


class DivergenceError(DelayDimError):
    """The integration blew up; carries the first bad time."""

    def __init__(self, message: str, t_bad: float):
        super().__init__(f"{message} (first bad time t={t_bad:.6g})")
        self.t_bad = t_bad


class DegeneratePairError(DelayDimError):
    """Two states that were required to differ are identical."""


class DegenerateFrameError(DelayDimError):
    """A frame that was required to have full rank is (numerically) rank-deficient."""


class BoundaryRootError(DelayDimError):
    """A characteristic root sits on (or too close to) the scan line."""


class ContourResolutionError(DelayDimError):
    """The winding-number quadrature failed to settle near an integer."""


class VolumeUnderflowError(DelayDimError):
    """A frame volume underflowed; re-orthonormalize more often or shorten T."""


@dataclass(frozen=True)
class HistoryGrid:
    """Uniform sampling of the history interval [-tau, 0] with m subintervals."""

    tau: float
    m: int

    def __post_init__(self):
        if not (self.tau > 0.0 and np.isfinite(self.tau)):
            raise ValueError(f"tau must be positive and finite, got {self.tau}")
        if int(self.m) != self.m or self.m < 8:
            raise ValueError(f"m must be an integer >= 8, got {self.m}")
        object.__setattr__(self, "m", int(self.m))
        h = self.tau / self.m
        if abs(h * self.m - self.tau) > 8 * np.finfo(float).eps * self.tau:
            raise ValueError("grid spacing does not reproduce tau to machine precision")

    @property
    def h(self) -> float:
        """Node spacing tau / m."""
        return self.tau / self.m

    @property
    def nodes(self) -> np.ndarray:
        """Sample times theta_i = -tau + i*tau/m, strictly increasing, theta_m = 0."""
        th = -self.tau + np.arange(self.m + 1) * self.h
        th[-1] = 0.0
        th.setflags(write=False)
        return th

    def node_of_lag(self, lag: float) -> int:
        """Map a lag in [-tau, 0] to its grid row, refusing off-grid lags."""
        if lag < -self.tau - 1e-12 * self.tau or lag > 1e-12 * self.tau:
            raise ConfigurationError(f"lag {lag} outside [-tau, 0] with tau={self.tau}")
        q = lag / self.h
        if abs(q - round(q)) > 1e-12 * max(1.0, abs(q)):
            raise ConfigurationError(
                f"lag {lag} is not a grid node (tau={self.tau}, m={self.m}); "
                "refusing to interpolate"
            )
        return int(round(q)) + self.m


def trapezoid_weights(grid: HistoryGrid) -> np.ndarray:
    """Composite trapezoid weights on the grid nodes; all positive, sum == tau."""
    w = np.full(grid.m + 1, grid.h)
    w[0] *= 0.5
    w[-1] *= 0.5
    w.setflags(write=False)
    return w


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class HState:
    """A point of R^n x L2(-tau, 0; R^n): head vector plus sampled segment.

    ``continuous`` marks states embedded from the space of continuous
    histories, where the segment's value at theta=0 equals the head exactly.
    Instances are immutable; arithmetic returns new states.
    """

    head: np.ndarray
    seg: np.ndarray
    continuous: bool = False

    def __post_init__(self):
        head = _readonly(np.atleast_1d(self.head))
        seg = np.array(self.seg, dtype=float, copy=True)
        if seg.ndim == 1:
            seg = seg[:, None]
        if head.ndim != 1 or seg.ndim != 2 or seg.shape[1] != head.shape[0]:
            raise ValueError(f"shape mismatch: head {head.shape}, seg {seg.shape}")
        if not (np.isfinite(head).all() and np.isfinite(seg).all()):
            raise ValueError("state entries must be finite")
        if self.continuous and not np.array_equal(seg[-1], head):
            raise ValueError("continuous-compatible state requires seg[m] == head exactly")
        seg.setflags(write=False)
        object.__setattr__(self, "head", head)
        object.__setattr__(self, "seg", seg)

    @property
    def n(self) -> int:
        return self.head.shape[0]

    @property
    def m(self) -> int:
        return self.seg.shape[0] - 1

    def coords(self) -> np.ndarray:
        """Raw grid coordinates: head entries then segment rows, flattened."""
        return np.concatenate([self.head, self.seg.ravel()])

    @staticmethod
    def from_coords(x: np.ndarray, n: int, continuous: bool = False) -> "HState":
        x = np.asarray(x, dtype=float)
        head = x[:n]
        seg = x[n:].reshape(-1, n)
        return HState(head, seg, continuous=continuous)

    @staticmethod
    def from_function(grid: HistoryGrid, f: Callable[[float], np.ndarray]) -> "HState":
        """Embed a continuous history theta -> f(theta); head is f(0)."""
        seg = np.array([np.atleast_1d(f(th)) for th in grid.nodes], dtype=float)
        return HState(seg[-1], seg, continuous=True)

    @staticmethod
    def constant(grid: HistoryGrid, value) -> "HState":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        seg = np.tile(value, (grid.m + 1, 1))
        return HState(value, seg, continuous=True)

    def __add__(self, other: "HState") -> "HState":
        return HState(self.head + other.head, self.seg + other.seg,
                      continuous=self.continuous and other.continuous)

    def __sub__(self, other: "HState") -> "HState":
        return HState(self.head - other.head, self.seg - other.seg,
                      continuous=self.continuous and other.continuous)

    def __rmul__(self, c: float) -> "HState":
        return HState(c * self.head, c * self.seg, continuous=self.continuous)


@dataclass(frozen=True)
class LinearFunctional:
    """A bounded linear map from segments to R^out.

    ``point_masses`` is a sequence of (lag, matrix) pairs with each matrix of
    shape (out, n); lags must land exactly on grid nodes.  ``kernel`` is an
    optional (m+1, out, n) array applied by trapezoid quadrature.
    """

    point_masses: tuple = ()
    kernel: Optional[np.ndarray] = None

    def __post_init__(self):
        masses = []
        for lag, mat in self.point_masses:
            mat = np.atleast_2d(np.asarray(mat, dtype=float))
            mat.setflags(write=False)
            masses.append((float(lag), mat))
        object.__setattr__(self, "point_masses", tuple(masses))
        if self.kernel is not None:
            k = np.asarray(self.kernel, dtype=float)
            if k.ndim != 3:
                raise ValueError("kernel must have shape (m+1, out, n)")
            k = k.copy()
            k.setflags(write=False)
            object.__setattr__(self, "kernel", k)
        if not self.point_masses and self.kernel is None:
            raise ValueError("functional needs at least one point mass or a kernel")

    @property
    def out_dim(self) -> int:
        if self.point_masses:
            return self.point_masses[0][1].shape[0]
        return self.kernel.shape[1]

    @property
    def in_dim(self) -> int:
        if self.point_masses:
            return self.point_masses[0][1].shape[1]
        return self.kernel.shape[2]

    @staticmethod
    def delta(lag: float, matrix) -> "LinearFunctional":
        """Point evaluation at the given lag composed with a matrix."""
        return LinearFunctional(point_masses=((lag, matrix),))

    def lag_rows(self, grid: HistoryGrid) -> list:
        """Grid rows of every point mass; raises if any lag is off-grid."""
        return [grid.node_of_lag(lag) for lag, _ in self.point_masses]


def h_inner(a: HState, b: HState, grid: HistoryGrid) -> float:
    """Inner product on R^n x L2: head dot product plus segment quadrature."""
    if a.n != b.n or a.seg.shape != b.seg.shape:
        raise ValueError(f"shape mismatch: {a.seg.shape} vs {b.seg.shape}")
    if a.m != grid.m:
        raise ValueError(f"state has m={a.m} but grid has m={grid.m}")
    w = trapezoid_weights(grid)
    return float(a.head @ b.head + np.einsum("i,ij,ij->", w, a.seg, b.seg))


def h_norm(a: HState, grid: HistoryGrid) -> float:
    return float(np.sqrt(max(h_inner(a, a, grid), 0.0)))


def e_norm(a: HState) -> float:
    """Sup norm over the sampled history; only defined for embedded states."""
    if not a.continuous:
        raise DomainError("e_norm requires a continuous-compatible state")
    return float(np.max(np.linalg.norm(a.seg, axis=1)))


def apply_functional(L: LinearFunctional, a: HState, grid: HistoryGrid) -> np.ndarray:
    """Evaluate the functional on the state's segment.

    Point masses read exact grid rows (off-grid lags are refused); the kernel
    part is a trapezoid quadrature against the segment.
    """
    if L.in_dim != a.n:
        raise ValueError(f"functional expects n={L.in_dim}, state has n={a.n}")
    out = np.zeros(L.out_dim)
    for (lag, mat), row in zip(L.point_masses, L.lag_rows(grid)):
        out += mat @ a.seg[row]
    if L.kernel is not None:
        if L.kernel.shape[0] != grid.m + 1:
            raise ValueError("kernel rows do not match the grid")
        w = trapezoid_weights(grid)
        out += np.einsum("i,ioj,ij->o", w, L.kernel, a.seg)
    return out


@dataclass(frozen=True)
class MesReport:
    """Output-energy estimate: lhs = int |Cv|^p dt, rhs = |v(0)|^p + ||v||_{L_p}^p."""

    lhs: float
    rhs: float
    ratio: float


def check_mes(states: Sequence[HState], dt: float, p: int,
              C: LinearFunctional, grid: HistoryGrid) -> MesReport:
    """Measure the integrated output against the initial norm plus path norm.

    ``states`` samples a history-compatible path at uniform spacing ``dt``.
    The caller compares lhs <= M * rhs for the constant M appropriate to C.
    """
    if len(states) == 0:
        raise DomainError("check_mes requires a non-empty trajectory")
    if p not in (1, 2):
        raise DomainError(f"p must be 1 or 2, got {p}")
    cvals = np.array([np.linalg.norm(apply_functional(C, v, grid)) for v in states])
    hvals = np.array([h_norm(v, grid) for v in states])
    lhs = float(np.trapz(cvals ** p, dx=dt))
    rhs = float(hvals[0] ** p + np.trapz(hvals ** p, dx=dt))
    ratio = lhs / rhs if rhs > 0 else 0.0
    return MesReport(lhs=lhs, rhs=rhs, ratio=ratio)


def _finite_diff_jacobian(F, t: float, y: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    f0 = np.atleast_1d(F(t, y))
    J = np.zeros((f0.shape[0], y.shape[0]))
    for j in range(y.shape[0]):
        step = eps * max(1.0, abs(y[j]))
        yp = y.copy()
        yp[j] += step
        ym = y.copy()
        ym[j] -= step
        J[:, j] = (np.atleast_1d(F(t, yp)) - np.atleast_1d(F(t, ym))) / (2 * step)
    return J


@dataclass(frozen=True)
class DelayModel:
    """The data (A, B, F, C, Lambda) of a delay equation x' = A x_t + B F(t, C x_t).

    ``A_tilde`` maps segments to R^n, ``C_tilde`` maps segments to R^r,
    ``B_tilde`` is an n x m_in matrix, and F: R x R^r -> R^{m_in} is globally
    Lipschitz in its second argument with constant ``Lambda``.  ``F`` may be
    None for a purely linear equation.
    """

    n: int
    tau: float
    A_tilde: LinearFunctional
    B_tilde: Optional[np.ndarray] = None
    C_tilde: Optional[LinearFunctional] = None
    F: Optional[Callable] = None
    dF: Optional[Callable] = None
    d2F: Optional[Callable] = None
    Lambda: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.A_tilde.in_dim != self.n or self.A_tilde.out_dim != self.n:
            raise ValueError("A_tilde must map R^n segments to R^n")
        if self.F is not None:
            if self.B_tilde is None or self.C_tilde is None:
                raise ValueError("nonlinear model needs B_tilde and C_tilde")
            B = np.atleast_2d(np.asarray(self.B_tilde, dtype=float))
            B.setflags(write=False)
            object.__setattr__(self, "B_tilde", B)
            if B.shape[0] != self.n:
                raise ValueError("B_tilde must have n rows")
            if self.C_tilde.in_dim != self.n:
                raise ValueError("C_tilde must act on R^n segments")

    @property
    def m_in(self) -> int:
        return 0 if self.B_tilde is None else self.B_tilde.shape[1]

    @property
    def r(self) -> int:
        return 0 if self.C_tilde is None else self.C_tilde.out_dim

    def validate(self, rng: np.random.Generator, n_points: int = 20,
                 y_scale: float = 2.0) -> None:
        """Spot-check dF against F and the Lipschitz bound at random points."""
        if self.F is None:
            return
        for _ in range(n_points):
            t = float(rng.uniform(-1, 1))
            y = rng.uniform(-y_scale, y_scale, size=self.r)
            J = np.atleast_2d(self.dF(t, y))
            J_fd = _finite_diff_jacobian(self.F, t, y)
            scale = max(1.0, float(np.abs(J).max()))
            if np.abs(J - J_fd).max() > 1e-5 * scale:
                raise ValueError("dF disagrees with finite differences of F")
            y2 = rng.uniform(-y_scale, y_scale, size=self.r)
            df = np.linalg.norm(np.atleast_1d(self.F(t, y)) - np.atleast_1d(self.F(t, y2)))
            if df > self.Lambda * np.linalg.norm(y - y2) * (1 + 1e-9) + 1e-12:
                raise ValueError("F violates the stated Lipschitz bound")


def linear_model(A_tilde: LinearFunctional, n: int, tau: float) -> DelayModel:
    """A purely linear delay equation x' = A x_t."""
    return DelayModel(n=n, tau=tau, A_tilde=A_tilde)
