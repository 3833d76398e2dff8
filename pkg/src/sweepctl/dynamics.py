"""Time stepping for the controlled sweeping inclusion.

The simulator realizes the catching-up selection of the discrete inclusion

    x_{j+1} = argmin || y - (x_j + h f(t_j, x_j)) ||   over  psi(g(y), u_{j+1}) in Theta,

so each step is an exact projection onto the moving set at the incoming
control, and the projection multiplier certifies the discrete inclusion.
Residual checks against both the implicit (cone at the new point, next
control) and explicit (cone at the old point, old control) readings live in
:func:`inclusion_residual`.  The module also carries the polyhedral
feasible-companion construction, the W^{1,2} x C path metric used everywhere
in convergence reporting, and a small mesh-refinement study driver.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np

from .geometry import (
    Array,
    ConfigurationError,
    FieldMap,
    GeometryError,
    SmoothInequality,
    ThetaSet,
    TOL_FEAS,
    normal_cone_distance,
    project_onto_moving_set,
    psi_eval,
)


class SimulationError(Exception):
    """A catching-up step failed; carries the failing step index."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


# ---------------------------------------------------------------------------
# Meshes and piecewise-linear paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mesh:
    """Uniform mesh on [0, T] with k subintervals, t_j = j T / k."""

    k: int
    T: float

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigurationError("mesh needs at least one subinterval")
        if not self.T > 0:
            raise ConfigurationError("horizon must be positive")

    @property
    def h(self) -> float:
        return self.T / self.k

    @property
    def nodes(self) -> Array:
        return np.linspace(0.0, self.T, self.k + 1)


@dataclass(frozen=True)
class Path:
    """Piecewise-linear path: one vector value per mesh node."""

    mesh: Mesh
    values: Array

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, np.newaxis]
        if v.shape[0] != self.mesh.k + 1:
            raise ConfigurationError(
                f"expected {self.mesh.k + 1} node values, got {v.shape[0]}")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def at(self, t: float | Array) -> Array:
        """Linear interpolation; arguments are clipped to [0, T]."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.mesh.T)
        nodes = self.mesh.nodes
        cols = [np.interp(t, nodes, self.values[:, i]) for i in range(self.dim)]
        return np.stack(cols, axis=-1)

    def diff_quotients(self) -> Array:
        """Constant derivative on each (t_j, t_{j+1}), shape (k, dim)."""
        return np.diff(self.values, axis=0) / self.mesh.h

    @staticmethod
    def sample(mesh: Mesh, fn: Callable[[float], Array | float]) -> "Path":
        vals = np.array([np.atleast_1d(np.asarray(fn(t), dtype=float))
                         for t in mesh.nodes])
        return Path(mesh=mesh, values=vals)


# ---------------------------------------------------------------------------
# The controlled system
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepingSystem:
    """Drift + moving-set data for x' in f(t,x) - N(g(x); C(t,u)).

    ``g`` is either None (identity) or a square matrix; nonlinear state maps
    are rejected because only the linear case comes with approximation
    guarantees.  ``L_f`` and ``L_g`` are Lipschitz metadata, not used by the
    stepper itself.
    """

    f: Callable[[float, Array], Array]
    field: FieldMap
    theta: ThetaSet
    x0: Array
    T: float
    L_f: float = 0.0
    g: Array | None = None
    L_g: float = 1.0

    def __post_init__(self) -> None:
        if self.L_f < 0 or self.L_g < 0:
            raise ConfigurationError("Lipschitz constants must be nonnegative")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x0", x0)
        if self.g is not None:
            G = np.atleast_2d(np.asarray(self.g, dtype=float))
            if G.shape[0] != G.shape[1]:
                raise ConfigurationError("state map must be a square matrix")
            if G.shape[0] != self.field.n:
                raise ConfigurationError("state map size must match the field")
            object.__setattr__(self, "g", G)
        if x0.shape != (self._state_dim(),):
            raise ConfigurationError("x0 dimension mismatch")

    def _state_dim(self) -> int:
        return self.field.n

    def effective_field(self) -> FieldMap:
        """The field composed with the linear state map (identity: unchanged)."""
        if self.g is None:
            return self.field
        G = self.g
        base = self.field
        return FieldMap(
            n=base.n, m=base.m, s=base.s,
            psi=lambda x, u: base.psi(G @ x, u),
            dpsi_dx=lambda x, u: np.atleast_2d(base.dpsi_dx(G @ x, u)) @ G,
            dpsi_du=lambda x, u: base.dpsi_du(G @ x, u),
            hess_xx=(None if base.hess_xx is None else
                     lambda x, u, p: G.T @ base.hess_xx(G @ x, u, p) @ G),
            hess_ux=(None if base.hess_ux is None else
                     lambda x, u, p: base.hess_ux(G @ x, u, p) @ G),
            x_affine=(None if base.x_affine is None else
                      lambda u: (base.x_affine(u)[0] @ G, base.x_affine(u)[1])),
        )


def feasibility_violation(theta: ThetaSet, z: Array) -> float:
    """Max constraint violation of z against Theta (0 when inside)."""
    hs = theta.halfspaces()
    if hs is not None:
        H, d = hs
        if H.shape[0] == 0:
            return 0.0
        return float(max(0.0, np.max(H @ z - d)))
    if isinstance(theta, SmoothInequality):
        h = np.atleast_1d(np.asarray(theta.h(z), dtype=float))
        return float(max(0.0, np.max(h)))
    raise ConfigurationError("unknown Theta variant")


@dataclass(frozen=True)
class StepRecord:
    """Diagnostics for one accepted catching-up step."""

    eta: Array
    projection_residual: float
    feasibility: float
    active_indices: tuple[int, ...] = ()


def step_catching_up(system: SweepingSystem, x_j: Array, u_next: Array,
                     t_j: float, h: float,
                     warm_start: Array | None = None,
                     ) -> tuple[Array, StepRecord]:
    """One catching-up step: drift by h f, then project onto C(u_next).

    The returned multiplier satisfies
    x_j + h f(t_j, x_j) - x_{j+1} = grad_x psi(x_{j+1}, u_next)^T eta
    with eta in N_Theta, so eta / h is the discrete inclusion multiplier.
    """
    x_j = np.atleast_1d(np.asarray(x_j, dtype=float))
    u_next = np.atleast_1d(np.asarray(u_next, dtype=float))
    drifted = x_j + h * np.atleast_1d(np.asarray(system.f(t_j, x_j), dtype=float))
    eff = system.effective_field()
    y, dec = project_onto_moving_set(
        eff, system.theta, u_next, drifted,
        warm_start=x_j if warm_start is None else warm_start)
    z = psi_eval(eff, y, u_next)
    record = StepRecord(
        eta=dec.eta,
        projection_residual=dec.residual,
        feasibility=feasibility_violation(system.theta, z),
        active_indices=dec.active_indices,
    )
    return y, record


def simulate(system: SweepingSystem, control: Path,
             ) -> tuple[Path, list[StepRecord]]:
    """Run catching-up along the control path's mesh.

    The initial state must lie in the moving set at the initial control;
    a failing step aborts with that step's index.
    """
    mesh = control.mesh
    if abs(mesh.T - system.T) > 1e-12:
        raise ConfigurationError("control horizon differs from the system horizon")
    eff = system.effective_field()
    z0 = psi_eval(eff, system.x0, control.values[0])
    if not system.theta.contains(z0, tol=TOL_FEAS):
        raise SimulationError(0, f"initial state infeasible: psi(x0,u0)={z0}")
    h = mesh.h
    xs = np.zeros((mesh.k + 1, system.field.n))
    xs[0] = system.x0
    records: list[StepRecord] = []
    for j in range(mesh.k):
        try:
            xs[j + 1], rec = step_catching_up(
                system, xs[j], control.values[j + 1], float(mesh.nodes[j]), h)
        except GeometryError as e:
            raise SimulationError(j, str(e)) from e
        records.append(rec)
    return Path(mesh=mesh, values=xs), records


def inclusion_residual(system: SweepingSystem, state: Path, control: Path,
                       convention: str = "implicit") -> Array:
    """Per-step distance of -(x_{j+1}-x_j)/h + f(t_j,x_j) to the cone.

    ``implicit`` evaluates the cone at (x_{j+1}, u_{j+1}), which the
    simulator satisfies by construction; ``explicit`` evaluates it at
    (x_j, u_j), the form the discrete transcription uses.  Infeasible points
    make the cone empty, so those steps report +inf.
    """
    if state.mesh != control.mesh:
        raise ConfigurationError("paths must share a mesh")
    if convention not in ("implicit", "explicit"):
        raise ConfigurationError(f"unknown convention {convention!r}")
    mesh = state.mesh
    h = mesh.h
    eff = system.effective_field()
    out = np.zeros(mesh.k)
    for j in range(mesh.k):
        x_j = state.values[j]
        v = -(state.values[j + 1] - x_j) / h + np.atleast_1d(
            np.asarray(system.f(float(mesh.nodes[j]), x_j), dtype=float))
        if convention == "implicit":
            pt, ctrl = state.values[j + 1], control.values[j + 1]
        else:
            pt, ctrl = x_j, control.values[j]
        out[j] = normal_cone_distance(eff, system.theta, pt, ctrl, v)
    return out


def feasible_companion_polyhedral(state: Path, reference_state: Path,
                                  rows: Array, reference_b: Path) -> Path:
    """Offset shift keeping psi values along ``state`` equal to the reference.

    For the moving-rows field psi_i = <x, u_i> - b_i with the rows held at
    their reference values, b_j := b_ref(t_j) + rows (x_j - x_ref(t_j)) gives
    psi(x_j, (rows, b_j)) = psi(x_ref(t_j), (rows, b_ref(t_j))), so active
    sets are preserved and the discrete states become feasible.
    """
    if state.mesh != reference_state.mesh or state.mesh != reference_b.mesh:
        raise ConfigurationError("paths must share a mesh")
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    shift = (state.values - reference_state.values) @ rows.T
    return Path(mesh=reference_b.mesh, values=reference_b.values + shift)


# ---------------------------------------------------------------------------
# Path metrics and refinement studies
# ---------------------------------------------------------------------------


def _union_times(a: Path, b: Path) -> Array:
    if abs(a.mesh.T - b.mesh.T) > 1e-12:
        raise ConfigurationError("paths live on different horizons")
    t = np.union1d(a.mesh.nodes, b.mesh.nodes)
    return t


def w12_distance(a: Path, b: Path) -> tuple[float, float]:
    """(W^{1,2} distance, sup node distance) between piecewise-linear paths.

    w12^2 = ||a(0)-b(0)||^2 + sum_j dt_j ||(da_j - db_j)/dt_j||^2.  Paths on
    different meshes are resampled onto the union of their node sets, which
    is exact for piecewise-linear data.
    """
    if a.dim != b.dim:
        raise ConfigurationError("paths have different value dimensions")
    if a.mesh == b.mesh:
        t = a.mesh.nodes
        va, vb = a.values, b.values
    else:
        t = _union_times(a, b)
        va, vb = a.at(t), b.at(t)
    diff = va - vb
    dt = np.diff(t)
    quot = np.diff(diff, axis=0) / dt[:, np.newaxis]
    w12_sq = float(diff[0] @ diff[0]) + float(np.sum(dt * np.sum(quot ** 2, axis=1)))
    sup = float(np.max(np.linalg.norm(diff, axis=1)))
    return float(np.sqrt(w12_sq)), sup


@dataclass(frozen=True)
class ConvergenceRow:
    k: int
    state_error_w12: float
    control_error_sup: float


@dataclass(frozen=True)
class ConvergenceTable:
    rows: tuple[ConvergenceRow, ...]
    monotone: bool
    tie_floor: float


def convergence_study(system: SweepingSystem,
                      control_family: Callable[[int], Path],
                      reference: tuple[Path, Path],
                      ks: Sequence[int],
                      tie_floor: float = 1e-12) -> ConvergenceTable:
    """Simulate per mesh size and tabulate errors against a reference pair.

    ``monotone`` asks for strictly decreasing state errors from one k to the
    next; once both errors sit at or below ``tie_floor`` (they can be exactly
    zero when the reference is piecewise linear on the refined mesh), ties
    are allowed.
    """
    ks = list(ks)
    if any(k2 <= k1 for k1, k2 in zip(ks, ks[1:])):
        raise ConfigurationError("mesh list must be increasing")
    ref_state, ref_control = reference
    rows: list[ConvergenceRow] = []
    for k in ks:
        control = control_family(k)
        if control.mesh.k != k:
            raise ConfigurationError("control_family returned a wrong mesh")
        state, _ = simulate(system, control)
        w12, _ = w12_distance(state, ref_state)
        _, sup_u = w12_distance(control, ref_control)
        rows.append(ConvergenceRow(k=k, state_error_w12=w12, control_error_sup=sup_u))
    monotone = True
    for r1, r2 in zip(rows, rows[1:]):
        if r2.state_error_w12 < r1.state_error_w12:
            continue
        if r1.state_error_w12 <= tie_floor and r2.state_error_w12 <= tie_floor:
            continue
        monotone = False
    return ConvergenceTable(rows=tuple(rows), monotone=monotone, tie_floor=tie_floor)
