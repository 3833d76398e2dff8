"""Discrete optimal control over sweeping dynamics.

Two problem templates are implemented behind one interface.  In W12xW12 mode
the discrete cost is

    J = phi(x_k) + h sum_j ell(t_j, x_j, u_j, dx_j/h, du_j/h)
        + rho * h sum_j int (||dx_j/h - xref'||^2 + ||du_j/h - uref'||^2) dt

and in W12xC mode the running cost drops the control derivative while the
anchor terms become sum_j ||u_j - uref(t_j)||^2 + sum_j int ||dx_j/h - xref'||^2 dt
(the control sum runs over all k+1 nodes and carries no h factor).  The
anchor pair is optional; rho defaults to 0 which gives the plain Bolza
discretization.

``transcribe`` turns the problem into a complementarity program in the
decision variables (x, u, eta): explicit dynamics equalities

    x_{j+1} = x_j + h f(t_j, x_j) - h grad_x psi(x_j, u_j)^T eta_j,

per-step cone conditions eta_j in N_Theta(psi(x_j, u_j)) written as
complementarity pairs, and the endpoint constraint psi(x_k, u_k) in Theta.
``solve_smoothed`` replaces every pair (a, b) by the Fischer-Burmeister
residual a + b - sqrt(a^2 + b^2 + sigma^2) and drives the full KKT system to
stationarity with a damped Newton iteration while sigma is pushed down the
continuation schedule.  ``solve_shooting`` instead optimizes the control
nodes directly over the catching-up simulator with finite-difference
gradients and an Armijo line search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .dynamics import Mesh, Path, SimulationError, SweepingSystem, simulate
from .geometry import (
    Array,
    Box,
    ConfigurationError,
    LinearImagePolyhedron,
    NonpositiveOrthant,
    NumericalFailureError,
    ThetaSet,
    psi_eval,
)

#: Weight of the terminal-control tie-break regularizer in W12xC mode, where
#: u_k otherwise enters nothing but the endpoint constraint.  Small enough to
#: leave every reported cost untouched at the pass tolerances, large enough
#: that the tied direction does not degrade the Newton conditioning.
UK_TIE_WEIGHT = 1e-4


class InfeasibleWarmStartError(Exception):
    """The warm start violates a transcription precondition."""


@dataclass(frozen=True)
class OcpProblem:
    """Bolza problem over a sweeping system.

    ``ell``/``dell`` take (t, x, u, xdot) in W12xC mode and
    (t, x, u, xdot, udot) in W12xW12 mode; ``dell`` returns the partial
    gradients in the same order.  ``anchor`` is an optional (state, control)
    Path pair; ``rho`` scales the proximity terms and ``epsilon`` is the
    localization radius (infinity disables the tube check).
    """

    system: SweepingSystem
    phi: Callable[[Array], float]
    dphi: Callable[[Array], Array]
    ell: Callable[..., float]
    dell: Callable[..., tuple]
    mode: str
    u0: Array
    anchor: tuple[Path, Path] | None = None
    rho: float = 0.0
    epsilon: float = float("inf")

    def __post_init__(self) -> None:
        if self.mode not in ("W12xW12", "W12xC"):
            raise ConfigurationError(f"unknown minimizer mode {self.mode!r}")
        u0 = np.atleast_1d(np.asarray(self.u0, dtype=float))
        if u0.shape != (self.system.field.m,):
            raise ConfigurationError("u0 dimension mismatch")
        object.__setattr__(self, "u0", u0)
        if self.rho < 0:
            raise ConfigurationError("rho must be nonnegative")
        if self.rho > 0 and self.anchor is None:
            raise ConfigurationError("rho > 0 requires an anchor pair")

    @property
    def uses_udot(self) -> bool:
        return self.mode == "W12xW12"


@dataclass(frozen=True)
class DiscreteDecision:
    """Node values of one discrete trajectory: states, controls, multipliers."""

    mesh: Mesh
    x: Array
    u: Array
    eta: Array

    def __post_init__(self) -> None:
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        u = np.atleast_2d(np.asarray(self.u, dtype=float))
        eta = np.atleast_2d(np.asarray(self.eta, dtype=float))
        k = self.mesh.k
        if x.shape[0] != k + 1 or u.shape[0] != k + 1 or eta.shape[0] != k:
            raise ConfigurationError("decision node counts do not match the mesh")
        for name, arr in (("x", x), ("u", u), ("eta", eta)):
            object.__setattr__(self, name, arr)

    def state_path(self) -> Path:
        return Path(mesh=self.mesh, values=self.x)

    def control_path(self) -> Path:
        return Path(mesh=self.mesh, values=self.u)


@dataclass(frozen=True)
class SolveReport:
    cost: float
    comp_residual: float
    stat_residual: float
    iterations: int
    sigma_trace: tuple[float, ...]
    cost_trace: tuple[float, ...]


# ---------------------------------------------------------------------------
# Cost evaluation
# ---------------------------------------------------------------------------


def _segment_sq_integral(t0: float, t1: float, v: Array, ref: Path) -> float:
    """Exact integral of ||v - ref'(t)||^2 over [t0, t1] for PL ``ref``."""
    nodes = ref.mesh.nodes
    cuts = nodes[(nodes > t0 + 1e-15) & (nodes < t1 - 1e-15)]
    ts = np.concatenate([[t0], cuts, [t1]])
    slopes = ref.diff_quotients()
    total = 0.0
    for a, b in zip(ts[:-1], ts[1:]):
        midpoint = 0.5 * (a + b)
        cell = min(int(midpoint / ref.mesh.h), ref.mesh.k - 1)
        d = v - slopes[cell]
        total += (b - a) * float(d @ d)
    return total


def _anchor_cost(problem: OcpProblem, z: DiscreteDecision) -> float:
    if problem.rho == 0.0 or problem.anchor is None:
        return 0.0
    xref, uref = problem.anchor
    mesh = z.mesh
    h = mesh.h
    vx = np.diff(z.x, axis=0) / h
    total = 0.0
    if problem.mode == "W12xW12":
        vu = np.diff(z.u, axis=0) / h
        for j in range(mesh.k):
            t0, t1 = mesh.nodes[j], mesh.nodes[j + 1]
            total += _segment_sq_integral(t0, t1, vx[j], xref)
            total += _segment_sq_integral(t0, t1, vu[j], uref)
        return problem.rho * h * total
    # W12xC: unscaled control-node proximity plus the state derivative tube.
    for j in range(mesh.k + 1):
        d = z.u[j] - uref.at(mesh.nodes[j])
        total += float(d @ d)
    for j in range(mesh.k):
        total += _segment_sq_integral(mesh.nodes[j], mesh.nodes[j + 1], vx[j], xref)
    return problem.rho * total


def cost_eval(problem: OcpProblem, z: DiscreteDecision) -> float:
    """Discrete cost of a decision under the problem's template."""
    mesh = z.mesh
    h = mesh.h
    total = float(problem.phi(z.x[-1]))
    vx = np.diff(z.x, axis=0) / h
    vu = np.diff(z.u, axis=0) / h
    for j in range(mesh.k):
        t = float(mesh.nodes[j])
        if problem.uses_udot:
            total += h * float(problem.ell(t, z.x[j], z.u[j], vx[j], vu[j]))
        else:
            total += h * float(problem.ell(t, z.x[j], z.u[j], vx[j]))
    return total + _anchor_cost(problem, z)


def localization_violation(problem: OcpProblem, z: DiscreteDecision) -> float:
    """How far the decision leaves the epsilon/2 tube around the anchor."""
    if problem.anchor is None or not np.isfinite(problem.epsilon):
        return 0.0
    xref, uref = problem.anchor
    worst = 0.0
    for j, t in enumerate(z.mesh.nodes):
        d = np.concatenate([z.x[j] - xref.at(t), z.u[j] - uref.at(t)])
        worst = max(worst, float(np.linalg.norm(d)) - problem.epsilon / 2.0)
    return max(0.0, worst)


# ---------------------------------------------------------------------------
# Transcription
# ---------------------------------------------------------------------------


def _theta_bounds(theta: ThetaSet) -> tuple[Array, Array]:
    """Represent Theta as componentwise bounds lo <= z <= hi (box-like only)."""
    if isinstance(theta, NonpositiveOrthant):
        return np.full(theta.s, -np.inf), np.zeros(theta.s)
    if isinstance(theta, Box):
        return np.array(theta.lower, dtype=float), np.array(theta.upper, dtype=float)
    if isinstance(theta, LinearImagePolyhedron):
        A = np.array(theta.A, dtype=float)
        if not np.allclose(A, np.diag(np.diag(A)), atol=1e-12):
            raise ConfigurationError(
                "transcription needs a diagonal scaling for image sets")
        G = np.array(theta.G, dtype=float)
        g = np.asarray(theta.g, dtype=float)
        s = theta.s
        lo = np.full(s, -np.inf)
        hi = np.full(s, np.inf)
        for row, rhs in zip(G, g):
            nz = np.nonzero(row)[0]
            if len(nz) != 1:
                raise ConfigurationError(
                    "transcription needs axis-aligned halfspaces for image sets")
            i = nz[0]
            if row[i] > 0:
                hi[i] = min(hi[i], rhs / row[i])
            else:
                lo[i] = max(lo[i], rhs / row[i])
        d = np.diag(A)
        return lo * d, hi * d
    raise ConfigurationError(
        "complementarity transcription supports orthant/box-like Theta only")


def _fb(a: Array, b: Array, sigma: float) -> Array:
    return a + b - np.sqrt(a * a + b * b + sigma * sigma)


def _fb_partials(a: Array, b: Array, sigma: float) -> tuple[Array, Array]:
    r = np.sqrt(a * a + b * b + sigma * sigma)
    return 1.0 - a / r, 1.0 - b / r


def _fb_second(a: Array, b: Array, sigma: float) -> tuple[Array, Array, Array]:
    """(d2/daa, d2/dab, d2/dbb) of the smoothed residual."""
    r = np.sqrt(a * a + b * b + sigma * sigma)
    r3 = r ** 3
    return -(b * b + sigma * sigma) / r3, a * b / r3, -(a * a + sigma * sigma) / r3


class Transcription:
    """Complementarity program for one problem on one mesh.

    Decision variables are the state and control nodes plus one nonnegative
    multiplier per finite Theta bound per step; the endpoint constraint adds
    a terminal multiplier pair.  ``solve_smoothed`` owns the KKT unknowns
    (adjoints included); this object carries the structure.
    """

    def __init__(self, problem: OcpProblem, k: int):
        self.problem = problem
        self.mesh = Mesh(k=k, T=problem.system.T)
        self.field = problem.system.effective_field()
        lo, hi = _theta_bounds(problem.system.theta)
        self.lo, self.hi = lo, hi
        self.ups = tuple(int(i) for i in np.where(np.isfinite(hi))[0])
        self.los = tuple(int(i) for i in np.where(np.isfinite(lo))[0])
        n, m = self.field.n, self.field.m
        k = self.mesh.k
        su, sl = len(self.ups), len(self.los)
        self.counts = {
            "variables": (k + 1) * n + (k + 1) * m + k * (su + sl),
            "dynamic_equalities": k * n,
            "complementarity_rows": k * (su + sl),
            "endpoint_rows": su + sl,
        }

    # -- complementarity inspection ----------------------------------------

    def pair_values(self, z: DiscreteDecision) -> list[tuple[float, float]]:
        """All (multiplier, slack) pairs at a decision (terminal pair omitted:
        the terminal multiplier is not part of the decision data)."""
        out: list[tuple[float, float]] = []
        for j in range(self.mesh.k):
            psi = psi_eval(self.field, z.x[j], z.u[j])
            for i in self.ups:
                out.append((float(max(z.eta[j, i], 0.0)), float(self.hi[i] - psi[i])))
            for i in self.los:
                out.append((float(max(-z.eta[j, i], 0.0)), float(psi[i] - self.lo[i])))
        return out

    def dynamics_residual(self, z: DiscreteDecision) -> float:
        h = self.mesh.h
        worst = 0.0
        for j in range(self.mesh.k):
            f = np.atleast_1d(np.asarray(
                self.problem.system.f(float(self.mesh.nodes[j]), z.x[j]), dtype=float))
            Jx = np.atleast_2d(self.field.dpsi_dx(z.x[j], z.u[j]))
            r = z.x[j + 1] - z.x[j] - h * f + h * Jx.T @ z.eta[j]
            worst = max(worst, float(np.max(np.abs(r))))
        return worst

    def initial_decision(self) -> DiscreteDecision:
        """Warm start: hold the anchor control (or u0) and simulate."""
        if self.problem.anchor is not None:
            nodes = self.problem.anchor[1].at(self.mesh.nodes)
            nodes[0] = self.problem.u0
        else:
            nodes = np.tile(self.problem.u0, (self.mesh.k + 1, 1))
        control = Path(mesh=self.mesh, values=nodes)
        state, records = simulate(self.problem.system, control)
        eta = np.array([r.eta for r in records]) / self.mesh.h
        return DiscreteDecision(mesh=self.mesh, x=state.values, u=control.values,
                                eta=eta)


def transcribe(problem: OcpProblem, k: int) -> Transcription:
    """Build the complementarity transcription on a k-interval mesh."""
    return Transcription(problem, k)


# ---------------------------------------------------------------------------
# Smoothed KKT Newton solver
# ---------------------------------------------------------------------------


class _KktSystem:
    """Layout and evaluation of the smoothed KKT residual and its Jacobian.

    Unknowns, in order: x_1..x_k, u_1..u_k, etap_0..etap_{k-1},
    etam_0..etam_{k-1}, p_1..p_k, gammap, gammam, thetap, thetam.
    """

    def __init__(self, tr: Transcription):
        self.tr = tr
        self.problem = tr.problem
        self.field = tr.field
        self.mesh = tr.mesh
        self.n = tr.field.n
        self.m = tr.field.m
        self.s = tr.field.s
        self.su = len(tr.ups)
        self.sl = len(tr.los)
        k, n, m, su, sl = self.mesh.k, self.n, self.m, self.su, self.sl
        sizes = [k * n, k * m, k * su, k * sl, k * n, k * su, k * sl, su, sl]
        names = ["x", "u", "ep", "em", "p", "gp", "gm", "tp", "tm"]
        self.off = {}
        start = 0
        for name, size in zip(names, sizes):
            self.off[name] = start
            start += size
        self.N = start
        self.hi_up = tr.hi[list(tr.ups)]
        self.lo_lo = tr.lo[list(tr.los)]

    # -- packing ------------------------------------------------------------

    def sl_x(self, j):  # state node j (1..k)
        o = self.off["x"] + (j - 1) * self.n
        return slice(o, o + self.n)

    def sl_u(self, j):
        o = self.off["u"] + (j - 1) * self.m
        return slice(o, o + self.m)

    def sl_ep(self, j):  # step j (0..k-1)
        o = self.off["ep"] + j * self.su
        return slice(o, o + self.su)

    def sl_em(self, j):
        o = self.off["em"] + j * self.sl
        return slice(o, o + self.sl)

    def sl_p(self, j):  # adjoint p_j (1..k)
        o = self.off["p"] + (j - 1) * self.n
        return slice(o, o + self.n)

    def sl_gp(self, j):
        o = self.off["gp"] + j * self.su
        return slice(o, o + self.su)

    def sl_gm(self, j):
        o = self.off["gm"] + j * self.sl
        return slice(o, o + self.sl)

    def sl_tp(self):
        return slice(self.off["tp"], self.off["tp"] + self.su)

    def sl_tm(self):
        return slice(self.off["tm"], self.off["tm"] + self.sl)

    def pack_primal(self, z: DiscreteDecision) -> Array:
        X = np.zeros(self.N)
        for j in range(1, self.mesh.k + 1):
            X[self.sl_x(j)] = z.x[j]
            X[self.sl_u(j)] = z.u[j]
        for j in range(self.mesh.k):
            X[self.sl_ep(j)] = np.maximum(z.eta[j, list(self.tr.ups)], 0.0)
            X[self.sl_em(j)] = np.maximum(-z.eta[j, list(self.tr.los)], 0.0)
        return X

    def unpack(self, X: Array) -> DiscreteDecision:
        k = self.mesh.k
        x = np.zeros((k + 1, self.n))
        u = np.zeros((k + 1, self.m))
        x[0] = self.problem.system.x0
        u[0] = self.problem.u0
        for j in range(1, k + 1):
            x[j] = X[self.sl_x(j)]
            u[j] = X[self.sl_u(j)]
        eta = np.zeros((k, self.s))
        for j in range(k):
            for idx, i in enumerate(self.tr.ups):
                eta[j, i] += X[self.sl_ep(j)][idx]
            for idx, i in enumerate(self.tr.los):
                eta[j, i] -= X[self.sl_em(j)][idx]
        return DiscreteDecision(mesh=self.mesh, x=x, u=u, eta=eta)

    # -- nodes and per-step data ---------------------------------------------

    def nodes(self, X: Array) -> tuple[Array, Array]:
        k = self.mesh.k
        x = np.zeros((k + 1, self.n))
        u = np.zeros((k + 1, self.m))
        x[0] = self.problem.system.x0
        u[0] = self.problem.u0
        for j in range(1, k + 1):
            x[j] = X[self.sl_x(j)]
            u[j] = X[self.sl_u(j)]
        return x, u

    def eta_net(self, X: Array, j: int) -> Array:
        eta = np.zeros(self.s)
        for idx, i in enumerate(self.tr.ups):
            eta[i] += X[self.sl_ep(j)][idx]
        for idx, i in enumerate(self.tr.los):
            eta[i] -= X[self.sl_em(j)][idx]
        return eta

    # -- cost derivatives -----------------------------------------------------

    def _raw_dim(self) -> int:
        return 2 * self.n + self.m + (self.m if self.problem.uses_udot else 0)

    def _ell_grad(self, t: float, x: Array, u: Array, vx: Array,
                  vu: Array | None) -> Array:
        if self.problem.uses_udot:
            parts = self.problem.dell(t, x, u, vx, vu)
        else:
            parts = self.problem.dell(t, x, u, vx)
        return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float))
                               for p in parts])

    def _ell_grad_raw(self, t: float, raw: Array) -> Array:
        n, m = self.n, self.m
        x = raw[:n]
        u = raw[n:n + m]
        vx = raw[n + m:2 * n + m]
        vu = raw[2 * n + m:] if self.problem.uses_udot else None
        return self._ell_grad(t, x, u, vx, vu)

    def cost_gradient_hessian(self, x: Array, u: Array, want_hess: bool = True,
                              ) -> tuple[Array, Array, Array | None]:
        """Node gradient (gx, gu) and dense Hessian over [x nodes | u nodes].

        The running-cost Hessian comes from central differences of the
        user-provided gradient, step by step; anchor terms are quadratic and
        assembled analytically.  ``want_hess=False`` skips the differencing.
        """
        k, n, m = self.mesh.k, self.n, self.m
        h = self.mesh.h
        gx = np.zeros((k + 1, n))
        gu = np.zeros((k + 1, m))
        ny = (k + 1) * (n + m)
        H = np.zeros((ny, ny)) if want_hess else None

        def xi(j):
            return slice(j * n, (j + 1) * n)

        def ui(j):
            o = (k + 1) * n
            return slice(o + j * m, o + (j + 1) * m)

        q = self._raw_dim()
        # Map raw (x, u, vx[, vu]) to the node quadruple (x_j, u_j, x_j1, u_j1).
        M = np.zeros((q, 2 * (n + m)))
        M[:n, :n] = np.eye(n)
        M[n:n + m, n:n + m] = np.eye(m)
        M[n + m:2 * n + m, :n] = -np.eye(n) / h
        M[n + m:2 * n + m, n + m:2 * n + m] = np.eye(n) / h
        if self.problem.uses_udot:
            M[2 * n + m:, n:n + m] = -np.eye(m) / h
            M[2 * n + m:, 2 * n + m:] = np.eye(m) / h

        vxs = np.diff(x, axis=0) / h
        vus = np.diff(u, axis=0) / h
        for j in range(k):
            t = float(self.mesh.nodes[j])
            raw = [x[j], u[j], vxs[j]]
            if self.problem.uses_udot:
                raw.append(vus[j])
            raw = np.concatenate(raw)
            g = self._ell_grad_raw(t, raw)
            gn = h * (M.T @ g)
            gx[j] += gn[:n]
            gu[j] += gn[n:n + m]
            gx[j + 1] += gn[n + m:2 * n + m]
            gu[j + 1] += gn[2 * n + m:]
            if want_hess:
                Hraw = np.zeros((q, q))
                for a in range(q):
                    step = 1e-6 * (1.0 + abs(raw[a]))
                    rp = raw.copy()
                    rp[a] += step
                    rm = raw.copy()
                    rm[a] -= step
                    Hraw[:, a] = (self._ell_grad_raw(t, rp)
                                  - self._ell_grad_raw(t, rm)) / (2 * step)
                Hraw = 0.5 * (Hraw + Hraw.T)
                Hn = h * (M.T @ Hraw @ M)
                idx = np.concatenate([np.arange(xi(j).start, xi(j).stop),
                                      np.arange(ui(j).start, ui(j).stop),
                                      np.arange(xi(j + 1).start, xi(j + 1).stop),
                                      np.arange(ui(j + 1).start, ui(j + 1).stop)])
                H[np.ix_(idx, idx)] += Hn

        # Terminal cost.
        gphi = np.atleast_1d(np.asarray(self.problem.dphi(x[k]), dtype=float))
        gx[k] += gphi
        if want_hess:
            Hphi = np.zeros((n, n))
            for a in range(n):
                step = 1e-6 * (1.0 + abs(x[k][a]))
                xp = x[k].copy()
                xp[a] += step
                xm = x[k].copy()
                xm[a] -= step
                Hphi[:, a] = (np.atleast_1d(self.problem.dphi(xp))
                              - np.atleast_1d(self.problem.dphi(xm))) / (2 * step)
            H[np.ix_(range(xi(k).start, xi(k).stop),
                     range(xi(k).start, xi(k).stop))] += 0.5 * (Hphi + Hphi.T)

        # Anchor proximity terms (exact quadratics).
        if self.problem.rho > 0 and self.problem.anchor is not None:
            rho = self.problem.rho
            xref, uref = self.problem.anchor
            dxr = np.array([xref.at(self.mesh.nodes[j + 1]) - xref.at(self.mesh.nodes[j])
                            for j in range(k)])
            if self.problem.mode == "W12xW12":
                dur = np.array([uref.at(self.mesh.nodes[j + 1]) - uref.at(self.mesh.nodes[j])
                                for j in range(k)])
                for j in range(k):
                    rx = 2 * rho * (x[j + 1] - x[j] - dxr[j])
                    gx[j] -= rx
                    gx[j + 1] += rx
                    ru = 2 * rho * (u[j + 1] - u[j] - dur[j])
                    gu[j] -= ru
                    gu[j + 1] += ru
                    if not want_hess:
                        continue
                    for sla, slb, d in ((xi(j), xi(j + 1), n), (ui(j), ui(j + 1), m)):
                        B = 2 * rho * np.eye(d)
                        ia = np.arange(sla.start, sla.stop)
                        ib = np.arange(slb.start, slb.stop)
                        H[np.ix_(ia, ia)] += B
                        H[np.ix_(ib, ib)] += B
                        H[np.ix_(ia, ib)] -= B
                        H[np.ix_(ib, ia)] -= B
            else:
                for j in range(k + 1):
                    gu[j] += 2 * rho * (u[j] - uref.at(self.mesh.nodes[j]))
                    if want_hess:
                        iu = np.arange(ui(j).start, ui(j).stop)
                        H[np.ix_(iu, iu)] += 2 * rho * np.eye(m)
                for j in range(k):
                    rx = (2 * rho / h) * (x[j + 1] - x[j] - dxr[j])
                    gx[j] -= rx
                    gx[j + 1] += rx
                    if not want_hess:
                        continue
                    B = (2 * rho / h) * np.eye(n)
                    ia = np.arange(xi(j).start, xi(j).stop)
                    ib = np.arange(xi(j + 1).start, xi(j + 1).stop)
                    H[np.ix_(ia, ia)] += B
                    H[np.ix_(ib, ib)] += B
                    H[np.ix_(ia, ib)] -= B
                    H[np.ix_(ib, ia)] -= B

        # Terminal-control tie-break (W12xC): without it u_k only enters the
        # endpoint constraint and the KKT matrix goes singular along u_k.
        if not self.problem.uses_udot:
            w = UK_TIE_WEIGHT
            r = 2 * w * (u[k] - u[k - 1])
            gu[k] += r
            gu[k - 1] -= r
            if want_hess:
                ia = np.arange(ui(k - 1).start, ui(k - 1).stop)
                ib = np.arange(ui(k).start, ui(k).stop)
                B = 2 * w * np.eye(m)
                H[np.ix_(ia, ia)] += B
                H[np.ix_(ib, ib)] += B
                H[np.ix_(ia, ib)] -= B
                H[np.ix_(ib, ia)] -= B
        return gx, gu, H

    # -- field helpers --------------------------------------------------------

    def _hess_xx(self, x, u, p):
        if self.field.hess_xx is None:
            return np.zeros((self.n, self.n))
        return np.atleast_2d(np.asarray(self.field.hess_xx(x, u, p), dtype=float))

    def _hess_ux(self, x, u, p):
        if self.field.hess_ux is None:
            return np.zeros((self.m, self.n))
        return np.atleast_2d(np.asarray(self.field.hess_ux(x, u, p), dtype=float))

    def _df_dx(self, t, x):
        f0 = np.atleast_1d(np.asarray(self.problem.system.f(t, x), dtype=float))
        J = np.zeros((self.n, self.n))
        for a in range(self.n):
            step = 1e-6 * (1.0 + abs(x[a]))
            xp = x.copy()
            xp[a] += step
            xm = x.copy()
            xm[a] -= step
            fp = np.atleast_1d(np.asarray(self.problem.system.f(t, xp), dtype=float))
            fm = np.atleast_1d(np.asarray(self.problem.system.f(t, xm), dtype=float))
            J[:, a] = (fp - fm) / (2 * step)
        return f0, J

    # -- residual and Jacobian --------------------------------------------

    def residual(self, X: Array, sigma: float,
                 with_jacobian: bool = False) -> tuple[Array, Array | None]:
        k, n, m, su, sl = self.mesh.k, self.n, self.m, self.su, self.sl
        h = self.mesh.h
        ups, los = list(self.tr.ups), list(self.tr.los)
        x, u = self.nodes(X)
        gx, gu, Hcost = self.cost_gradient_hessian(x, u, want_hess=with_jacobian)

        F = np.zeros(self.N)
        J = np.zeros((self.N, self.N)) if with_jacobian else None

        # Row offsets mirror the unknown layout: stat_x/stat_u/stat_ep/stat_em
        # occupy the x/u/ep/em slots, constraints occupy the dual slots.
        def row_x(j):
            return self.sl_x(j)

        def row_u(j):
            return self.sl_u(j)

        def row_ep(j):
            return self.sl_ep(j)

        def row_em(j):
            return self.sl_em(j)

        def row_dyn(j):
            return self.sl_p(j + 1)

        def row_fbp(j):
            return self.sl_gp(j)

        def row_fbm(j):
            return self.sl_gm(j)

        row_fbtp = self.sl_tp()
        row_fbtm = self.sl_tm()

        ny = (k + 1) * (n + m)

        def yxi(j):
            return np.arange(j * n, (j + 1) * n)

        def yui(j):
            o = (k + 1) * n
            return np.arange(o + j * m, o + (j + 1) * m)

        # Cost gradient into stationarity rows; Hessian into Jacobian.
        for j in range(1, k + 1):
            F[row_x(j)] += gx[j]
            F[row_u(j)] += gu[j]
        if with_jacobian:
            for j1 in range(1, k + 1):
                for (rows, yrows) in ((row_x(j1), yxi(j1)), (row_u(j1), yui(j1))):
                    for j2 in range(max(1, j1 - 1), min(k, j1 + 1) + 1):
                        for (cols, ycols) in ((self.sl_x(j2), yxi(j2)),
                                              (self.sl_u(j2), yui(j2))):
                            block = Hcost[np.ix_(yrows, ycols)]
                            if np.any(block):
                                J[rows, cols] += block

        # Per-step terms.
        for j in range(k):
            t = float(self.mesh.nodes[j])
            xj, uj = x[j], u[j]
            eta = self.eta_net(X, j)
            psi = psi_eval(self.field, xj, uj)
            Jx = np.atleast_2d(self.field.dpsi_dx(xj, uj))
            Ju = np.atleast_2d(self.field.dpsi_du(xj, uj))
            f0, dfdx = self._df_dx(t, xj)
            p_next = X[self.sl_p(j + 1)]
            ep = X[self.sl_ep(j)]
            em = X[self.sl_em(j)]
            gp = X[self.sl_gp(j)]
            gm = X[self.sl_gm(j)]
            bp = self.hi_up - psi[ups]
            bm = psi[los] - self.lo_lo
            fap, fbp_ = _fb_partials(ep, bp, sigma)
            fam, fbm_ = _fb_partials(em, bm, sigma)

            # dynamics residual
            F[row_dyn(j)] = x[j + 1] - xj - h * f0 + h * (Jx.T @ eta)
            # complementarity residuals
            F[row_fbp(j)] = _fb(ep, bp, sigma)
            F[row_fbm(j)] = _fb(em, bm, sigma)
            # multiplier stationarity
            Jxp = Jx @ p_next
            F[row_ep(j)] = h * Jxp[ups] + fap * gp
            F[row_em(j)] = -h * Jxp[los] + fam * gm

            # stationarity contributions to x_j, u_j (skipped for j = 0: those
            # nodes are pinned), plus the p_j feed from the previous dynamics.
            if j >= 1:
                Hxx_eta = self._hess_xx(xj, uj, eta)
                Hux_eta = self._hess_ux(xj, uj, eta)
                F[row_x(j)] += (-p_next - h * (dfdx.T @ p_next)
                                + h * (Hxx_eta @ p_next))
                F[row_u(j)] += h * (Hux_eta @ p_next)
                # FB coupling into stationarity
                wp = gp * fbp_
                wm = gm * fbm_
                lift = np.zeros(self.s)
                lift[ups] -= wp
                lift[los] += wm
                F[row_x(j)] += Jx.T @ lift
                F[row_u(j)] += Ju.T @ lift
            F[row_x(j + 1)] += p_next

            if with_jacobian:
                # dynamics block
                rd = row_dyn(j)
                if j >= 1:
                    J[rd, self.sl_x(j)] += (-np.eye(n) - h * dfdx
                                            + h * self._hess_xx(xj, uj, eta))
                    J[rd, self.sl_u(j)] += h * self._hess_ux(xj, uj, eta).T
                J[rd, self.sl_x(j + 1)] += np.eye(n)
                if su:
                    J[rd, self.sl_ep(j)] += h * Jx.T[:, ups]
                if sl:
                    J[rd, self.sl_em(j)] -= h * Jx.T[:, los]

                # FB rows
                if su:
                    J[row_fbp(j), self.sl_ep(j)] += np.diag(fap)
                    if j >= 1:
                        J[row_fbp(j), self.sl_x(j)] += np.diag(fbp_) @ (-Jx[ups])
                        J[row_fbp(j), self.sl_u(j)] += np.diag(fbp_) @ (-Ju[ups])
                if sl:
                    J[row_fbm(j), self.sl_em(j)] += np.diag(fam)
                    if j >= 1:
                        J[row_fbm(j), self.sl_x(j)] += np.diag(fbm_) @ Jx[los]
                        J[row_fbm(j), self.sl_u(j)] += np.diag(fbm_) @ Ju[los]

                # multiplier stationarity rows
                faap, fabp, _ = _fb_second(ep, bp, sigma)
                faam, fabm, _ = _fb_second(em, bm, sigma)
                if su:
                    J[row_ep(j), self.sl_p(j + 1)] += h * Jx[ups]
                    J[row_ep(j), self.sl_gp(j)] += np.diag(fap)
                    J[row_ep(j), self.sl_ep(j)] += np.diag(gp * faap)
                    if j >= 1:
                        J[row_ep(j), self.sl_x(j)] += np.diag(gp * fabp) @ (-Jx[ups])
                        J[row_ep(j), self.sl_u(j)] += np.diag(gp * fabp) @ (-Ju[ups])
                if sl:
                    J[row_em(j), self.sl_p(j + 1)] -= h * Jx[los]
                    J[row_em(j), self.sl_gm(j)] += np.diag(fam)
                    J[row_em(j), self.sl_em(j)] += np.diag(gm * faam)
                    if j >= 1:
                        J[row_em(j), self.sl_x(j)] += np.diag(gm * fabm) @ Jx[los]
                        J[row_em(j), self.sl_u(j)] += np.diag(gm * fabm) @ Ju[los]
                # per-row psi second derivatives for the p-coupled terms
                if j >= 1:
                    for idx, i in enumerate(ups):
                        ei = np.zeros(self.s)
                        ei[i] = 1.0
                        hxrow = self._hess_xx(xj, uj, ei) @ p_next
                        huro = self._hess_ux(xj, uj, ei) @ p_next
                        J[row_ep(j).start + idx, self.sl_x(j)] += h * hxrow
                        J[row_ep(j).start + idx, self.sl_u(j)] += h * huro
                    for idx, i in enumerate(los):
                        ei = np.zeros(self.s)
                        ei[i] = 1.0
                        hxrow = self._hess_xx(xj, uj, ei) @ p_next
                        huro = self._hess_ux(xj, uj, ei) @ p_next
                        J[row_em(j).start + idx, self.sl_x(j)] -= h * hxrow
                        J[row_em(j).start + idx, self.sl_u(j)] -= h * huro

                # stationarity x_j/u_j blocks (j >= 1)
                if j >= 1:
                    rx, ru = row_x(j), row_u(j)
                    J[rx, self.sl_p(j + 1)] += (-np.eye(n) - h * dfdx.T
                                                + h * self._hess_xx(xj, uj, eta))
                    J[ru, self.sl_p(j + 1)] += h * self._hess_ux(xj, uj, eta)
                    # eta columns of the p-coupled curvature
                    for idx, i in enumerate(ups):
                        ei = np.zeros(self.s)
                        ei[i] = 1.0
                        J[rx, self.sl_ep(j).start + idx] += h * (
                            self._hess_xx(xj, uj, ei) @ p_next)
                        J[ru, self.sl_ep(j).start + idx] += h * (
                            self._hess_ux(xj, uj, ei) @ p_next)
                    for idx, i in enumerate(los):
                        ei = np.zeros(self.s)
                        ei[i] = 1.0
                        J[rx, self.sl_em(j).start + idx] -= h * (
                            self._hess_xx(xj, uj, ei) @ p_next)
                        J[ru, self.sl_em(j).start + idx] -= h * (
                            self._hess_ux(xj, uj, ei) @ p_next)
                    # FB-lift curvature
                    if su:
                        J[rx, self.sl_gp(j)] += -Jx.T[:, ups] @ np.diag(fbp_)
                        J[ru, self.sl_gp(j)] += -Ju.T[:, ups] @ np.diag(fbp_)
                    if sl:
                        J[rx, self.sl_gm(j)] += Jx.T[:, los] @ np.diag(fbm_)
                        J[ru, self.sl_gm(j)] += Ju.T[:, los] @ np.diag(fbm_)
                    _, _, fbbp = _fb_second(ep, bp, sigma)
                    _, _, fbbm = _fb_second(em, bm, sigma)
                    wxp = Jx[ups].T * (gp * fbbp) if su else None
                    wxm = Jx[los].T * (gm * fbbm) if sl else None
                    if su:
                        J[rx, self.sl_x(j)] += wxp @ Jx[ups]
                        J[rx, self.sl_u(j)] += wxp @ Ju[ups]
                        J[ru, self.sl_x(j)] += (Ju[ups].T * (gp * fbbp)) @ Jx[ups]
                        J[ru, self.sl_u(j)] += (Ju[ups].T * (gp * fbbp)) @ Ju[ups]
                        J[rx, self.sl_ep(j)] += -Jx.T[:, ups] @ np.diag(gp * fabp)
                        J[ru, self.sl_ep(j)] += -Ju.T[:, ups] @ np.diag(gp * fabp)
                    if sl:
                        J[rx, self.sl_x(j)] += wxm @ Jx[los]
                        J[rx, self.sl_u(j)] += wxm @ Ju[los]
                        J[ru, self.sl_x(j)] += (Ju[los].T * (gm * fbbm)) @ Jx[los]
                        J[ru, self.sl_u(j)] += (Ju[los].T * (gm * fbbm)) @ Ju[los]
                        J[rx, self.sl_em(j)] += Jx.T[:, los] @ np.diag(gm * fabm)
                        J[ru, self.sl_em(j)] += Ju.T[:, los] @ np.diag(gm * fabm)
                    # psi-curvature of the FB lift
                    lift = np.zeros(self.s)
                    if su:
                        lift[ups] -= gp * fbp_
                    if sl:
                        lift[los] += gm * fbm_
                    J[rx, self.sl_x(j)] += self._hess_xx(xj, uj, lift)
                    J[rx, self.sl_u(j)] += self._hess_ux(xj, uj, lift).T
                    J[ru, self.sl_x(j)] += self._hess_ux(xj, uj, lift)
                # p_j feed into stat_x_{j+1}
                J[row_x(j + 1), self.sl_p(j + 1)] += np.eye(n)

        # Endpoint terms at (x_k, u_k).
        xk, uk = x[k], u[k]
        psik = psi_eval(self.field, xk, uk)
        Jxk = np.atleast_2d(self.field.dpsi_dx(xk, uk))
        Juk = np.atleast_2d(self.field.dpsi_du(xk, uk))
        tp = X[row_fbtp]
        tm = X[row_fbtm]
        btp = self.hi_up - psik[ups]
        btm = psik[los] - self.lo_lo
        fatp, fbtp_ = _fb_partials(tp, btp, sigma)
        fatm, fbtm_ = _fb_partials(tm, btm, sigma)
        F[row_fbtp] = _fb(tp, btp, sigma)
        F[row_fbtm] = _fb(tm, btm, sigma)
        theta_net = np.zeros(self.s)
        theta_net[ups] += tp
        theta_net[los] -= tm
        F[row_x(k)] += Jxk.T @ theta_net
        F[row_u(k)] += Juk.T @ theta_net

        if with_jacobian:
            if su:
                J[row_fbtp, row_fbtp] += np.diag(fatp)
                J[row_fbtp, self.sl_x(k)] += np.diag(fbtp_) @ (-Jxk[ups])
                J[row_fbtp, self.sl_u(k)] += np.diag(fbtp_) @ (-Juk[ups])
                J[row_x(k), row_fbtp] += Jxk.T[:, ups]
                J[row_u(k), row_fbtp] += Juk.T[:, ups]
            if sl:
                J[row_fbtm, row_fbtm] += np.diag(fatm)
                J[row_fbtm, self.sl_x(k)] += np.diag(fbtm_) @ Jxk[los]
                J[row_fbtm, self.sl_u(k)] += np.diag(fbtm_) @ Juk[los]
                J[row_x(k), row_fbtm] -= Jxk.T[:, los]
                J[row_u(k), row_fbtm] -= Juk.T[:, los]
            J[row_x(k), self.sl_x(k)] += self._hess_xx(xk, uk, theta_net)
            J[row_x(k), self.sl_u(k)] += self._hess_ux(xk, uk, theta_net).T
            J[row_u(k), self.sl_x(k)] += self._hess_ux(xk, uk, theta_net)
        return F, J

    def stationarity_norm(self, F: Array) -> float:
        k = self.mesh.k
        end = self.off["p"]
        return float(np.max(np.abs(F[:end]))) if end else 0.0


def _comp_residual(pairs: Sequence[tuple[float, float]]) -> float:
    return max((abs(min(a, b)) for a, b in pairs), default=0.0)


def _default_schedule(start: float = 0.3) -> tuple[float, ...]:
    """Geometric continuation down to 1e-8, factor 0.2."""
    out = []
    s = start
    while s > 1.3e-8:
        out.append(s)
        s *= 0.2
    out.append(1e-8)
    return tuple(out)


def _lm_stage(kkt: _KktSystem, X: Array, sigma: float, tol: float,
              max_iter: int) -> tuple[Array, int, float]:
    """Drive ||F(., sigma)||_inf below tol by Levenberg-damped Newton.

    Steps normally solve the damped normal equations, which squares the
    Jacobian's condition number; near the sigma floor that noise can stall
    progress above the target.  When the residual stagnates (or a step is
    rejected outright) the stage switches to an equivalent QR least-squares
    step and stays there, trading speed for full precision.
    """
    lam = 1e-8
    F, J = kkt.residual(X, sigma, with_jacobian=True)
    use_qr = False
    stagnant = 0
    prev_norm = math.inf
    for it in range(max_iter):
        norm = float(np.max(np.abs(F)))
        if norm <= tol:
            return X, it, norm
        if norm > 0.9 * prev_norm:
            stagnant += 1
            if stagnant >= 5:
                use_qr = True
        else:
            stagnant = 0
        prev_norm = norm
        merit = 0.5 * float(F @ F)
        g = J.T @ F
        A = J.T @ J
        diag = np.maximum(np.diag(A), 1e-8)
        accepted = False
        for _ in range(40):
            if use_qr:
                aug = np.vstack([J, np.sqrt(lam) * np.diag(np.sqrt(diag))])
                rhs = np.concatenate([-F, np.zeros(J.shape[1])])
                d = np.linalg.lstsq(aug, rhs, rcond=None)[0]
            else:
                try:
                    d = np.linalg.solve(A + lam * np.diag(diag), -g)
                except np.linalg.LinAlgError:
                    lam *= 10
                    continue
            Fn, _ = kkt.residual(X + d, sigma)
            if 0.5 * float(Fn @ Fn) < merit:
                X = X + d
                F, J = kkt.residual(X, sigma, with_jacobian=True)
                lam = max(lam / 5, 1e-12)
                accepted = True
                break
            lam *= 10
        if not accepted:
            if not use_qr:
                use_qr = True
                lam = 1e-8
                continue
            return X, it + 1, float(np.max(np.abs(F)))
    return X, max_iter, float(np.max(np.abs(F)))


def _centered_start(kkt: _KktSystem, warm: DiscreteDecision,
                    sigma0: float) -> Array:
    """KKT vector near the sigma0 central path.

    The multiplier of every pair is placed on the smoothed-complementarity
    hyperbola a*b = sigma0^2/2 given its slack, the adjoints come from a
    backward cost sweep, and the constraint multipliers solve their own
    stationarity rows exactly.
    """
    tr = kkt.tr
    X = kkt.pack_primal(warm)
    x, u = kkt.nodes(X)
    gx, _, _ = kkt.cost_gradient_hessian(x, u, want_hess=False)
    k = kkt.mesh.k
    h = kkt.mesh.h
    p = np.zeros((k + 1, kkt.n))
    p[k] = -gx[k]
    for j in range(k - 1, 0, -1):
        p[j] = p[j + 1] - gx[j]
    for j in range(1, k + 1):
        X[kkt.sl_p(j)] = p[j]
    for j in range(k):
        psi = psi_eval(kkt.field, x[j], u[j])
        Jx = np.atleast_2d(kkt.field.dpsi_dx(x[j], u[j]))
        Jxp = Jx @ p[j + 1]
        bp = kkt.hi_up - psi[list(tr.ups)]
        bm = psi[list(tr.los)] - kkt.lo_lo
        ep = sigma0 ** 2 / (2 * np.maximum(bp, sigma0))
        em = sigma0 ** 2 / (2 * np.maximum(bm, sigma0))
        X[kkt.sl_ep(j)] = ep
        X[kkt.sl_em(j)] = em
        fap, _ = _fb_partials(ep, np.maximum(bp, sigma0), sigma0)
        fam, _ = _fb_partials(em, np.maximum(bm, sigma0), sigma0)
        X[kkt.sl_gp(j)] = -h * Jxp[list(tr.ups)] / np.maximum(fap, 1e-2)
        X[kkt.sl_gm(j)] = h * Jxp[list(tr.los)] / np.maximum(fam, 1e-2)
    psik = psi_eval(kkt.field, x[k], u[k])
    btp = kkt.hi_up - psik[list(tr.ups)]
    btm = psik[list(tr.los)] - kkt.lo_lo
    X[kkt.sl_tp()] = sigma0 ** 2 / (2 * np.maximum(btp, sigma0))
    X[kkt.sl_tm()] = sigma0 ** 2 / (2 * np.maximum(btm, sigma0))
    return X


#: Mesh size below which the KKT Newton is run directly; finer targets are
#: reached by solving coarse first and prolonging (mesh continuation).
_COARSE_LIMIT = 25


def _restrict_warm(problem: OcpProblem, warm: DiscreteDecision,
                   k_coarse: int) -> DiscreteDecision:
    """Coarse-mesh warm start: restrict the control, re-simulate the state."""
    mesh = Mesh(k=k_coarse, T=problem.system.T)
    u = warm.control_path().at(mesh.nodes)
    u[0] = problem.u0
    try:
        state, records = simulate(problem.system, Path(mesh=mesh, values=u))
        eta = np.array([r.eta for r in records]) / mesh.h
        x = state.values
    except SimulationError:
        x = warm.state_path().at(mesh.nodes)
        eta = np.zeros((k_coarse, problem.system.field.s))
    return DiscreteDecision(mesh=mesh, x=x, u=u, eta=eta)


def _prolong(problem: OcpProblem, z: DiscreteDecision,
             k_fine: int) -> DiscreteDecision:
    """Interpolate a coarse solution onto a finer mesh."""
    mesh = Mesh(k=k_fine, T=problem.system.T)
    x = z.state_path().at(mesh.nodes)
    u = z.control_path().at(mesh.nodes)
    u[0] = problem.u0
    eta = np.zeros((k_fine, z.eta.shape[1]))
    for j in range(k_fine):
        tm = 0.5 * (mesh.nodes[j] + mesh.nodes[j + 1])
        cj = min(int(tm / z.mesh.h), z.mesh.k - 1)
        eta[j] = z.eta[cj]
    return DiscreteDecision(mesh=mesh, x=x, u=u, eta=eta)


def _run_schedule(kkt: _KktSystem, X: Array, sched: Sequence[float],
                  tol_stat: float, max_iter_per_stage: int,
                  ) -> tuple[Array, int, float, list[float]]:
    """One continuation pass.  Intermediate stages are solved inexactly
    (tolerance scales with sigma); only the last stage must reach tol_stat."""
    total = 0
    costs = []
    norm = np.inf
    for i, sigma in enumerate(sched):
        last = i == len(sched) - 1
        tol = tol_stat if last else max(tol_stat, 0.02 * sigma)
        cap = max(300, max_iter_per_stage) if last else max_iter_per_stage
        X, its, norm = _lm_stage(kkt, X, sigma, tol, cap)
        total += its
        costs.append(cost_eval(kkt.problem, kkt.unpack(X)))
        if last and norm > tol_stat and len(sched) > 1:
            # Refine the last continuation gap geometrically and retry.
            ladder = np.geomspace(sched[-2], sigma, 6)[1:-1]
            for s_mid in ladder:
                X, its, _ = _lm_stage(kkt, X, float(s_mid), 0.02 * s_mid, cap)
                total += its
            X, its, norm = _lm_stage(kkt, X, sigma, tol_stat, cap)
            total += its
            costs[-1] = cost_eval(kkt.problem, kkt.unpack(X))
    return X, total, norm, costs


def solve_smoothed(transcription: Transcription,
                   sigma_schedule: Sequence[float] | None = None,
                   warm: DiscreteDecision | None = None,
                   tol_stat: float = 1e-9,
                   max_iter_per_stage: int = 80,
                   ) -> tuple[DiscreteDecision, SolveReport]:
    """Continuation in sigma over the smoothed KKT system.

    Each stage runs a Levenberg-damped Newton iteration on the full KKT
    system, warm-started from the previous stage.  Fine meshes are reached
    by mesh continuation: the problem is first solved on a coarsened mesh
    (the schedule applies there in full), then prolonged stepwise, each
    finer mesh re-running the schedule's tail.  A warm start that already
    satisfies the final-stage system is returned unchanged after the
    tolerance check.  The final sigma must be at most 1e-8 so the reported
    complementarity is meaningful.
    """
    if sigma_schedule is None:
        sigma_schedule = _default_schedule()
    sig = [float(s) for s in sigma_schedule]
    if not sig or any(s <= 0 for s in sig):
        raise ConfigurationError("sigma schedule must be positive")
    if any(b >= a for a, b in zip(sig, sig[1:])):
        raise ConfigurationError("sigma schedule must be decreasing")
    if sig[-1] > 1e-8:
        raise ConfigurationError("final sigma must be at most 1e-8")

    problem = transcription.problem
    if warm is None:
        warm = transcription.initial_decision()
    else:
        z0 = psi_eval(transcription.field, warm.x[0], warm.u[0])
        if not problem.system.theta.contains(z0, tol=1e-7):
            raise InfeasibleWarmStartError("warm start violates psi(x0,u0) in Theta")
        if np.max(np.abs(warm.x[0] - problem.system.x0)) > 1e-9 or \
           np.max(np.abs(warm.u[0] - problem.u0)) > 1e-9:
            raise InfeasibleWarmStartError("warm start must pin (x_0, u_0)")

    kkt = _KktSystem(transcription)
    total_iters = 0
    cost_trace = [cost_eval(problem, warm)]

    # Tolerance check first: an already-stationary warm start is returned
    # without any Newton step.
    X = kkt.pack_primal(warm)
    F0, _ = kkt.residual(X, sig[-1])
    if float(np.max(np.abs(F0))) > tol_stat:
        k_target = transcription.mesh.k
        levels = [k_target]
        while levels[-1] > _COARSE_LIMIT:
            levels.append(-(-levels[-1] // 2))
        levels.reverse()

        if len(levels) == 1:
            X_centered = _centered_start(kkt, warm, sig[0])
            Fc, _ = kkt.residual(X_centered, sig[0])
            Fp, _ = kkt.residual(X, sig[0])
            if float(np.max(np.abs(Fc))) < float(np.max(np.abs(Fp))):
                X = X_centered
            X, its, norm, costs = _run_schedule(kkt, X, sig, tol_stat,
                                                max_iter_per_stage)
            total_iters += its
            cost_trace.extend(costs)
        else:
            # Coarse solve gets the full schedule; refined meshes rerun its
            # tail from sigma <= 1e-2 (the prolongation error scale).
            tail = [s for s in sig if s <= 1e-2] or [sig[-1]]
            z = _restrict_warm(problem, warm, levels[0])
            tr_c = transcribe(problem, levels[0])
            kkt_c = _KktSystem(tr_c)
            Xc = kkt_c.pack_primal(z)
            X_centered = _centered_start(kkt_c, z, sig[0])
            Fc, _ = kkt_c.residual(X_centered, sig[0])
            Fp, _ = kkt_c.residual(Xc, sig[0])
            if float(np.max(np.abs(Fc))) < float(np.max(np.abs(Fp))):
                Xc = X_centered
            Xc, its, norm, _ = _run_schedule(kkt_c, Xc, sig, tol_stat,
                                             max_iter_per_stage)
            total_iters += its
            z = kkt_c.unpack(Xc)
            for k_f in levels[1:]:
                z_f = _prolong(problem, z, k_f)
                if k_f == k_target:
                    kkt_f = kkt
                else:
                    kkt_f = _KktSystem(transcribe(problem, k_f))
                Xf = kkt_f.pack_primal(z_f)
                Xf, its, norm, costs = _run_schedule(kkt_f, Xf, tail, tol_stat,
                                                     max_iter_per_stage)
                total_iters += its
                z = kkt_f.unpack(Xf)
            X = Xf
            cost_trace.extend(costs)
        if norm > tol_stat:
            err = NumericalFailureError(
                f"continuation stalled at residual {norm:.3e} with final "
                f"sigma {sig[-1]:g} after {total_iters} iterations")
            # The last iterate is still useful for postmortems.
            err.partial = kkt.unpack(X)
            raise err

    decision = kkt.unpack(X)
    F, _ = kkt.residual(X, sig[-1])
    pairs = transcription.pair_values(decision)
    tp = X[kkt.sl_tp()]
    tm = X[kkt.sl_tm()]
    psik = psi_eval(transcription.field, decision.x[-1], decision.u[-1])
    for idx, i in enumerate(transcription.ups):
        pairs.append((float(tp[idx]), float(transcription.hi[i] - psik[i])))
    for idx, i in enumerate(transcription.los):
        pairs.append((float(tm[idx]), float(psik[i] - transcription.lo[i])))
    report = SolveReport(
        cost=cost_eval(problem, decision),
        comp_residual=_comp_residual(pairs),
        stat_residual=kkt.stationarity_norm(F),
        iterations=total_iters,
        sigma_trace=tuple(sig),
        cost_trace=tuple(cost_trace),
    )
    return decision, report


# ---------------------------------------------------------------------------
# Shooting solver
# ---------------------------------------------------------------------------


def solve_shooting(problem: OcpProblem, k: int, initial_control: Path,
                   tol: float = 1e-12, max_iter: int = 500,
                   free_mask: Array | None = None,
                   ) -> tuple[DiscreteDecision, SolveReport]:
    """Gradient descent over control nodes through the simulator.

    Gradients come from forward differences with step 1e-6 (1 + ||u||); the
    cost over accepted iterates never increases.  Node 0 is always pinned to
    the prescribed initial control; ``free_mask`` (length k+1) can pin more.
    """
    mesh = Mesh(k=k, T=problem.system.T)
    if initial_control.mesh != mesh:
        raise ConfigurationError("initial control must live on the target mesh")
    m = problem.system.field.m
    mask = np.ones(k + 1, dtype=bool) if free_mask is None else \
        np.asarray(free_mask, dtype=bool).copy()
    mask[0] = False

    U = initial_control.values.copy()
    U[0] = problem.u0

    def build(Uvals: Array) -> DiscreteDecision | None:
        try:
            state, records = simulate(problem.system, Path(mesh=mesh, values=Uvals))
        except SimulationError:
            return None
        eta = np.array([r.eta for r in records]) / mesh.h
        return DiscreteDecision(mesh=mesh, x=state.values, u=Uvals, eta=eta)

    def cost_of(Uvals: Array) -> float:
        z = build(Uvals)
        return float("inf") if z is None else cost_eval(problem, z)

    current = cost_of(U)
    if not np.isfinite(current):
        raise InfeasibleWarmStartError("initial control cannot be simulated")
    cost_trace = [current]
    free_idx = [(j, a) for j in range(k + 1) if mask[j] for a in range(m)]
    iterations = 0
    grad_norm = 0.0
    if free_idx:
        for iterations in range(1, max_iter + 1):
            delta = 1e-6 * (1.0 + float(np.linalg.norm(U)))
            g = np.zeros(len(free_idx))
            for idx, (j, a) in enumerate(free_idx):
                Up = U.copy()
                Up[j, a] += delta
                g[idx] = (cost_of(Up) - current) / delta
            grad_norm = float(np.linalg.norm(g))
            if grad_norm ** 2 < tol:
                break
            alpha = 1.0
            accepted = False
            any_finite_trial = False
            while alpha >= 1e-12:
                Un = U.copy()
                for idx, (j, a) in enumerate(free_idx):
                    Un[j, a] -= alpha * g[idx]
                trial = cost_of(Un)
                if np.isfinite(trial):
                    any_finite_trial = True
                if trial <= current - 1e-4 * alpha * grad_norm ** 2:
                    U, current = Un, trial
                    cost_trace.append(current)
                    accepted = True
                    break
                alpha /= 2
            if not accepted:
                if not any_finite_trial:
                    err = NumericalFailureError(
                        "every trial step failed to simulate")
                    err.partial = build(U)  # last accepted iterate
                    raise err
                break  # no descent beyond noise: predicted decrease is spent
    decision = build(U)
    if decision is None:
        raise NumericalFailureError("final control failed to simulate")
    field = problem.system.effective_field()
    try:
        lo, hi = _theta_bounds(problem.system.theta)
    except ConfigurationError:
        lo = hi = None  # smooth Theta: report cone violation instead
    comp = 0.0
    for j in range(k):
        # simulator multipliers satisfy the cone condition at the right node
        psi_next = psi_eval(field, decision.x[j + 1], decision.u[j + 1])
        if lo is None:
            comp = max(comp, problem.system.theta.normal_cone_violation(
                psi_next, decision.eta[j]))
            continue
        for i in range(field.s):
            if np.isfinite(hi[i]):
                comp = max(comp, abs(min(max(decision.eta[j, i], 0.0),
                                         hi[i] - psi_next[i])))
            if np.isfinite(lo[i]):
                comp = max(comp, abs(min(max(-decision.eta[j, i], 0.0),
                                         psi_next[i] - lo[i])))
    report = SolveReport(
        cost=current,
        comp_residual=comp,
        stat_residual=grad_norm,
        iterations=iterations,
        sigma_trace=(),
        cost_trace=tuple(cost_trace),
    )
    return decision, report
