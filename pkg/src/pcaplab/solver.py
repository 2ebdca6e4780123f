"""Exterior p-capacitary potentials by regularized convex energy minimization.

The truncated exterior problem is solved on a uniform node lattice covering
the box of the outer ball B_Rout.  The regularized p-Dirichlet energy

    E_eps(v) = sum over active cells (|Dv|^2 + eps^2)^(p/2) h^n

is convex; eps is annealed over a fixed halving schedule down to 1e-4/h.
Inner Dirichlet nodes (first interior layer) carry v = 1; an outer shell
carries the asymptotic profile C^(1/(p-1)) |x|^(-alpha) whose capacity
coefficient is re-matched over three far-field passes.  Each descent step is
a diffusion-weighted linearization solved by Jacobi-preconditioned CG and
accepted through a backtracking line search on the true energy, so recorded
energies decrease monotonically.  A grid hierarchy (4h, 2h, h) provides warm
starts; nodal results match a single-level solve to discretization accuracy.
"""

import math
import struct
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._kernels import get_kernels
from .geometry import sphere_area

__all__ = [
    "PotentialField",
    "NonConvergence",
    "PrecisionLossWarning",
    "solve_exterior",
    "boundary_gradient",
    "field_energy",
    "asymptotic_tail_energy",
    "save_field",
    "load_field",
    "sample_trilinear",
    "p_range_check",
]

NODE_FREE = 0
NODE_INNER = 1    # first interior layer, u = 1
NODE_OUTER = 2    # far-field shell, asymptotic profile
NODE_DEAD = 3     # deep interior / outside truncation, not solved


class NonConvergence(RuntimeError):
    """Energy decrease stayed above the relative floor at the iteration cap."""


class PrecisionLossWarning(UserWarning):
    """Discrete maximum principle violated beyond 1e-6 before projection."""


def p_range_check(p, n=3):
    lo, hi = 1.05, min(2.8, n - 0.2)
    if not (lo <= p <= hi):
        raise ValueError(f"p={p} outside the solver range [{lo}, {hi}] for n={n}")


@dataclass
class PotentialField:
    origin: np.ndarray            # (3,)
    h: float
    shape: tuple
    values: np.ndarray            # (nx, ny, nz) nodal u
    node_type: np.ndarray         # (nx, ny, nz) int8
    active: np.ndarray            # (nx-1, ny-1, nz-1) bool cells
    p: float
    epsilon: float                # final regularization (gradient units)
    R_out: float
    energy: float                 # final regularized energy
    residual_norm: float
    capacity_estimate: float
    energy_trace: list = field(default_factory=list)
    capacity_trace: list = field(default_factory=list)
    domain: object = None
    n: int = 3
    solve_seconds: float = 0.0
    vol: np.ndarray = None            # exterior volume fraction per cell
    ax2: np.ndarray = None            # squared interface edge factors
    ay2: np.ndarray = None
    az2: np.ndarray = None

    @property
    def alpha(self):
        return (self.n - self.p) / (self.p - 1.0)

    def node_coords_1d(self):
        return [self.origin[d] + self.h * np.arange(self.shape[d]) for d in range(3)]

    def max_principle_violation(self):
        free = self.node_type == NODE_FREE
        if not free.any():
            return 0.0
        vals = self.values[free]
        return float(max(vals.max() - 1.0, -vals.min(), 0.0))


def sample_trilinear(field, points):
    """Trilinear interpolation of nodal values at physical points (N, 3)."""
    pts = np.asarray(points, dtype=float)
    idx = (pts - field.origin[None, :]).T / field.h
    return ndimage.map_coordinates(field.values, idx, order=1, mode="nearest")


def asymptotic_tail_energy(capacity, p, n, R_out):
    """Integral of |Du|^p of the matched radial profile from R_out to infinity."""
    alpha = (n - p) / (p - 1.0)
    return (
        sphere_area(n)
        * alpha ** p
        * capacity ** (p / (p - 1.0))
        * (p - 1.0)
        / (n - p)
        * R_out ** (-(n - p) / (p - 1.0))
    )


def _profile_values(r, capacity, p, n):
    alpha = (n - p) / (p - 1.0)
    c = capacity ** (1.0 / (p - 1.0))
    with np.errstate(over="ignore"):
        vals = c * np.maximum(r, 1e-300) ** (-alpha)
    return np.minimum(1.0, vals)


class _Multigrid:
    """Geometric V-cycle preconditioner for the weighted 7-point operator.

    Coarse levels rediscretize: per-axis cell weights are averaged over the
    eight children, free masks subsample the even nodes.  Smoothing is damped
    Jacobi, symmetric pre/post, so the cycle is an SPD-up-to-rediscretization
    linear operator suitable inside CG.
    """

    OMEGA = 0.7
    PRE = 2
    POST = 2
    COARSE_SWEEPS = 30

    def __init__(self, kern, h, free, min_nodes=9):
        self.kern = kern
        self.levels = []
        cur_free = free
        cur_h = h
        while True:
            n = cur_free.shape[0]
            lv = {
                "h": cur_h,
                "free": cur_free,
                "shape": cur_free.shape,
                "wx": None, "wy": None, "wz": None,
                "diag": np.empty(cur_free.shape),
                "x": np.empty(cur_free.shape),
                "r": np.empty(cur_free.shape),
                "t": np.empty(cur_free.shape),
            }
            self.levels.append(lv)
            if n < 2 * min_nodes - 1 or n % 2 == 0:
                break
            cur_free = cur_free[::2, ::2, ::2].copy()
            cur_h = cur_h * 2.0
        for lv in self.levels:
            cs = tuple(s - 1 for s in lv["shape"])
            lv["wx"] = np.zeros(cs)
            lv["wy"] = np.zeros(cs)
            lv["wz"] = np.zeros(cs)

    @staticmethod
    def _coarsen_cells(w):
        # pad odd cell counts so 2x2x2 children average cleanly
        n0, n1, n2 = w.shape
        p0, p1, p2 = n0 % 2, n1 % 2, n2 % 2
        if p0 or p1 or p2:
            w = np.pad(w, ((0, p0), (0, p1), (0, p2)), mode="edge")
        return 0.125 * (
            w[::2, ::2, ::2] + w[1::2, ::2, ::2] + w[::2, 1::2, ::2]
            + w[::2, ::2, 1::2] + w[1::2, 1::2, ::2] + w[1::2, ::2, 1::2]
            + w[::2, 1::2, 1::2] + w[1::2, 1::2, 1::2]
        )

    def update_weights(self, wx, wy, wz):
        lv0 = self.levels[0]
        lv0["wx"], lv0["wy"], lv0["wz"] = wx, wy, wz
        for fine, coarse in zip(self.levels[:-1], self.levels[1:]):
            cs = tuple(s - 1 for s in coarse["shape"])
            coarse["wx"] = self._coarsen_cells(fine["wx"])[: cs[0], : cs[1], : cs[2]]
            coarse["wy"] = self._coarsen_cells(fine["wy"])[: cs[0], : cs[1], : cs[2]]
            coarse["wz"] = self._coarsen_cells(fine["wz"])[: cs[0], : cs[1], : cs[2]]
        for lv in self.levels:
            self.kern.diagonal(lv["wx"], lv["wy"], lv["wz"], lv["h"], lv["free"], lv["diag"])

    @staticmethod
    def _restrict(a):
        # full weighting onto even nodes, separable 1/4-1/2-1/4
        for axis in range(3):
            n = a.shape[axis]
            sl = [slice(None)] * 3
            sl[axis] = slice(0, n, 2)
            c = 0.5 * a[tuple(sl)]
            sl[axis] = slice(1, n, 2)
            plus = a[tuple(sl)]
            m = plus.shape[axis]
            slc = [slice(None)] * 3
            slc[axis] = slice(0, m)
            c[tuple(slc)] = c[tuple(slc)] + 0.25 * plus
            slc[axis] = slice(1, m + 1)
            c[tuple(slc)] = c[tuple(slc)] + 0.25 * plus
            a = c
        return a

    @staticmethod
    def _prolong(a, target_shape):
        for axis in range(3):
            n_f = target_shape[axis]
            shape = list(a.shape)
            shape[axis] = n_f
            out = np.zeros(shape)
            sl_even = [slice(None)] * 3
            sl_even[axis] = slice(0, n_f, 2)
            out[tuple(sl_even)] = a
            sl_odd = [slice(None)] * 3
            sl_odd[axis] = slice(1, n_f, 2)
            lo = [slice(None)] * 3
            lo[axis] = slice(0, (n_f - 1) // 2)
            hi = [slice(None)] * 3
            hi[axis] = slice(1, (n_f + 1) // 2)
            out[tuple(sl_odd)] = 0.5 * (a[tuple(lo)] + a[tuple(hi)])
            a = out
        return a

    def _smooth(self, lv, x, b, sweeps):
        kern = self.kern
        for _ in range(sweeps):
            kern.matvec(x, lv["wx"], lv["wy"], lv["wz"], lv["h"], lv["free"], lv["t"])
            np.subtract(b, lv["t"], out=lv["t"])
            lv["t"] /= lv["diag"]
            lv["t"] *= self.OMEGA
            x += lv["t"]
            x[~lv["free"]] = 0.0

    def _cycle(self, li, b):
        lv = self.levels[li]
        x = np.zeros(lv["shape"])
        if li == len(self.levels) - 1:
            self._smooth(lv, x, b, self.COARSE_SWEEPS)
            return x
        self._smooth(lv, x, b, self.PRE)
        kern = self.kern
        kern.matvec(x, lv["wx"], lv["wy"], lv["wz"], lv["h"], lv["free"], lv["t"])
        res = b - lv["t"]
        res[~lv["free"]] = 0.0
        rc = self._restrict(res)
        rc[~self.levels[li + 1]["free"]] = 0.0
        ec = self._cycle(li + 1, rc)
        corr = self._prolong(ec, lv["shape"])
        corr[~lv["free"]] = 0.0
        x += corr
        self._smooth(lv, x, b, self.POST)
        return x

    def apply(self, b):
        return self._cycle(0, b)


class _Level:
    """One grid level: classification, buffers and the descent machinery."""

    def __init__(self, domain, h, R_out, p, kern):
        self.h = float(h)
        self.p = float(p)
        self.kern = kern
        m = int(round(R_out / h))
        self.R_out = m * self.h
        n_nodes = 2 * m + 1
        self.shape = (n_nodes, n_nodes, n_nodes)
        self.origin = np.array([-self.R_out] * 3)

        ax = self.origin[0] + self.h * np.arange(n_nodes)
        X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij", sparse=True)
        r2 = X * X + Y * Y + Z * Z
        pts = np.column_stack([
            np.broadcast_to(X, self.shape).ravel(),
            np.broadcast_to(Y, self.shape).ravel(),
            np.broadcast_to(Z, self.shape).ravel(),
        ])
        phi = domain.levelset(pts).reshape(self.shape)
        inside = phi < 0.0
        self.r_nodes = np.sqrt(r2)

        # first interior layer: inside nodes with an exterior 6-neighbour
        exterior = ~inside
        near_ext = np.zeros(self.shape, dtype=bool)
        near_ext[1:] |= exterior[:-1]
        near_ext[:-1] |= exterior[1:]
        near_ext[:, 1:] |= exterior[:, :-1]
        near_ext[:, :-1] |= exterior[:, 1:]
        near_ext[:, :, 1:] |= exterior[:, :, :-1]
        near_ext[:, :, :-1] |= exterior[:, :, 1:]

        node_type = np.full(self.shape, NODE_DEAD, dtype=np.int8)
        outer_shell = exterior & (self.r_nodes >= self.R_out - 1.5 * self.h)
        node_type[exterior & ~outer_shell] = NODE_FREE
        node_type[outer_shell] = NODE_OUTER
        node_type[inside & near_ext] = NODE_INNER

        # a cell is active iff its four stencil nodes are alive, it carries a
        # nonconstant field, and its centre stays within the truncation ball
        alive = node_type != NODE_DEAD
        is_inner = node_type == NODE_INNER
        active = (
            alive[:-1, :-1, :-1] & alive[1:, :-1, :-1]
            & alive[:-1, 1:, :-1] & alive[:-1, :-1, 1:]
        )
        all_inner = (
            is_inner[:-1, :-1, :-1] & is_inner[1:, :-1, :-1]
            & is_inner[:-1, 1:, :-1] & is_inner[:-1, :-1, 1:]
        )
        active &= ~all_inner
        cx = self.origin[0] + self.h * (0.5 + np.arange(n_nodes - 1))
        CX, CY, CZ = np.meshgrid(cx, cx, cx, indexing="ij", sparse=True)
        rc2 = CX * CX + CY * CY + CZ * CZ
        active &= rc2 <= self.R_out ** 2
        self.active = active

        # free nodes must appear in at least one active cell
        touches = np.zeros(self.shape, dtype=bool)
        touches[:-1, :-1, :-1] |= active
        touches[1:, :-1, :-1] |= active
        touches[:-1, 1:, :-1] |= active
        touches[:-1, :-1, 1:] |= active
        node_type[(node_type == NODE_FREE) & ~touches] = NODE_DEAD

        self.node_type = node_type
        self.free = node_type == NODE_FREE
        self.n_free = int(self.free.sum())

        self._subcell_quadrature(phi)

        cshape = (n_nodes - 1,) * 3
        self.u = np.zeros(self.shape)
        self.w = np.zeros(cshape)
        self.e = np.zeros(cshape)
        self.wx = np.zeros(cshape)
        self.wy = np.zeros(cshape)
        self.wz = np.zeros(cshape)
        self._r = np.empty(self.shape)
        self._z = np.empty(self.shape)
        self._q = np.empty(self.shape)
        self._pv = np.empty(self.shape)
        self._try = np.empty(self.shape)
        self.mg = _Multigrid(kern, self.h, self.free)

    def _subcell_quadrature(self, phi):
        """Interface-aware quadrature: edge gradient factors 1/theta on
        boundary-crossing edges and exterior volume fractions per cell.
        Together these place the Dirichlet interface at the level-set
        crossing instead of the staircase, restoring the capacity to
        second-order accuracy in h."""
        h = self.h
        pb = phi[:-1, :-1, :-1]
        vol_mean = pb.copy()
        self.ax2 = np.ones_like(pb)
        self.ay2 = np.ones_like(pb)
        self.az2 = np.ones_like(pb)
        for arr, pe in (
            (self.ax2, phi[1:, :-1, :-1]),
            (self.ay2, phi[:-1, 1:, :-1]),
            (self.az2, phi[:-1, :-1, 1:]),
        ):
            crossing = (pb < 0.0) != (pe < 0.0)
            pos = np.maximum(pb, pe)
            neg = np.minimum(pb, pe)
            theta = np.where(crossing, pos / np.maximum(pos - neg, 1e-300), 1.0)
            theta = np.clip(theta, 0.2, 1.0)
            arr[...] = np.where(crossing, 1.0 / theta ** 2, 1.0)
            vol_mean = vol_mean + pe
        # exterior volume fraction from the 8-corner mean and gradient scale
        corners = (
            phi[:-1, :-1, :-1] + phi[1:, :-1, :-1] + phi[:-1, 1:, :-1]
            + phi[:-1, :-1, 1:] + phi[1:, 1:, :-1] + phi[1:, :-1, 1:]
            + phi[:-1, 1:, 1:] + phi[1:, 1:, 1:]
        ) / 8.0
        gx = (phi[1:, :-1, :-1] - phi[:-1, :-1, :-1]) / h
        gy = (phi[:-1, 1:, :-1] - phi[:-1, :-1, :-1]) / h
        gz = (phi[:-1, :-1, 1:] - phi[:-1, :-1, :-1]) / h
        gnorm = np.sqrt(gx * gx + gy * gy + gz * gz)
        frac = np.clip(0.5 + corners / (np.maximum(gnorm, 1e-12) * h), 0.0, 1.0)
        near = np.abs(corners) < 2.0 * h * np.maximum(gnorm, 1e-12)
        self.vol = np.where(near, np.maximum(frac, 0.02), 1.0)
        self.vol[~self.active] = 0.0

    def set_dirichlet(self, capacity, p, n):
        self.u[self.node_type == NODE_INNER] = 1.0
        dead_in = (self.node_type == NODE_DEAD) & (self.r_nodes < self.R_out * 0.5)
        self.u[dead_in] = 1.0
        outer = self.node_type == NODE_OUTER
        self.u[outer] = _profile_values(self.r_nodes[outer], capacity, p, n)
        far_dead = (self.node_type == NODE_DEAD) & (self.r_nodes >= self.R_out * 0.5)
        self.u[far_dead] = _profile_values(self.r_nodes[far_dead], capacity, p, n)

    def init_from_profile(self, capacity, p, n):
        self.u[...] = _profile_values(self.r_nodes, capacity, p, n)
        self.set_dirichlet(capacity, p, n)

    def init_from_coarse(self, coarse):
        idx = [
            (self.origin[d] + self.h * np.arange(self.shape[d]) - coarse.origin[d])
            / coarse.h
            for d in range(3)
        ]
        gi = np.meshgrid(*idx, indexing="ij")
        coords = np.stack([g.ravel() for g in gi])
        self.u[...] = ndimage.map_coordinates(
            coarse.u, coords, order=1, mode="nearest"
        ).reshape(self.shape)

    def _weights_at(self, u, eps):
        self.kern.energy_weights(
            u, self.active, self.vol, self.ax2, self.ay2, self.az2,
            self.h, self.p, eps, self.w, self.e,
        )

    def energy(self, u, eps):
        self._weights_at(u, eps)
        return float(np.sum(self.e)) * self.h ** 3

    def unregularized_energy(self):
        e = self.energy(self.u, 0.0)
        self._refresh_axis_weights()
        return e

    def _refresh_axis_weights(self):
        np.multiply(self.w, self.ax2, out=self.wx)
        np.multiply(self.w, self.ay2, out=self.wy)
        np.multiply(self.w, self.az2, out=self.wz)

    def _cg(self, b, tol, maxiter):
        """Multigrid-preconditioned CG for the lagged diffusion operator."""
        kern, h, free = self.kern, self.h, self.free
        self.mg.update_weights(self.wx, self.wy, self.wz)
        x = np.zeros(self.shape)
        r = self._r
        np.copyto(r, b)
        z = self.mg.apply(r)
        pv = self._pv
        np.copyto(pv, z)
        rz = float(np.vdot(r, z))
        b_norm = math.sqrt(float(np.vdot(b, b)))
        if b_norm == 0.0 or rz <= 0.0:
            return np.zeros(self.shape), 0
        its = 0
        for its in range(1, maxiter + 1):
            kern.matvec(pv, self.wx, self.wy, self.wz, h, free, self._q)
            pq = float(np.vdot(pv, self._q))
            if pq <= 0.0:
                break
            alpha = rz / pq
            x += alpha * pv
            r -= alpha * self._q
            if math.sqrt(float(np.vdot(r, r))) <= tol * b_norm:
                break
            z = self.mg.apply(r)
            rz_new = float(np.vdot(r, z))
            if rz_new <= 0.0:
                break
            beta = rz_new / rz
            rz = rz_new
            pv *= beta
            pv += z
        return x, its

    def descend(self, eps, max_steps, cg_tol, cg_maxiter, rel_floor=1e-10,
                trace=None):
        """Monotone descent at fixed eps; returns (energy, resnorm, converged)."""
        kern, h = self.kern, self.h
        e_cur = self.energy(self.u, eps)
        self._refresh_axis_weights()
        resnorm = 0.0
        converged = False
        for _ in range(max_steps):
            kern.matvec(self.u, self.wx, self.wy, self.wz, h, self.free, self._r)
            rhs = -self._r
            resnorm = math.sqrt(float(np.vdot(rhs, rhs))) * self.p
            scale = max(abs(e_cur), 1e-300)
            delta, _ = self._cg(rhs, cg_tol, cg_maxiter)
            slope = float(np.vdot(rhs, delta))  # = delta^T A delta >= 0
            if slope <= 0.0:
                converged = True
                break
            t = 1.0
            accepted = False
            e_try = e_cur
            for _bt in range(25):
                np.multiply(delta, t, out=self._try)
                self._try += self.u
                e_try = self.energy(self._try, eps)
                if e_try <= e_cur - 1e-4 * t * slope * self.p:
                    accepted = True
                    break
                t *= 0.5
            if not accepted:
                self._weights_at(self.u, eps)
                self._refresh_axis_weights()
                converged = True
                break
            self.u, self._try = self._try, self.u
            self._refresh_axis_weights()
            rel = (e_cur - e_try) / scale
            e_cur = e_try
            if trace is not None:
                trace.append(e_cur)
            if rel < rel_floor:
                converged = True
                break
        else:
            converged = False
        e_cur = self.energy(self.u, eps)
        self._refresh_axis_weights()
        return e_cur, resnorm, converged


def _eps_schedule(h):
    eps0 = 0.1 / h
    eps_final = 1e-4 / h
    eps = []
    k = 0
    while eps0 * 2.0 ** (-k) > eps_final * 1.0000001:
        eps.append(eps0 * 2.0 ** (-k))
        k += 1
    eps.append(eps_final)
    return eps


def _capacity_from_level(level, p, n, cap_prev):
    e_unreg = level.unregularized_energy()
    tail = asymptotic_tail_energy(cap_prev, p, n, level.R_out)
    pref = ((p - 1.0) / (n - p)) ** (p - 1.0) / sphere_area(n)
    return pref * (e_unreg + tail)


def solve_exterior(domain, p, h, R_out, *, n_levels=3, far_field_passes=3,
                   max_steps=40, cg_maxiter=500, rel_floor=1e-10):
    """Solve the truncated exterior problem for the p-capacitary potential."""
    p = float(p)
    n = domain.dimension
    if n != 3:
        raise ValueError("the grid solver is implemented for n = 3 (use the radial oracle otherwise)")
    p_range_check(p, n)
    if R_out < 3.0 * domain.circumradius:
        raise ValueError(
            f"R_out={R_out:g} too small: need >= 3 x circumradius = "
            f"{3.0 * domain.circumradius:g}"
        )
    if h > domain.feature_size / 8.0 * 1.0000001:
        raise ValueError(
            f"grid spacing {h:g} does not resolve the smallest feature "
            f"{domain.feature_size:g} (need h <= feature/8)"
        )

    kern = get_kernels()
    t_start = time.time()
    eps_all = _eps_schedule(h)
    cap_est = domain.inscribed_radius ** (n - p)
    cap_trace = [cap_est]

    levels = []
    for li in range(n_levels - 1, -1, -1):
        lh = h * 2 ** li
        if round(R_out / lh) < 8:
            continue
        levels.append(_Level(domain, lh, R_out, p, kern))
    if not levels:
        raise ValueError("grid too coarse for the multilevel hierarchy")
    fine = levels[-1]

    # pass 1: anneal down the hierarchy with loose mid-anneal tolerances
    for li, lev in enumerate(levels):
        if li == 0:
            lev.init_from_profile(cap_est, p, n)
            stages = eps_all
        else:
            lev.init_from_coarse(levels[li - 1])
            lev.set_dirichlet(cap_est, p, n)
            stages = eps_all[-(3 + (len(levels) - 1 - li)):]
        for eps in stages:
            lev.descend(eps, 8, 1e-3, cg_maxiter, 1e-6)

    cap_est = _capacity_from_level(fine, p, n, cap_est)
    cap_trace.append(cap_est)

    # far-field re-matching passes on the finest level; only the last pass
    # runs to the contractual energy floor
    energy_trace = []
    final_energy = resnorm = 0.0
    converged = True
    for fp in range(1, far_field_passes):
        fine.set_dirichlet(cap_est, p, n)
        last_pass = fp == far_field_passes - 1
        record = energy_trace if last_pass else None
        fine.descend(eps_all[-2], 8, 1e-4, cg_maxiter, 1e-8, trace=record)
        final_energy, resnorm, conv = fine.descend(
            eps_all[-1], max_steps, 1e-8, cg_maxiter, rel_floor, trace=record
        )
        if last_pass:
            converged = conv
        cap_est = _capacity_from_level(fine, p, n, cap_est)
        cap_trace.append(cap_est)
    if not converged:
        raise NonConvergence(
            f"relative energy decrease stayed above {rel_floor:g} at the "
            f"iteration cap ({max_steps} steps)"
        )

    field_obj = PotentialField(
        origin=fine.origin,
        h=fine.h,
        shape=fine.shape,
        values=fine.u,
        node_type=fine.node_type,
        active=fine.active,
        p=p,
        epsilon=eps_all[-1],
        R_out=fine.R_out,
        energy=final_energy,
        residual_norm=resnorm,
        capacity_estimate=cap_est,
        energy_trace=energy_trace,
        capacity_trace=cap_trace,
        domain=domain,
        n=n,
        solve_seconds=time.time() - t_start,
        vol=fine.vol,
        ax2=fine.ax2,
        ay2=fine.ay2,
        az2=fine.az2,
    )
    viol = field_obj.max_principle_violation()
    if viol > 1e-6:
        warnings.warn(
            f"maximum principle violated by {viol:.3e} before projection",
            PrecisionLossWarning,
        )
    np.clip(field_obj.values, 0.0, 1.0, out=field_obj.values)
    return field_obj


# ---------------------------------------------------------------------------
# Derived quantities on a solved field
# ---------------------------------------------------------------------------

_PROBE_OFFSETS = (1.0, 2.0, 3.0)


def gradient_normal_probe(field, points, normals, base_values):
    """|Du| from a one-sided quadratic fit along outward normals.

    Samples u at points + t*n for t in (h, 2h, 3h) by trilinear interpolation,
    fits a quadratic through those and the known on-level value, and returns
    (-slope at 0, out_of_grid_flags).
    """
    pts = np.asarray(points, dtype=float)
    nrm = np.asarray(normals, dtype=float)
    h = field.h
    tgrid = np.array([0.0, *(_PROBE_OFFSETS)])
    design = np.column_stack([np.ones_like(tgrid), tgrid, tgrid ** 2])
    pinv = np.linalg.pinv(design)
    samples = np.empty((len(tgrid), len(pts)))
    samples[0] = base_values
    flags = np.zeros(len(pts), dtype=bool)
    lo = field.origin
    hi = field.origin + field.h * (np.array(field.shape) - 1)
    for row, t in enumerate(_PROBE_OFFSETS, start=1):
        probe = pts + (t * h) * nrm
        flags |= np.any((probe < lo) | (probe > hi), axis=1)
        samples[row] = sample_trilinear(field, probe)
    slope = pinv[1] @ samples / h
    return np.maximum(-slope, 0.0), flags


def boundary_gradient(field, mesh):
    """Per-vertex |Du| on the domain boundary (u = 1 there)."""
    base = np.ones(mesh.n_vertices)
    grad, flags = gradient_normal_probe(field, mesh.vertices, mesh.normal, base)
    return grad, flags


def field_energy(field):
    """Unregularized discrete p-Dirichlet energy plus the analytic tail."""
    kern = get_kernels()
    cshape = tuple(s - 1 for s in field.shape)
    w = np.empty(cshape)
    e = np.empty(cshape)
    kern.energy_weights(
        field.values, field.active, field.vol, field.ax2, field.ay2, field.az2,
        field.h, field.p, 0.0, w, e,
    )
    e_grid = float(np.sum(e)) * field.h ** 3
    tail = asymptotic_tail_energy(
        field.capacity_estimate, field.p, field.n, field.R_out
    )
    return e_grid + tail


def nodal_gradient_norm(field):
    """Central-difference |Du| at the nodes (one-sided on the box faces)."""
    gx, gy, gz = np.gradient(field.values, field.h)
    return np.sqrt(gx * gx + gy * gy + gz * gz)


# ---------------------------------------------------------------------------
# Binary field format: magic, dimension, origin, spacing, extents, values
# ---------------------------------------------------------------------------


def _write_grid_binary(path, magic, origin, spacing, values):
    arr = np.ascontiguousarray(values, dtype="<f8")
    dim = arr.ndim
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<q", dim))
        fh.write(np.asarray(origin, dtype="<f8").tobytes())
        fh.write(struct.pack("<d", spacing))
        fh.write(np.asarray(arr.shape, dtype="<i8").tobytes())
        fh.write(arr.tobytes())


def _read_grid_binary(path, magic):
    with open(path, "rb") as fh:
        got = fh.read(len(magic))
        if got != magic:
            raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
        dim = struct.unpack("<q", fh.read(8))[0]
        origin = np.frombuffer(fh.read(8 * dim), dtype="<f8").copy()
        spacing = struct.unpack("<d", fh.read(8))[0]
        shape = tuple(np.frombuffer(fh.read(8 * dim), dtype="<i8"))
        count = int(np.prod(shape))
        values = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
    return origin, spacing, values


def save_field(path, field):
    _write_grid_binary(path, b"PCAP1", field.origin, field.h, field.values)


def load_field(path):
    """Load a PCAP1 dump as a minimal PotentialField (values and grid only)."""
    origin, spacing, values = _read_grid_binary(path, b"PCAP1")
    shape = values.shape
    return PotentialField(
        origin=origin, h=spacing, shape=shape, values=values,
        node_type=np.zeros(shape, dtype=np.int8),
        active=np.zeros(tuple(s - 1 for s in shape), dtype=bool),
        p=float("nan"), epsilon=float("nan"),
        R_out=float(-origin[0]), energy=float("nan"),
        residual_norm=float("nan"), capacity_estimate=float("nan"),
    )
