"""Hot numeric kernels, in two interchangeable flavours.

Each kernel exists as a numba @njit loop and as a vectorized numpy
implementation with identical semantics (up to float rounding).  The active
set is picked via :func:`get_kernels`, honouring the PCAPLAB_BACKEND env
flag.  Layout conventions shared by all grid kernels:

* nodal arrays have shape (nx, ny, nz); cell arrays have shape
  (nx-1, ny-1, nz-1) and are anchored at the cell's base node,
* the discrete gradient of a nodal field on cell (i,j,k) is the forward
  difference triple using nodes (i,j,k), (i+1,j,k), (i,j+1,k), (i,j,k+1),
* a node participates in a backward cell only where that cell exists, so
  every backward read carries the full bounds guard.

Node kind codes for the TV solver: 0 = free, 1 = obstacle (pinned to 1),
2 = outer border (pinned to 0).
"""

import math
from types import SimpleNamespace

import numpy as np

from .backend import njit, prange, requested_backend

# ---------------------------------------------------------------------------
# p-Dirichlet energy kernels (3D)
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True, fastmath=False)
def _nb_energy_weights(u, active, vol, ax2, ay2, az2, h, p, eps, w, e):
    nc0, nc1, nc2 = w.shape
    inv_h2 = 1.0 / (h * h)
    e2 = eps * eps
    ex = 0.5 * p - 1.0
    for i in prange(nc0):
        for j in range(nc1):
            for k in range(nc2):
                if active[i, j, k]:
                    dx = u[i + 1, j, k] - u[i, j, k]
                    dy = u[i, j + 1, k] - u[i, j, k]
                    dz = u[i, j, k + 1] - u[i, j, k]
                    t = (
                        ax2[i, j, k] * dx * dx
                        + ay2[i, j, k] * dy * dy
                        + az2[i, j, k] * dz * dz
                    ) * inv_h2 + e2
                    if t > 0.0:
                        s = t ** ex * vol[i, j, k]
                        w[i, j, k] = s
                        e[i, j, k] = s * t
                    else:
                        w[i, j, k] = 0.0
                        e[i, j, k] = 0.0
                else:
                    w[i, j, k] = 0.0
                    e[i, j, k] = 0.0


def _np_energy_weights(u, active, vol, ax2, ay2, az2, h, p, eps, w, e):
    base = u[:-1, :-1, :-1]
    dx = u[1:, :-1, :-1] - base
    dy = u[:-1, 1:, :-1] - base
    dz = u[:-1, :-1, 1:] - base
    t = (ax2 * dx * dx + ay2 * dy * dy + az2 * dz * dz) / (h * h) + eps * eps
    with np.errstate(divide="ignore"):
        s = np.where(t > 0.0, t, 1.0) ** (0.5 * p - 1.0)
    s[t <= 0.0] = 0.0
    s *= vol
    np.multiply(s, active, out=w)
    np.multiply(w, t, out=e)


@njit(cache=True, parallel=True, fastmath=False)
def _nb_matvec(x, wx, wy, wz, h, free, out):
    nx, ny, nz = x.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                if not free[i, j, k]:
                    out[i, j, k] = 0.0
                    continue
                bi = i < nx - 1
                bj = j < ny - 1
                bk = k < nz - 1
                acc = 0.0
                if bi and bj and bk:
                    xc = x[i, j, k]
                    acc += wx[i, j, k] * (xc - x[i + 1, j, k])
                    acc += wy[i, j, k] * (xc - x[i, j + 1, k])
                    acc += wz[i, j, k] * (xc - x[i, j, k + 1])
                if i > 0 and bj and bk:
                    acc += wx[i - 1, j, k] * (x[i, j, k] - x[i - 1, j, k])
                if j > 0 and bi and bk:
                    acc += wy[i, j - 1, k] * (x[i, j, k] - x[i, j - 1, k])
                if k > 0 and bi and bj:
                    acc += wz[i, j, k - 1] * (x[i, j, k] - x[i, j, k - 1])
                out[i, j, k] = h * acc


def _np_matvec(x, wx, wy, wz, h, free, out):
    out.fill(0.0)
    base = x[:-1, :-1, :-1]
    tx = wx * (x[1:, :-1, :-1] - base)
    ty = wy * (x[:-1, 1:, :-1] - base)
    tz = wz * (x[:-1, :-1, 1:] - base)
    out[:-1, :-1, :-1] -= tx + ty + tz
    out[1:, :-1, :-1] += tx
    out[:-1, 1:, :-1] += ty
    out[:-1, :-1, 1:] += tz
    out *= h
    out[~free] = 0.0


@njit(cache=True, parallel=True, fastmath=False)
def _nb_diagonal(wx, wy, wz, h, free, out):
    nx, ny, nz = out.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                if not free[i, j, k]:
                    out[i, j, k] = 1.0
                    continue
                bi = i < nx - 1
                bj = j < ny - 1
                bk = k < nz - 1
                acc = 0.0
                if bi and bj and bk:
                    acc += wx[i, j, k] + wy[i, j, k] + wz[i, j, k]
                if i > 0 and bj and bk:
                    acc += wx[i - 1, j, k]
                if j > 0 and bi and bk:
                    acc += wy[i, j - 1, k]
                if k > 0 and bi and bj:
                    acc += wz[i, j, k - 1]
                out[i, j, k] = h * acc if acc > 0.0 else 1.0


def _np_diagonal(wx, wy, wz, h, free, out):
    out.fill(0.0)
    out[:-1, :-1, :-1] += wx + wy + wz
    out[1:, :-1, :-1] += wx
    out[:-1, 1:, :-1] += wy
    out[:-1, :-1, 1:] += wz
    out *= h
    out[out <= 0.0] = 1.0
    out[~free] = 1.0


# ---------------------------------------------------------------------------
# Total-variation obstacle kernels: PDHG sweeps in 3D and 2D
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True, fastmath=False)
def _nb_tv_dual_3d(vbar, px, py, pz, sigma):
    nc0, nc1, nc2 = px.shape
    for i in prange(nc0):
        for j in range(nc1):
            for k in range(nc2):
                b = vbar[i, j, k]
                ax = px[i, j, k] + sigma * (vbar[i + 1, j, k] - b)
                ay = py[i, j, k] + sigma * (vbar[i, j + 1, k] - b)
                az = pz[i, j, k] + sigma * (vbar[i, j, k + 1] - b)
                nrm = math.sqrt(ax * ax + ay * ay + az * az)
                if nrm > 1.0:
                    s = 1.0 / nrm
                    ax *= s
                    ay *= s
                    az *= s
                px[i, j, k] = ax
                py[i, j, k] = ay
                pz[i, j, k] = az


def _np_tv_dual_3d(vbar, px, py, pz, sigma):
    base = vbar[:-1, :-1, :-1]
    px += sigma * (vbar[1:, :-1, :-1] - base)
    py += sigma * (vbar[:-1, 1:, :-1] - base)
    pz += sigma * (vbar[:-1, :-1, 1:] - base)
    nrm = np.sqrt(px * px + py * py + pz * pz)
    np.maximum(nrm, 1.0, out=nrm)
    px /= nrm
    py /= nrm
    pz /= nrm


@njit(cache=True, parallel=True, fastmath=False)
def _nb_tv_primal_3d(v, vbar, px, py, pz, kind, tau):
    nx, ny, nz = v.shape
    for i in prange(nx):
        for j in range(ny):
            for k in range(nz):
                kd = kind[i, j, k]
                if kd == 1:
                    v[i, j, k] = 1.0
                    vbar[i, j, k] = 1.0
                    continue
                if kd == 2:
                    v[i, j, k] = 0.0
                    vbar[i, j, k] = 0.0
                    continue
                bi = i < nx - 1
                bj = j < ny - 1
                bk = k < nz - 1
                t = 0.0
                if bi and bj and bk:
                    t -= px[i, j, k] + py[i, j, k] + pz[i, j, k]
                if i > 0 and bj and bk:
                    t += px[i - 1, j, k]
                if j > 0 and bi and bk:
                    t += py[i, j - 1, k]
                if k > 0 and bi and bj:
                    t += pz[i, j, k - 1]
                vn = v[i, j, k] - tau * t
                if vn < 0.0:
                    vn = 0.0
                elif vn > 1.0:
                    vn = 1.0
                vbar[i, j, k] = 2.0 * vn - v[i, j, k]
                v[i, j, k] = vn


def _np_tv_primal_3d(v, vbar, px, py, pz, kind, tau):
    t = np.zeros_like(v)
    t[:-1, :-1, :-1] -= px + py + pz
    t[1:, :-1, :-1] += px
    t[:-1, 1:, :-1] += py
    t[:-1, :-1, 1:] += pz
    vn = np.clip(v - tau * t, 0.0, 1.0)
    vn[kind == 1] = 1.0
    vn[kind == 2] = 0.0
    np.subtract(2.0 * vn, v, out=vbar)
    v[...] = vn


@njit(cache=True, parallel=True, fastmath=False)
def _nb_tv_dual_2d(vbar, px, py, sigma):
    nc0, nc1 = px.shape
    for i in prange(nc0):
        for j in range(nc1):
            b = vbar[i, j]
            ax = px[i, j] + sigma * (vbar[i + 1, j] - b)
            ay = py[i, j] + sigma * (vbar[i, j + 1] - b)
            nrm = math.sqrt(ax * ax + ay * ay)
            if nrm > 1.0:
                s = 1.0 / nrm
                ax *= s
                ay *= s
            px[i, j] = ax
            py[i, j] = ay


def _np_tv_dual_2d(vbar, px, py, sigma):
    base = vbar[:-1, :-1]
    px += sigma * (vbar[1:, :-1] - base)
    py += sigma * (vbar[:-1, 1:] - base)
    nrm = np.sqrt(px * px + py * py)
    np.maximum(nrm, 1.0, out=nrm)
    px /= nrm
    py /= nrm


@njit(cache=True, parallel=True, fastmath=False)
def _nb_tv_primal_2d(v, vbar, px, py, kind, tau):
    nx, ny = v.shape
    for i in prange(nx):
        for j in range(ny):
            kd = kind[i, j]
            if kd == 1:
                v[i, j] = 1.0
                vbar[i, j] = 1.0
                continue
            if kd == 2:
                v[i, j] = 0.0
                vbar[i, j] = 0.0
                continue
            bi = i < nx - 1
            bj = j < ny - 1
            t = 0.0
            if bi and bj:
                t -= px[i, j] + py[i, j]
            if i > 0 and bj:
                t += px[i - 1, j]
            if j > 0 and bi:
                t += py[i, j - 1]
            vn = v[i, j] - tau * t
            if vn < 0.0:
                vn = 0.0
            elif vn > 1.0:
                vn = 1.0
            vbar[i, j] = 2.0 * vn - v[i, j]
            v[i, j] = vn


def _np_tv_primal_2d(v, vbar, px, py, kind, tau):
    t = np.zeros_like(v)
    t[:-1, :-1] -= px + py
    t[1:, :-1] += px
    t[:-1, 1:] += py
    vn = np.clip(v - tau * t, 0.0, 1.0)
    vn[kind == 1] = 1.0
    vn[kind == 2] = 0.0
    np.subtract(2.0 * vn, v, out=vbar)
    v[...] = vn


# ---------------------------------------------------------------------------
# Two-ring quadric fit for the shape operator
# ---------------------------------------------------------------------------
# Model in the vertex tangent frame, coordinates scaled by the mean
# neighbour distance r:  zeta ~ b0 + b1*xi + b2*eta + b3*xi^2 + b4*xi*eta
# + b5*eta^2.  The returned coefficients are unscaled back to length units:
# out[v] = (fx, fy, fxx, fxy, fyy) of the height function.


@njit(cache=True, parallel=True, fastmath=False)
def _nb_quadric_fit(verts, normals, e1, e2, indptr, indices, coeffs, flags):
    nv = verts.shape[0]
    for vi in prange(nv):
        lo = indptr[vi]
        hi = indptr[vi + 1]
        nn = hi - lo
        if nn < 8:
            flags[vi] = 1
            continue
        rsum = 0.0
        for m in range(lo, hi):
            w = indices[m]
            dx = verts[w, 0] - verts[vi, 0]
            dy = verts[w, 1] - verts[vi, 1]
            dz = verts[w, 2] - verts[vi, 2]
            rsum += math.sqrt(dx * dx + dy * dy + dz * dz)
        r = rsum / nn
        if r <= 0.0:
            flags[vi] = 1
            continue
        g = np.zeros((6, 6))
        b = np.zeros(6)
        row = np.empty(6)
        for m in range(lo, hi):
            w = indices[m]
            dx = verts[w, 0] - verts[vi, 0]
            dy = verts[w, 1] - verts[vi, 1]
            dz = verts[w, 2] - verts[vi, 2]
            xi = (dx * e1[vi, 0] + dy * e1[vi, 1] + dz * e1[vi, 2]) / r
            eta = (dx * e2[vi, 0] + dy * e2[vi, 1] + dz * e2[vi, 2]) / r
            zeta = (dx * normals[vi, 0] + dy * normals[vi, 1] + dz * normals[vi, 2]) / r
            row[0] = 1.0
            row[1] = xi
            row[2] = eta
            row[3] = xi * xi
            row[4] = xi * eta
            row[5] = eta * eta
            for a in range(6):
                b[a] += row[a] * zeta
                for c in range(6):
                    g[a, c] += row[a] * row[c]
        sv = np.linalg.svd(g, False)[1]
        if sv[5] < 1e-10 * sv[0]:
            flags[vi] = 1
            continue
        beta = np.linalg.solve(g, b)
        coeffs[vi, 0] = beta[1]
        coeffs[vi, 1] = beta[2]
        coeffs[vi, 2] = 2.0 * beta[3] / r
        coeffs[vi, 3] = beta[4] / r
        coeffs[vi, 4] = 2.0 * beta[5] / r
        flags[vi] = 0


def _np_quadric_fit(verts, normals, e1, e2, indptr, indices, coeffs, flags):
    nv = verts.shape[0]
    for vi in range(nv):
        nbr = indices[indptr[vi]:indptr[vi + 1]]
        if nbr.size < 8:
            flags[vi] = 1
            continue
        d = verts[nbr] - verts[vi]
        r = float(np.mean(np.linalg.norm(d, axis=1)))
        if r <= 0.0:
            flags[vi] = 1
            continue
        xi = d @ e1[vi] / r
        eta = d @ e2[vi] / r
        zeta = d @ normals[vi] / r
        a = np.column_stack([np.ones_like(xi), xi, eta, xi * xi, xi * eta, eta * eta])
        g = a.T @ a
        sv = np.linalg.svd(g, compute_uv=False)
        if sv[-1] < 1e-10 * sv[0]:
            flags[vi] = 1
            continue
        beta = np.linalg.solve(g, a.T @ zeta)
        coeffs[vi] = (beta[1], beta[2], 2.0 * beta[3] / r, beta[4] / r, 2.0 * beta[5] / r)
        flags[vi] = 0


# ---------------------------------------------------------------------------
# Backend namespaces
# ---------------------------------------------------------------------------

_NUMBA = SimpleNamespace(
    name="numba",
    energy_weights=_nb_energy_weights,
    matvec=_nb_matvec,
    diagonal=_nb_diagonal,
    tv_dual_3d=_nb_tv_dual_3d,
    tv_primal_3d=_nb_tv_primal_3d,
    tv_dual_2d=_nb_tv_dual_2d,
    tv_primal_2d=_nb_tv_primal_2d,
    quadric_fit=_nb_quadric_fit,
)

_NUMPY = SimpleNamespace(
    name="numpy",
    energy_weights=_np_energy_weights,
    matvec=_np_matvec,
    diagonal=_np_diagonal,
    tv_dual_3d=_np_tv_dual_3d,
    tv_primal_3d=_np_tv_primal_3d,
    tv_dual_2d=_np_tv_dual_2d,
    tv_primal_2d=_np_tv_primal_2d,
    quadric_fit=_np_quadric_fit,
)

_ACTIVE = None


def get_kernels(name=None):
    """Return the kernel namespace for `name` (default: env-selected)."""
    global _ACTIVE
    if name is None:
        if _ACTIVE is None:
            _ACTIVE = _NUMBA if requested_backend() == "numba" else _NUMPY
        return _ACTIVE
    if name == "numba":
        return _NUMBA
    if name == "numpy":
        return _NUMPY
    raise ValueError(f"unknown kernel backend {name!r}")
