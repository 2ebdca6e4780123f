"""Discrete curvature of triangle meshes.

The shape tensor h comes from a two-ring quadric fit in the vertex tangent
frame; H is its trace (sum of principal curvatures, H = 2/R on a radius-R
sphere with outward normal).  The cotangent mean-curvature normal is kept as
an independent cross-check (H_cross) and as the fallback where the fit is
rank-deficient.
"""

import numpy as np
from scipy import sparse

from ._kernels import get_kernels

__all__ = ["mesh_curvatures"]


def _cot_mean_curvature(mesh):
    """Cotangent-Laplacian mean curvature (sum convention, signed outward)."""
    verts = mesh.vertices
    faces = mesh.triangles
    nv = len(verts)
    hvec = np.zeros_like(verts)
    for c in range(3):
        i = faces[:, c]
        j = faces[:, (c + 1) % 3]
        k = faces[:, (c + 2) % 3]
        # cotangent at corner k, opposite edge (i, j)
        u = verts[i] - verts[k]
        v = verts[j] - verts[k]
        cross = np.linalg.norm(np.cross(u, v), axis=1)
        cross[cross < 1e-300] = 1e-300
        cot = np.einsum("ij,ij->i", u, v) / cross
        w = 0.5 * cot
        contrib = w[:, None] * (verts[i] - verts[j])
        np.add.at(hvec, i, contrib)
        np.add.at(hvec, j, -contrib)
    area = mesh.vertex_area.copy()
    area[area <= 0.0] = 1e-300
    # K = (1/(2A)) sum (cot a + cot b)(x_i - x_j) = H n for outward normals,
    # H the sum of principal curvatures; the half-edge sweep above already
    # accumulated half of each edge weight.
    hvec /= area[:, None]
    return np.einsum("ij,ij->i", hvec, mesh.normal)


def _two_ring_csr(faces, nv):
    i = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2],
                        faces[:, 1], faces[:, 2], faces[:, 0]])
    j = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0],
                        faces[:, 0], faces[:, 1], faces[:, 2]])
    adj = sparse.csr_matrix(
        (np.ones(len(i), dtype=np.int8), (i, j)), shape=(nv, nv)
    )
    adj.data[:] = 1
    two = adj + adj @ adj
    two.setdiag(0)
    two.eliminate_zeros()
    two.sort_indices()
    return two.indptr.astype(np.int64), two.indices.astype(np.int64)


def _tangent_frames(normals):
    nv = normals.shape[0]
    e1 = np.zeros_like(normals)
    pick = np.abs(normals[:, 0]) < 0.9
    e1[pick, 0] = 1.0
    e1[~pick, 1] = 1.0
    e1 -= np.einsum("ij,ij->i", e1, normals)[:, None] * normals
    e1 /= np.linalg.norm(e1, axis=1)[:, None]
    e2 = np.cross(normals, e1)
    frame = np.empty((nv, 2, 3))
    frame[:, 0] = e1
    frame[:, 1] = e2
    return frame


def mesh_curvatures(mesh):
    """Populate H, h, ring_h on `mesh` in place and return it."""
    kern = get_kernels()
    nv = mesh.n_vertices
    indptr, indices = _two_ring_csr(mesh.triangles, nv)
    frame = _tangent_frames(mesh.normal)
    coeffs = np.zeros((nv, 5))
    flags = np.zeros(nv, dtype=np.int8)
    kern.quadric_fit(
        np.ascontiguousarray(mesh.vertices, dtype=np.float64),
        np.ascontiguousarray(mesh.normal, dtype=np.float64),
        np.ascontiguousarray(frame[:, 0], dtype=np.float64),
        np.ascontiguousarray(frame[:, 1], dtype=np.float64),
        indptr, indices, coeffs, flags,
    )

    fx, fy = coeffs[:, 0], coeffs[:, 1]
    fxx, fxy, fyy = coeffs[:, 2], coeffs[:, 3], coeffs[:, 4]
    # Weingarten map of the height graph, with zeta along the outward normal:
    # h = -(I + grad f grad f^T)^(-1) Hess f / sqrt(1 + |grad f|^2)
    g2 = fx * fx + fy * fy
    s = np.sqrt(1.0 + g2)
    det_metric = 1.0 + g2
    inv00 = (1.0 + fy * fy) / det_metric
    inv01 = -(fx * fy) / det_metric
    inv11 = (1.0 + fx * fx) / det_metric
    h = np.empty((nv, 2, 2))
    h[:, 0, 0] = -(inv00 * fxx + inv01 * fxy) / s
    h[:, 0, 1] = -(inv00 * fxy + inv01 * fyy) / s
    h[:, 1, 0] = -(inv01 * fxx + inv11 * fxy) / s
    h[:, 1, 1] = -(inv01 * fxy + inv11 * fyy) / s
    # symmetrise the mixed entry (the exact Weingarten map is self-adjoint in
    # the metric; the Euclidean-frame representation can drift slightly)
    off = 0.5 * (h[:, 0, 1] + h[:, 1, 0])
    h[:, 0, 1] = off
    h[:, 1, 0] = off

    h_cross = _cot_mean_curvature(mesh)
    fb = flags != 0
    if np.any(fb):
        h[fb] = 0.0
        h[fb, 0, 0] = 0.5 * h_cross[fb]
        h[fb, 1, 1] = 0.5 * h_cross[fb]

    H = h[:, 0, 0] + h[:, 1, 1]
    ring = h.copy()
    ring[:, 0, 0] -= 0.5 * H
    ring[:, 1, 1] -= 0.5 * H

    mesh.H = H
    mesh.h = h
    mesh.ring_h = ring
    mesh.tangent_frame = frame
    mesh.H_cross = h_cross
    mesh.fit_fallback = fb
    return mesh
