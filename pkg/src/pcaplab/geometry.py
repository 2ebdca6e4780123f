"""Implicit test domains, boundary meshing and discrete surface integrals.

Domains are level-set functions (negative inside, positive outside) with a
declared bounding box and feature size.  Boundaries are extracted by marching
cubes into closed oriented triangle meshes carrying per-vertex mixed areas
and outward normals; curvature fields are filled in by
:mod:`pcaplab.curvature`.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from skimage import measure

__all__ = [
    "sphere_area",
    "ball_volume",
    "ImplicitDomain",
    "SurfaceMesh",
    "MeshExtractionError",
    "make_shape",
    "extract_boundary_mesh",
    "boundary_integral",
    "gauss_bonnet_check",
    "read_off",
    "write_off",
    "domain_volume",
]


def sphere_area(n):
    """|S^(n-1)| = 2 pi^(n/2) / Gamma(n/2)."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


def ball_volume(n):
    """|B^n| = |S^(n-1)| / n."""
    return sphere_area(n) / n


class MeshExtractionError(RuntimeError):
    """Marching cubes produced an open or non-manifold mesh."""


@dataclass
class ImplicitDomain:
    """Bounded open set given by a smooth level-set function.

    levelset maps an (N, dim) array of points to (N,) values, negative
    inside the set, zero on the boundary, positive outside.
    """

    levelset: callable
    dimension: int
    bounding_box: np.ndarray          # (dim, 2)
    shape_tag: str
    feature_size: float               # smallest geometric feature (length)
    interior_seed: np.ndarray         # a point with levelset < 0
    circumradius: float               # radius of a centred ball containing the set
    inscribed_radius: float           # radius of some ball inside the set
    margin: float                     # clearance between zero set and the box
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bounding_box = np.asarray(self.bounding_box, dtype=float)
        self.interior_seed = np.asarray(self.interior_seed, dtype=float)
        self._validate()

    def _validate(self):
        seed_val = float(self.levelset(self.interior_seed[None, :])[0])
        if not seed_val < 0.0:
            raise ValueError(
                f"{self.shape_tag}: interior seed has levelset {seed_val:g} >= 0"
            )
        for face in self._face_samples():
            vals = self.levelset(face)
            if not np.all(vals > 0.0):
                raise ValueError(
                    f"{self.shape_tag}: levelset not positive on bounding-box faces"
                )

    def _face_samples(self, m=7):
        lo, hi = self.bounding_box[:, 0], self.bounding_box[:, 1]
        axes = [np.linspace(lo[d], hi[d], m) for d in range(self.dimension)]
        for d in range(self.dimension):
            for bound in (lo[d], hi[d]):
                grids = np.meshgrid(
                    *[axes[a] for a in range(self.dimension) if a != d], indexing="ij"
                )
                pts = np.empty((grids[0].size, self.dimension))
                others = [a for a in range(self.dimension) if a != d]
                for a, g in zip(others, grids):
                    pts[:, a] = g.ravel()
                pts[:, d] = bound
                yield pts

    def diameter(self):
        return 2.0 * self.circumradius


def _smooth_min(parts, width):
    """Log-sum-exp smooth union of level-set values, stacked on axis 0."""
    stack = np.stack(parts, axis=0)
    m = np.min(stack, axis=0)
    return m - width * np.log(np.sum(np.exp(-(stack - m) / width), axis=0))


def _capsule_levelset(points, half_length, radius):
    """Distance to a capsule along the x-axis minus its radius."""
    x = np.abs(points[:, 0]) - half_length
    np.maximum(x, 0.0, out=x)
    rho2 = np.sum(points[:, 1:] ** 2, axis=1)
    return np.sqrt(x * x + rho2) - radius


def _rounded_box_levelset(points, center, half, rounding):
    q = np.abs(points - center) - (half - rounding)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0.0)
    return outside + inside - rounding


def make_shape(shape_tag, **params):
    """Build one of the named implicit test domains.

    Tags: ball(radius), ellipsoid(a, b, c), dumbbell(half_separation,
    bulb_radius, neck_radius, bulb_aspect), solid-torus(major_radius,
    minor_radius), L-shape-2d(), custom-mesh(path).
    """
    tag = shape_tag.replace("_", "-").lower()
    if tag == "ball":
        return _make_ball(**params)
    if tag == "ellipsoid":
        return _make_ellipsoid(**params)
    if tag == "dumbbell":
        return _make_dumbbell(**params)
    if tag in ("solid-torus", "torus"):
        return _make_torus(**params)
    if tag == "l-shape-2d":
        return _make_lshape(**params)
    if tag == "custom-mesh":
        return _make_custom_mesh(**params)
    raise ValueError(f"unknown shape tag {shape_tag!r}")


def _make_ball(radius=1.0, dimension=3):
    if radius <= 0.0:
        raise ValueError("ball radius must be positive")
    r = float(radius)

    def levelset(pts):
        return np.linalg.norm(pts, axis=1) - r

    box = np.array([[-2.0 * r, 2.0 * r]] * dimension)
    return ImplicitDomain(
        levelset, dimension, box, "ball", r, np.zeros(dimension), r, r, r,
        params={"radius": r},
    )


def _make_ellipsoid(a=1.5, b=1.0, c=0.75):
    axes = np.array([a, b, c], dtype=float)
    if np.any(axes <= 0.0):
        raise ValueError("ellipsoid semi-axes must be positive")

    def levelset(pts):
        return np.sqrt(np.sum((pts / axes) ** 2, axis=1)) - 1.0

    margin = 0.5 * axes.max()
    box = np.column_stack([-(axes + margin), axes + margin])
    # smallest feature: curvature radius at the end of the longest axis
    feature = float(np.min(axes) ** 2 / np.max(axes))
    return ImplicitDomain(
        levelset, 3, box, "ellipsoid", feature, np.zeros(3),
        float(axes.max()), float(axes.min()), margin,
        params={"a": a, "b": b, "c": c},
    )


def _make_dumbbell(half_separation=1.5, bulb_radius=1.0, neck_radius=0.3,
                   bulb_aspect=1.0):
    c = float(half_separation)
    rb = float(bulb_radius)
    rn = float(neck_radius)
    mu = float(bulb_aspect)
    if min(c, rb, rn, mu) <= 0.0:
        raise ValueError("dumbbell parameters must be positive")
    if rn >= rb:
        raise ValueError("dumbbell neck radius must be smaller than bulb radius")
    width = 0.5 * rn  # smooth-min blend width
    ax = mu * rb      # bulb semi-axis along the separation direction
    semi = np.array([ax, rb, rb])
    neck_half = c  # capsule reaches the bulb centres

    def levelset(pts):
        d1 = pts.copy()
        d1[:, 0] -= c
        d2 = pts.copy()
        d2[:, 0] += c
        f1 = np.sqrt(np.sum((d1 / semi) ** 2, axis=1)) - 1.0
        f2 = np.sqrt(np.sum((d2 / semi) ** 2, axis=1)) - 1.0
        fn = _capsule_levelset(pts, neck_half, rn)
        return _smooth_min([f1, f2, fn], width)

    circum = max(c + ax, rb)
    ext = np.array([c + ax, rb, rb])
    margin = 0.6 * circum
    box = np.column_stack([-(ext + margin), ext + margin])
    # rim of an oblate bulb has curvature radius ~ (mu*rb)^2 / rb
    feature = min(rn, ax * ax / rb) if mu < 1.0 else rn
    seed = np.array([c, 0.0, 0.0])
    return ImplicitDomain(
        levelset, 3, box, "dumbbell", feature, seed, circum, min(ax, rb) * 0.95,
        margin,
        params={"half_separation": c, "bulb_radius": rb, "neck_radius": rn,
                "bulb_aspect": mu},
    )


def _make_torus(major_radius=2.0, minor_radius=0.5):
    R = float(major_radius)
    r = float(minor_radius)
    if r <= 0.0 or R <= 0.0:
        raise ValueError("torus radii must be positive")
    if r >= R:
        raise ValueError("torus minor radius must be smaller than major radius")

    def levelset(pts):
        rho = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2)
        return np.sqrt((rho - R) ** 2 + pts[:, 2] ** 2) - r

    ext = np.array([R + r, R + r, r])
    margin = 0.5 * (R + r)
    box = np.column_stack([-(ext + margin), ext + margin])
    seed = np.array([R, 0.0, 0.0])
    return ImplicitDomain(
        levelset, 3, box, "solid-torus", r, seed, R + r, r, margin,
        params={"major_radius": R, "minor_radius": r},
    )


def _make_lshape(arm_length=2.0, arm_width=1.0, rounding=0.02):
    L = float(arm_length)
    w = float(arm_width)
    if not 0.0 < w < L:
        raise ValueError("L-shape needs 0 < arm_width < arm_length")
    rr = float(rounding)
    c1 = np.array([L / 2, w / 2])
    h1 = np.array([L / 2, w / 2])
    c2 = np.array([w / 2, L / 2])
    h2 = np.array([w / 2, L / 2])

    def levelset(pts):
        f1 = _rounded_box_levelset(pts, c1, h1, rr)
        f2 = _rounded_box_levelset(pts, c2, h2, rr)
        return _smooth_min([f1, f2], rr)

    diam = math.hypot(L, L)
    margin = 0.45 * diam
    box = np.array([[-margin, L + margin], [-margin, L + margin]])
    seed = np.array([w / 2, w / 2])
    return ImplicitDomain(
        levelset, 2, box, "L-shape-2d", w, seed, diam / 2, w / 2, margin,
        params={"arm_length": L, "arm_width": w},
    )


def _make_custom_mesh(path=None, margin_factor=0.3):
    verts, faces = read_off(path)
    mesh = _build_mesh(verts, faces)
    # angle-weighted pseudo-normal sign gives an approximate signed distance
    tree = None
    try:
        from scipy.spatial import cKDTree
        tree = cKDTree(mesh.vertices)
    except Exception as exc:  # pragma: no cover
        raise RuntimeError("custom-mesh domains need scipy") from exc
    normals = mesh.normal

    def levelset(pts):
        dist, idx = tree.query(pts)
        diff = pts - mesh.vertices[idx]
        sign = np.sign(np.einsum("ij,ij->i", diff, normals[idx]))
        sign[sign == 0.0] = 1.0
        return sign * dist

    ext = np.abs(mesh.vertices).max(axis=0)
    margin = margin_factor * float(ext.max())
    box = np.column_stack([-(ext + margin), ext + margin])
    seed = mesh.vertices.mean(axis=0)
    edges = mesh.vertices[mesh.triangles[:, 1]] - mesh.vertices[mesh.triangles[:, 0]]
    feature = 4.0 * float(np.mean(np.linalg.norm(edges, axis=1)))
    circum = float(np.linalg.norm(mesh.vertices, axis=1).max())
    return ImplicitDomain(
        levelset, 3, box, "custom-mesh", feature, seed, circum, feature, margin,
        params={"path": str(path)},
    )


# ---------------------------------------------------------------------------
# Surface meshes
# ---------------------------------------------------------------------------


@dataclass
class SurfaceMesh:
    vertices: np.ndarray        # (V, 3)
    triangles: np.ndarray       # (F, 3) int, outward orientation
    vertex_area: np.ndarray     # (V,) barycentric mixed area
    normal: np.ndarray          # (V, 3) outward unit normals
    H: np.ndarray = None        # (V,) mean curvature, sum convention
    h: np.ndarray = None        # (V, 2, 2) shape tensor in the tangent frame
    ring_h: np.ndarray = None   # (V, 2, 2) traceless part of h
    tangent_frame: np.ndarray = None  # (V, 2, 3)
    H_cross: np.ndarray = None  # (V,) cotangent-Laplacian cross-check
    fit_fallback: np.ndarray = None   # (V,) bool, quadric fit fell back

    @property
    def area(self):
        return float(self.vertex_area.sum())

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_edges(self):
        e = np.concatenate([
            self.triangles[:, [0, 1]],
            self.triangles[:, [1, 2]],
            self.triangles[:, [2, 0]],
        ])
        return np.unique(np.sort(e, axis=1), axis=0).shape[0]

    @property
    def euler_characteristic(self):
        return self.n_vertices - self.n_edges + self.triangles.shape[0]


def _triangle_data(verts, faces):
    p0 = verts[faces[:, 0]]
    p1 = verts[faces[:, 1]]
    p2 = verts[faces[:, 2]]
    cr = np.cross(p1 - p0, p2 - p0)
    twice_area = np.linalg.norm(cr, axis=1)
    return cr, twice_area


def _build_mesh(verts, faces):
    cr, ta = _triangle_data(verts, faces)
    vertex_area = np.zeros(len(verts))
    third = ta / 6.0  # barycentric third of each triangle area
    for c in range(3):
        np.add.at(vertex_area, faces[:, c], third)
    vnorm = np.zeros_like(verts)
    for c in range(3):
        np.add.at(vnorm, faces[:, c], cr / 2.0)
    lens = np.linalg.norm(vnorm, axis=1)
    lens[lens == 0.0] = 1.0
    vnorm /= lens[:, None]
    return SurfaceMesh(verts, faces, vertex_area, vnorm)


def _check_closed_manifold(faces):
    """Every undirected edge must appear in exactly two opposite half-edges."""
    half = np.concatenate([
        faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]],
    ])
    lo = np.minimum(half[:, 0], half[:, 1])
    hi = np.maximum(half[:, 0], half[:, 1])
    flip = half[:, 0] > half[:, 1]
    key = lo.astype(np.int64) * (faces.max() + 1) + hi
    order = np.argsort(key, kind="stable")
    key_s = key[order]
    flip_s = flip[order]
    uniq, start = np.unique(key_s, return_index=True)
    counts = np.diff(np.append(start, key_s.size))
    if np.any(counts != 2):
        return False
    # the two half-edges of a pair must run in opposite directions
    paired = flip_s[start] ^ flip_s[np.minimum(start + 1, key_s.size - 1)]
    return bool(np.all(paired))


def extract_boundary_mesh(domain, resolution):
    """Triangulate the zero set of `domain` at grid spacing `resolution`."""
    if domain.dimension != 3:
        raise ValueError("mesh extraction is implemented for n = 3 only")
    h = float(resolution)
    if h > domain.feature_size / 8.0:
        raise ValueError(
            f"resolution {h:g} too coarse: must be <= feature/8 = "
            f"{domain.feature_size / 8.0:g} for {domain.shape_tag}"
        )
    lo = domain.bounding_box[:, 0]
    hi = domain.bounding_box[:, 1]
    ns = [int(math.ceil((hi[d] - lo[d]) / h)) + 1 for d in range(3)]
    axes = [lo[d] + h * np.arange(ns[d]) for d in range(3)]
    grid = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([g.ravel() for g in grid])
    vol = domain.levelset(pts).reshape(ns)
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=(h, h, h))
    verts = verts + lo
    faces = np.ascontiguousarray(faces, dtype=np.int64)

    # orient all faces outward using the level-set gradient at centroids
    cr, _ = _triangle_data(verts, faces)
    cent = verts[faces].mean(axis=1)
    step = 0.25 * h
    grad = np.zeros_like(cent)
    for d in range(3):
        off = np.zeros(3)
        off[d] = step
        grad[:, d] = (domain.levelset(cent + off) - domain.levelset(cent - off)) / (2 * step)
    flip = np.einsum("ij,ij->i", cr, grad) < 0.0
    faces[flip] = faces[flip][:, ::-1]

    if not _check_closed_manifold(faces):
        raise MeshExtractionError(
            f"{domain.shape_tag}: extracted mesh is open or non-manifold at h={h:g}"
        )
    return _build_mesh(verts, faces)


def boundary_integral(mesh, integrand):
    """Sum of integrand * vertex_area; linear in the integrand."""
    f = np.asarray(integrand, dtype=float)
    if f.shape != mesh.vertex_area.shape:
        raise ValueError(
            f"integrand has shape {f.shape}, expected {mesh.vertex_area.shape}"
        )
    return float(np.dot(f, mesh.vertex_area))


@dataclass
class GaussBonnetResult:
    integral: float            # integral of (H^2 - |h|^2), twice the Gauss curvature
    chi_curvature: float
    chi_combinatorial: int
    consistent: bool


def gauss_bonnet_check(mesh, tol=0.2):
    """Check integral(H^2 - |h|^2) = 4 pi chi against the combinatorial chi."""
    if mesh.H is None or mesh.h is None:
        raise ValueError("curvature fields are not populated")
    h2 = np.einsum("vij,vij->v", mesh.h, mesh.h)
    integrand = mesh.H ** 2 - h2
    total = boundary_integral(mesh, integrand)
    chi_c = total / (4.0 * math.pi)
    chi_m = mesh.euler_characteristic
    return GaussBonnetResult(total, chi_c, chi_m, abs(chi_c - chi_m) <= tol)


def domain_volume(domain, resolution):
    """Cell-counted volume with a first-order subcell correction."""
    if domain.dimension != 3:
        raise ValueError("volume counting is implemented for n = 3 only")
    h = float(resolution)
    lo = domain.bounding_box[:, 0]
    hi = domain.bounding_box[:, 1]
    ns = [int(math.ceil((hi[d] - lo[d]) / h)) for d in range(3)]
    axes = [lo[d] + h * (0.5 + np.arange(ns[d])) for d in range(3)]
    grid = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([g.ravel() for g in grid])
    phi = domain.levelset(pts)
    # gradient magnitude at cell centres for the subcell fraction
    gmag = np.zeros(pts.shape[0])
    step = 0.25 * h
    for d in range(3):
        off = np.zeros(3)
        off[d] = step
        gd = (domain.levelset(pts + off) - domain.levelset(pts - off)) / (2 * step)
        gmag += gd * gd
    gmag = np.sqrt(gmag)
    gmag[gmag < 1e-12] = 1e-12
    frac = np.clip(0.5 - phi / (gmag * h), 0.0, 1.0)
    return float(frac.sum() * h ** 3)


# ---------------------------------------------------------------------------
# OFF input/output
# ---------------------------------------------------------------------------


def read_off(path):
    """Read an ASCII OFF file, returning (vertices, triangle faces)."""
    with open(path, "r", encoding="ascii") as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise ValueError(f"{path}: missing OFF header")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4  # OFF nv nf ne
    verts = np.array(tokens[pos:pos + 3 * nv], dtype=float).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        cnt = int(tokens[pos])
        if cnt != 3:
            raise ValueError(f"{path}: only triangle faces are supported")
        faces.append([int(tokens[pos + 1]), int(tokens[pos + 2]), int(tokens[pos + 3])])
        pos += 1 + cnt
    return verts, np.asarray(faces, dtype=np.int64)


def write_off(path, mesh):
    """Write a SurfaceMesh as ASCII OFF."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.triangles.shape[0]} 0\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.12g} {v[1]:.12g} {v[2]:.12g}\n")
        for f in mesh.triangles:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
