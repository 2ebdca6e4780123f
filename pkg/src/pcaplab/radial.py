"""Closed-form exterior potential of a ball: the radial oracle.

For a ball of radius R in dimension n and exponent 1 < p < n the exterior
potential is u(r) = (R/r)^alpha with alpha = (n-p)/(p-1); it saturates both
asymptotic expansions exactly and has normalised capacity R^(n-p).
"""

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["RadialSolution", "radial_potential"]


@dataclass(frozen=True)
class RadialSolution:
    R: float
    p: float
    n: int

    def __post_init__(self):
        if not (1.0 < self.p < self.n):
            raise ValueError(f"need 1 < p < n, got p={self.p}, n={self.n}")
        if self.R <= 0.0:
            raise ValueError("ball radius must be positive")

    @property
    def alpha(self):
        return (self.n - self.p) / (self.p - 1.0)

    @property
    def capacity(self):
        """Normalised p-capacity C_p = R^(n-p)."""
        return self.R ** (self.n - self.p)

    def u(self, r):
        r = np.asarray(r, dtype=float)
        return np.where(r <= self.R, 1.0, (self.R / np.maximum(r, self.R)) ** self.alpha)

    def grad_norm(self, r):
        """|Du|(r) = alpha R^alpha r^(-alpha-1) outside the ball."""
        r = np.asarray(r, dtype=float)
        a = self.alpha
        out = a * self.R ** a * np.maximum(r, self.R) ** (-a - 1.0)
        return np.where(r < self.R, 0.0, out)

    def u_points(self, points):
        return self.u(np.linalg.norm(np.asarray(points, dtype=float), axis=-1))

    def du_dr(self, r):
        return -self.grad_norm(r)

    def d2u_dr2(self, r):
        r = np.asarray(r, dtype=float)
        a = self.alpha
        return a * (a + 1.0) * self.R ** a * r ** (-a - 2.0)

    def hessian(self, point):
        """Exact Hessian of u at an exterior point (3-vector)."""
        x = np.asarray(point, dtype=float)
        r = float(np.linalg.norm(x))
        if r <= self.R:
            raise ValueError("Hessian requested inside the ball")
        rhat = x / r
        upp = float(self.d2u_dr2(r))
        up = float(self.du_dr(r))
        eye = np.eye(len(x))
        return upp * np.outer(rhat, rhat) + (up / r) * (eye - np.outer(rhat, rhat))

    def gradient(self, point):
        x = np.asarray(point, dtype=float)
        r = float(np.linalg.norm(x))
        return float(self.du_dr(r)) * x / r

    def up_constant(self):
        """Value of the level-set flux profile, constant in tau for balls:
        |S^(n-1)| ((n-p)/(p-1))^p R^(n-p-1)."""
        from .geometry import sphere_area
        a = self.alpha
        return sphere_area(self.n) * a ** self.p * self.R ** (self.n - self.p - 1.0)


def radial_potential(R, p, n):
    """Closed-form exterior potential of the ball B_R in dimension n."""
    return RadialSolution(float(R), float(p), int(n))
