"""Rigid-body math for scan registration.

Twists are ordered ``(omega, v)``: rotational part first, translational part
second. Pose increments are applied on the left, ``T <- exp(xi) @ T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi

# Below this rotation angle the Rodrigues coefficients use their Taylor series.
SMALL_ANGLE = 1e-8
ORTHO_TOL = 1e-9


def skew(v) -> np.ndarray:
    """Hat operator: ``skew(a) @ b == cross(a, b)``."""
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]], dtype=float
    )


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """``self @ other``: apply ``other`` first, then ``self``."""
        rot = self.rotation @ other.rotation
        if abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL or not np.allclose(
            rot.T @ rot, np.eye(3), rtol=0.0, atol=ORTHO_TOL
        ):
            rot = orthonormalize(rot)
        return Pose(rot, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -(rt @ self.translation))

    def transform(self, points) -> np.ndarray:
        """Apply to one point ``(3,)`` or a batch ``(N, 3)``."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def transform_point(pose: Pose, p) -> np.ndarray:
    return pose.transform(p)


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def inverse(p: Pose) -> Pose:
    return p.inverse()


def _rodrigues_coeffs(theta: float) -> tuple[float, float, float]:
    """Return ``sin(t)/t``, ``(1-cos t)/t^2`` and ``(t - sin t)/t^3``."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = math.sin(theta), math.cos(theta)
    # the (1-cos)/t^2 term loses digits for small angles; use the half-angle form
    h = math.sin(0.5 * theta)
    return s / theta, 2.0 * h * h / (theta * theta), (theta - s) / theta**3


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _rodrigues_coeffs(theta)
    k = skew(omega)
    return np.eye(3) + a * k + b * (k @ k)


def left_jacobian(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    _, b, c = _rodrigues_coeffs(theta)
    k = skew(omega)
    return np.eye(3) + b * k + c * (k @ k)


def exp_map(xi) -> Pose:
    """SE(3) exponential of a twist ``(omega, v)``."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, v = xi[:3], xi[3:]
    return Pose(so3_exp(omega), left_jacobian(omega) @ v)


def so3_log(rot: np.ndarray) -> np.ndarray:
    cos_t = (np.trace(rot) - 1.0) * 0.5
    w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    sin_t = 0.5 * float(np.linalg.norm(w))
    theta = math.atan2(sin_t, min(1.0, max(-1.0, cos_t)))
    if theta > math.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
    if theta < SMALL_ANGLE:
        return 0.5 * (1.0 + theta * theta / 6.0) * w
    return (theta / (2.0 * sin_t)) * w


def log_map(pose: Pose) -> np.ndarray:
    """Inverse of :func:`exp_map` for rotation angles below ``pi - 1e-6``."""
    omega = so3_log(pose.rotation)
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    if theta < SMALL_ANGLE:
        jinv = np.eye(3) - 0.5 * k + (k @ k) / 12.0
    else:
        half = 0.5 * theta
        coeff = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
        jinv = np.eye(3) - 0.5 * k + coeff * (k @ k)
    return np.concatenate([omega, jinv @ pose.translation])


def rotation_angle(rot: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, robust near 0 and pi."""
    w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    return math.atan2(0.5 * float(np.linalg.norm(w)), (np.trace(rot) - 1.0) * 0.5)


# ---------------------------------------------------------------------------
# symmetric 3x3 eigendecomposition


def _jacobi_eig3(m: np.ndarray, sweeps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    a = np.array(m, dtype=float)
    v = np.eye(3)
    for _ in range(sweeps):
        off = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
        if off <= 1e-300 or off <= (np.finfo(float).eps * np.abs(np.diag(a)).sum()) ** 2 * 1e-4:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            if a[p, q] == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
            if abs(theta) > 1e150:  # theta**2 would overflow
                t = 0.5 / theta
            else:
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    return np.diag(a).copy(), v


def _null_vector(a: np.ndarray) -> np.ndarray:
    """Unit vector spanning the null space of a rank-2 symmetric matrix."""
    c01 = np.cross(a[0], a[1])
    c02 = np.cross(a[0], a[2])
    c12 = np.cross(a[1], a[2])
    n = [float(c @ c) for c in (c01, c02, c12)]
    best = (c01, c02, c12)[int(np.argmax(n))]
    return best / math.sqrt(max(n))


def _sort_desc(vals, vecs):
    order = np.argsort(-vals, kind="stable")
    return vals[order], vecs[:, order]


def eig3_symmetric(m) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and column eigenvectors of a symmetric 3x3.

    Closed-form trigonometric eigenvalues with eigenvectors from row cross
    products; falls back to cyclic Jacobi when the closed form is not accurate
    enough (clustered eigenvalues).
    """
    a = np.array(m, dtype=float)
    scale = max(1.0, float(np.abs(a).max()))
    tol = 1e-10 * scale
    # off-diagonals this small only cause under/overflow further down
    off = ~np.eye(3, dtype=bool) & (np.abs(a) < 1e-150 * scale)
    a[off] = 0.0

    # exact block structure: one axis decoupled from the other two
    for i in range(3):
        j, k = [x for x in range(3) if x != i]
        if a[i, j] == 0.0 and a[i, k] == 0.0:
            b, c, d = a[j, j], a[j, k], a[k, k]
            if c == 0.0:
                vals = np.array([a[i, i], b, d])
                vecs = np.eye(3)[:, [i, j, k]]
            else:
                half = 0.5 * (b - d)
                r = math.hypot(half, c)
                mid = 0.5 * (b + d)
                l1, l2 = mid + r, mid - r
                # eigenvector of the larger 2x2 eigenvalue, computed stably
                if half >= 0:
                    u = np.array([half + r, c])
                else:
                    u = np.array([c, r - half])
                u /= np.linalg.norm(u)
                e1 = np.zeros(3)
                e2 = np.zeros(3)
                e1[j], e1[k] = u[0], u[1]
                e2[j], e2[k] = -u[1], u[0]
                vals = np.array([a[i, i], l1, l2])
                vecs = np.column_stack([np.eye(3)[:, i], e1, e2])
            return _sort_desc(vals, vecs)

    q = np.trace(a) / 3.0
    p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    p2 = (a[0, 0] - q) ** 2 + (a[1, 1] - q) ** 2 + (a[2, 2] - q) ** 2 + 2.0 * p1
    p = math.sqrt(p2 / 6.0)
    if p == 0.0:  # off-diagonals underflowed: a is q * I to working precision
        vals, vecs = _jacobi_eig3(a)
        return _sort_desc(vals, vecs)
    bmat = (a - q * np.eye(3)) / p
    r = min(1.0, max(-1.0, np.linalg.det(bmat) / 2.0))
    phi = math.acos(r) / 3.0
    l1 = q + 2.0 * p * math.cos(phi)
    l3 = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    vals = np.array([l1, l2, l3])

    gap = min(l1 - l2, l2 - l3)
    if gap > 1e-6 * scale:
        v1 = _null_vector(a - l1 * np.eye(3))
        v3 = _null_vector(a - l3 * np.eye(3))
        v2 = np.cross(v3, v1)
        v2 /= np.linalg.norm(v2)
        vecs = np.column_stack([v1, v2, v3])
        resid = np.abs(a @ vecs - vecs * vals).max()
        ortho = np.abs(vecs.T @ vecs - np.eye(3)).max()
        if resid <= tol and ortho <= 1e-12:
            return vals, vecs
    vals, vecs = _jacobi_eig3(a)
    return _sort_desc(vals, vecs)


# ---------------------------------------------------------------------------
# running moments


@dataclass(frozen=True)
class Moments:
    count: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scatter: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    @property
    def covariance(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros((3, 3))
        return self.scatter / self.count


def moments_update(m: Moments, p) -> Moments:
    """Welford single-point update."""
    p = np.asarray(p, dtype=float)
    n = m.count + 1
    d = p - m.mean
    mean = m.mean + d / n
    scatter = m.scatter + ((n - 1) / n) * np.outer(d, d)
    return Moments(n, mean, scatter)


def moments_of(points) -> Moments:
    """Two-pass batch moments of an ``(N, 3)`` array."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return Moments()
    mean = pts.mean(axis=0)
    d = pts - mean
    return Moments(len(pts), mean, d.T @ d)


def moments_merge(a: Moments, b: Moments) -> Moments:
    """Combine two disjoint samples (Chan et al. pairwise update)."""
    if a.count == 0:
        return b
    if b.count == 0:
        return a
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / n)
    scatter = a.scatter + b.scatter + np.outer(delta, delta) * (a.count * b.count / n)
    return Moments(n, mean, scatter)
