"""Rotation-group and rigid-frame primitives.

Rotations are 3x3 orthonormal matrices with det +1; tangent vectors use
axis-angle coordinates (radians), left-trivialized at the base point:
``log_at(base, target) = vee(log(base^T target))``.  Chains of rigid frames
live on the zero-center-of-mass product space, so translations of a valid
chain always average to zero.

All functions are pure, operate in float64, and broadcast over leading axes
where that makes sense (``rot`` arguments of shape ``(..., 3, 3)``,
axis-angle arguments of shape ``(..., 3)``).
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError

# Small-angle cutoff below which Taylor expansions of the Rodrigues
# coefficients replace the direct formulas (catastrophic cancellation in f64).
SMALL_ANGLE = 1e-8
# Band around pi where quaternion extraction replaces the trace formula,
# whose error grows as eps/sin^2(theta) there.
PI_BAND = 5e-3

DEFAULT_T_MIN = 0.01
DEFAULT_NOISE_TRANS_SCALE = 10.0


def skew(v):
    """Map axis-angle vectors (..., 3) to skew matrices (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def vee(m):
    """Inverse of `skew`: extract (..., 3) from skew-symmetric (..., 3, 3)."""
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def so3_exp(v):
    """Exponential map so(3) -> SO(3) via the Rodrigues formula."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise DataError("non-finite axis-angle input to so3_exp")
    theta2 = np.sum(v * v, axis=-1)
    theta = np.sqrt(theta2)
    small = theta < SMALL_ANGLE
    theta_safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / theta_safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, theta2))
    k = skew(v)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def check_rotation(r, tol=1e-6):
    """Raise DataError unless r is orthonormal with det +1 within tol."""
    r = np.asarray(r, dtype=float)
    if r.shape[-2:] != (3, 3):
        raise DataError(f"rotation must be (..., 3, 3), got {r.shape}")
    err = np.abs(np.swapaxes(r, -1, -2) @ r - np.eye(3)).max()
    if not np.isfinite(err) or err > tol:
        raise DataError(f"matrix violates orthonormality by {err:.3g} (tol {tol:.1g})")
    if np.min(np.linalg.det(r)) < 0.0:
        raise DataError("matrix has negative determinant (reflection, not rotation)")
    return r


def so3_log(r, *, validate=True):
    """Logarithm map SO(3) -> so(3), canonical representative with norm <= pi.

    Mid-range angles come from arccos of the trace; near zero the symmetric
    series is used, and near pi the axis is recovered from the diagonal with
    the sign tie-break: first nonzero component positive (only at exactly pi,
    where both signs are valid).
    """
    r = np.asarray(r, dtype=float)
    if validate:
        check_rotation(r)
    tr = np.trace(r, axis1=-2, axis2=-1)
    cos = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    w = vee(r - np.swapaxes(r, -1, -2)) / 2.0  # = sin(theta) * axis

    near_pi = theta > np.pi - PI_BAND
    small = theta < SMALL_ANGLE
    mid = ~near_pi
    # mid branch: v = theta / sin(theta) * w, series below the small cutoff
    sin_theta = np.sin(np.where(mid & ~small, theta, 1.0))
    factor = np.where(small, 1.0 + theta * theta / 6.0, theta / sin_theta)
    v = factor[..., None] * w

    if np.any(near_pi):
        flat_r = r.reshape(-1, 3, 3)
        flat_near = near_pi.reshape(-1)
        out_flat = v.reshape(-1, 3).copy()
        for idx in np.nonzero(flat_near)[0]:
            out_flat[idx] = _log_near_pi(flat_r[idx])
        v = out_flat.reshape(v.shape)
    return v


def _log_near_pi(m):
    """Axis-angle via quaternion extraction anchored at the largest diagonal
    candidate; stays well-conditioned where the antisymmetric part vanishes."""
    t0 = 1.0 + m[0, 0] + m[1, 1] + m[2, 2]
    t1 = 1.0 + m[0, 0] - m[1, 1] - m[2, 2]
    t2 = 1.0 - m[0, 0] + m[1, 1] - m[2, 2]
    t3 = 1.0 - m[0, 0] - m[1, 1] + m[2, 2]
    k = int(np.argmax([t0, t1, t2, t3]))
    if k == 0:
        w = np.sqrt(t0) / 2.0
        q = np.array([(m[2, 1] - m[1, 2]), (m[0, 2] - m[2, 0]), (m[1, 0] - m[0, 1])]) / (4 * w)
    elif k == 1:
        x = np.sqrt(t1) / 2.0
        w = (m[2, 1] - m[1, 2]) / (4 * x)
        q = np.array([x, (m[0, 1] + m[1, 0]) / (4 * x), (m[0, 2] + m[2, 0]) / (4 * x)])
    elif k == 2:
        y = np.sqrt(t2) / 2.0
        w = (m[0, 2] - m[2, 0]) / (4 * y)
        q = np.array([(m[0, 1] + m[1, 0]) / (4 * y), y, (m[1, 2] + m[2, 1]) / (4 * y)])
    else:
        z = np.sqrt(t3) / 2.0
        w = (m[1, 0] - m[0, 1]) / (4 * z)
        q = np.array([(m[0, 2] + m[2, 0]) / (4 * z), (m[1, 2] + m[2, 1]) / (4 * z), z])
    if abs(w) > 1e-12:
        if w < 0:
            w, q = -w, -q
    else:
        # exactly a half-turn: both axis signs are valid representatives;
        # canonical choice makes the first nonzero component positive
        w = abs(w)
        for comp in q:
            if abs(comp) > 1e-12:
                if comp < 0:
                    q = -q
                break
    norm = np.linalg.norm(q)
    if norm < 1e-300:
        return np.zeros(3)
    theta = 2.0 * np.arctan2(norm, w)
    return theta * q / norm


def so3_log_at(base, target, *, validate=True):
    """Left-trivialized tangent coordinates of target at base."""
    base = np.asarray(base, dtype=float)
    target = np.asarray(target, dtype=float)
    rel = np.swapaxes(base, -1, -2) @ target
    return so3_log(rel, validate=validate)


def so3_exp_at(base, v):
    """Move from base along left-trivialized tangent coordinates v."""
    return np.asarray(base, dtype=float) @ so3_exp(v)


def rotation_distance(r0, r1):
    """Geodesic distance on SO(3): the rotation angle of r0^T r1."""
    rel = np.swapaxes(np.asarray(r0, dtype=float), -1, -2) @ np.asarray(r1, dtype=float)
    tr = np.trace(rel, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def random_rotations(n, rng):
    """Draw n Haar-uniform rotations via uniform unit quaternions."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((n, 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


@dataclass
class FrameChain:
    """N rigid frames: rotations (N, 3, 3) and translations (N, 3) in Angstrom.

    A chain used as a model input or flow state is expected to be centered
    (translations averaging to zero); centering is checked by `is_centered`
    rather than enforced on construction.
    """

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=float)
        self.trans = np.asarray(self.trans, dtype=float)
        if self.rot.ndim != 3 or self.rot.shape[1:] != (3, 3):
            raise DataError(f"rot must be (N, 3, 3), got {self.rot.shape}")
        if self.trans.shape != (self.rot.shape[0], 3):
            raise DataError(f"trans must be (N, 3), got {self.trans.shape}")

    def __len__(self):
        return self.rot.shape[0]

    def copy(self):
        return FrameChain(self.rot.copy(), self.trans.copy())

    def is_centered(self, tol=1e-6):
        return bool(np.linalg.norm(self.trans.mean(axis=0)) < tol)


def remove_com(chain: FrameChain) -> FrameChain:
    """Shift translations so the chain's center of mass is zero. Idempotent."""
    if len(chain) < 1:
        raise DataError("cannot center an empty chain")
    return FrameChain(chain.rot.copy(), chain.trans - chain.trans.mean(axis=0))


def sample_noise_chain(n_residues, rng, trans_scale=DEFAULT_NOISE_TRANS_SCALE) -> FrameChain:
    """Source-distribution draw: Haar rotations, centered Gaussian translations."""
    if n_residues < 1:
        raise DataError("need at least one residue")
    rot = random_rotations(n_residues, rng)
    trans = rng.normal(scale=trans_scale, size=(n_residues, 3))
    return remove_com(FrameChain(rot, trans))


def geodesic_interpolant(x0: FrameChain, x1: FrameChain, t: float) -> FrameChain:
    """Point at fraction t on the geodesic from x0 (t=0, data) to x1 (t=1, noise)."""
    if not 0.0 <= t <= 1.0:
        raise DataError(f"interpolation time {t} outside [0, 1]")
    v = so3_log_at(x0.rot, x1.rot, validate=False)
    rot = so3_exp_at(x0.rot, t * v)
    trans = (1.0 - t) * x0.trans + t * x1.trans
    return FrameChain(rot, trans)


@dataclass
class TangentField:
    """Per-residue tangent coordinates: rotation (N, 3) rad, translation (N, 3) A/t."""

    rot: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=float)
        self.trans = np.asarray(self.trans, dtype=float)
        if self.rot.shape != self.trans.shape or self.rot.ndim != 2 or self.rot.shape[1] != 3:
            raise DataError("tangent field parts must both be (N, 3)")

    def __len__(self):
        return self.rot.shape[0]

    def as_array(self):
        return np.concatenate([self.rot, self.trans], axis=1)


def conditional_field(x_t: FrameChain, x0: FrameChain, t: float, t_min: float = DEFAULT_T_MIN) -> TangentField:
    """Regression targets at state x_t given the data endpoint x0.

    Rotation part points toward the data (left-trivialized at x_t), the
    translation part toward the noise; the sampler pairs them with opposite
    step signs. The 1/t factor makes t below t_min an error.
    """
    if t < t_min:
        raise DataError(f"time {t} below the singularity clamp t_min={t_min}")
    rot = so3_log_at(x_t.rot, x0.rot, validate=False) / t
    trans = (x_t.trans - x0.trans) / t
    return TangentField(rot, trans)
