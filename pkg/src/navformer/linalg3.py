"""Fixed-size 3D linear algebra: symmetric eigensolver, rotations, SPD checks.

Vectors are ``(3,)`` float64 arrays and matrices ``(3, 3)`` arrays. Batched
variants accept any leading shape ``(..., 3, 3)``.
"""
from typing import NamedTuple

import numpy as np

from .errors import NonFinite, NonSymmetric

SYMMETRY_RTOL = 1e-9
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 50

# (p, q, r): rotate in the (p, q) plane, r is the remaining index.
_PLANES = ((0, 1, 2), (0, 2, 1), (1, 2, 0))


class SymEig3(NamedTuple):
    eigenvalues: np.ndarray  # (3,) descending
    eigenvectors: np.ndarray  # (3, 3), columns u1, u2, u3


def _validate_symmetric(A):
    A = np.asarray(A, dtype=np.float64)
    if A.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) array, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFinite("matrix contains NaN or Inf")
    asym = np.linalg.norm(A - np.swapaxes(A, -1, -2), axis=(-2, -1))
    scale = np.linalg.norm(A, axis=(-2, -1))
    if np.any(asym > SYMMETRY_RTOL * scale):
        raise NonSymmetric(f"asymmetry {asym.max():.3e} exceeds {SYMMETRY_RTOL:g} relative")
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _jacobi(A):
    """Cyclic Jacobi on a stack of symmetric 3x3 matrices, elementwise only.

    Every matrix follows exactly the same arithmetic whether it is solved
    alone or inside a batch, so results are bit-reproducible.
    """
    A = A.reshape(-1, 3, 3).copy()
    n = A.shape[0]
    V = np.zeros_like(A)
    V[:, 0, 0] = V[:, 1, 1] = V[:, 2, 2] = 1.0
    tol = JACOBI_TOL * np.sqrt(np.sum(A * A, axis=(1, 2)))
    done = np.zeros(n, dtype=bool)

    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt(2.0 * (A[:, 0, 1] ** 2 + A[:, 0, 2] ** 2 + A[:, 1, 2] ** 2))
        done |= off <= tol
        if done.all():
            break
        for p, q, r in _PLANES:
            apq = A[:, p, q].copy()
            active = ~done & (apq != 0.0)
            safe = np.where(active, apq, 1.0)
            with np.errstate(over="ignore"):
                # tiny a_pq overflows theta to inf, which correctly gives t = 0
                theta = np.where(active, (A[:, q, q] - A[:, p, p]) / (2.0 * safe), 0.0)
            sgn = np.where(theta < 0.0, -1.0, 1.0)
            t = np.where(active, sgn / (np.abs(theta) + np.hypot(theta, 1.0)), 0.0)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            tau = s / (1.0 + c)

            A[:, p, p] -= t * apq
            A[:, q, q] += t * apq
            A[:, p, q] = np.where(active, 0.0, apq)
            A[:, q, p] = A[:, p, q]
            arp = A[:, r, p].copy()
            arq = A[:, r, q].copy()
            A[:, r, p] = A[:, p, r] = arp - s * (arq + tau * arp)
            A[:, r, q] = A[:, q, r] = arq + s * (arp - tau * arq)

            vp = V[:, :, p].copy()
            vq = V[:, :, q].copy()
            V[:, :, p] = vp - s[:, None] * (vq + tau[:, None] * vp)
            V[:, :, q] = vq + s[:, None] * (vp - tau[:, None] * vq)

    lam = np.stack([A[:, 0, 0], A[:, 1, 1], A[:, 2, 2]], axis=1)
    order = np.argsort(-lam, axis=1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)

    # Largest-magnitude component of each column made positive (first index on ties).
    lead = np.argmax(np.abs(V), axis=1)
    lead_val = np.take_along_axis(V, lead[:, None, :], axis=1)[:, 0, :]
    V = V * np.where(lead_val < 0.0, -1.0, 1.0)[:, None, :]
    return lam, V


def eig_sym3(A) -> SymEig3:
    """Eigen-decomposition of a symmetric 3x3 matrix, eigenvalues descending."""
    A = _validate_symmetric(A)
    if A.shape != (3, 3):
        raise ValueError(f"expected a single (3, 3) matrix, got {A.shape}")
    lam, V = _jacobi(A)
    return SymEig3(lam[0], V[0])


def eig_sym3_batch(A):
    """Batched :func:`eig_sym3` over ``(..., 3, 3)``; returns ``(lam, U)`` arrays."""
    A = _validate_symmetric(A)
    lead = A.shape[:-2]
    lam, V = _jacobi(A)
    return lam.reshape(lead + (3,)), V.reshape(lead + (3, 3))


def quaternion_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def random_rotations(n, rng):
    """``n`` Haar-uniform rotations from normalised Gaussian quaternions."""
    rng = np.random.default_rng(rng)
    return quaternion_to_matrix(rng.standard_normal((n, 4)))


def random_rotation(seed):
    """Haar-uniform rotation matrix, deterministic in ``seed``."""
    return random_rotations(1, np.random.default_rng(seed))[0]


def axis_angle_rotation(axis, angle):
    """Rotation by ``angle`` radians about ``axis`` (Rodrigues)."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def apply_rotation(R, v):
    """Rotate vector(s) ``v`` of shape ``(..., 3)`` by ``R``."""
    return np.asarray(v, dtype=np.float64) @ np.asarray(R, dtype=np.float64).T


def spd_from_frame(U, sigma):
    """``U diag(sigma) U^T`` for ``U`` of shape ``(..., 3, 3)``."""
    U = np.asarray(U, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    return (U * sigma[..., None, :]) @ np.swapaxes(U, -1, -2)


def is_spd(M, floor=0.0, atol=1e-9):
    """True if ``M`` is symmetric with smallest eigenvalue >= ``floor - atol``."""
    M = np.asarray(M, dtype=np.float64)
    if not np.allclose(M, M.T, rtol=0.0, atol=atol * max(1.0, np.abs(M).max())):
        return False
    return bool(eig_sym3(M).eigenvalues[-1] >= floor - atol)
