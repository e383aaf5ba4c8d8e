"""Tape-tracked, batched counterparts of the pose and two-view routines.

Rotations are ``(K, 3)`` axis-angle arrays, matrices ``(K, 3, 3)``. Values
agree with :mod:`porf.geometry` to rounding; the difference is that
gradients flow through them.
"""

from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .geometry import SAMPSON_EPS, SMALL_ANGLE, Pose6


class TrackedPoses(NamedTuple):
    """Camera-to-world poses on a tape: ``r`` and ``t`` of shape ``(K, 3)``."""

    r: ad.Var
    t: ad.Var

    def to_poses(self):
        return [Pose6(r, t) for r, t in zip(np.asarray(ad._val(self.r)), np.asarray(ad._val(self.t)))]


def skew(v):
    """``(K, 3)`` -> ``(K, 3, 3)`` cross-product matrices."""
    zero = np.zeros(np.shape(ad._val(v))[0])
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    rows = ad.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=-1)
    return rows.reshape((-1, 3, 3))


def rodrigues(r):
    theta2 = ad.sum_(ad.square(r), axis=1)
    small = ad._val(theta2) < SMALL_ANGLE**2
    theta = ad.sqrt(ad.where(small, 1.0, theta2))
    big_a = ad.sin(theta) / theta
    big_b = (1.0 - ad.cos(theta)) / ad.square(theta)
    a = ad.where(small, 1.0 - theta2 * (1.0 / 6.0), big_a)
    b = ad.where(small, 0.5 - theta2 * (1.0 / 24.0), big_b)
    K = skew(r)
    a = a.reshape((-1, 1, 1))
    b = b.reshape((-1, 1, 1))
    return np.eye(3) + a * K + b * ad.matmul(K, K)


def canonicalize(r):
    """Wrap rows with ``|r| > pi`` back into the ball of radius pi."""
    norms = np.linalg.norm(ad._val(r), axis=1)
    over = norms > np.pi
    if not over.any():
        return r
    safe = np.where(over, norms, 1.0)[:, None]
    theta = ad.sqrt(ad.where(over[:, None], ad.sum_(ad.square(r), axis=1, keepdims=True), 1.0))
    wrapped_norm = np.mod(safe + np.pi, 2.0 * np.pi) - np.pi
    # scale factor wrapped/theta; the wrap offset is locally constant
    scale = (theta + (wrapped_norm - safe)) / theta
    return ad.where(over[:, None], r * scale, r)


def compose(initial_r, initial_t, residual):
    """Refined poses ``r + dr``, ``t + dt`` from an already-scaled ``(K, 6)`` residual."""
    r = canonicalize(initial_r + residual[:, 0:3])
    t = initial_t + residual[:, 3:6]
    return TrackedPoses(r, t)


def relative_poses(poses_i, poses_j):
    Ri = rodrigues(poses_i.r)
    Rj = rodrigues(poses_j.r)
    RjT = ad.transpose(Rj)
    R_rel = ad.matmul(RjT, Ri)
    dt = (poses_i.t - poses_j.t).reshape((-1, 3, 1))
    t_rel = ad.matmul(RjT, dt).reshape((-1, 3))
    return R_rel, t_rel


def fundamental_matrices(poses_i, poses_j, K_i, K_j):
    """Unit-Frobenius fundamental matrices for row-aligned pose pairs."""
    R_rel, t_rel = relative_poses(poses_i, poses_j)
    E = ad.matmul(skew(t_rel), R_rel)
    F = ad.matmul(ad.matmul(K_j.K_inv.T, E), K_i.K_inv)
    fro = ad.sqrt(ad.sum_(ad.square(F), axis=(1, 2), keepdims=True))
    return F / ad.maximum(fro, 1e-300), ad._val(t_rel)  # floor only matters for zero baselines


def sampson(x, x_prime, F):
    """Sampson distances for matches ``(M, 2)`` under per-match ``F`` ``(M, 3, 3)``.

    ``F`` is expected at unit Frobenius norm, as built by :func:`fundamental_matrices`.
    """
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    xh = np.concatenate([x, np.ones((len(x), 1))], axis=1)[:, :, None]
    xph = np.concatenate([xp, np.ones((len(xp), 1))], axis=1)[:, None, :]
    Fx = ad.matmul(F, xh).reshape((-1, 3))
    Ftxp = ad.matmul(xph, F).reshape((-1, 3))
    num = ad.square(ad.sum_(Fx * xph[:, 0, :], axis=1))
    den = ad.sum_(ad.square(Fx[:, 0:2]), axis=1) + ad.sum_(ad.square(Ftxp[:, 0:2]), axis=1)
    return num / (den + SAMPSON_EPS)
