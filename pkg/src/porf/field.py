"""Pose Residual Field and the per-frame pose baseline.

The field is one small MLP shared by every frame. It maps the normalised
frame index and the frame's initial pose to a 6D residual that is scaled by
a small constant and added to the initial pose::

    r_hat = r + alpha * dr
    t_hat = t + alpha * dt

The output layer starts at zero, so before any update every refined pose is
exactly its initial pose. :class:`PoseBank` is the conventional alternative
with one independent residual per frame.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffgeom
from .errors import InvalidArgument
from .geometry import Pose6


@dataclass(frozen=True)
class PorfNetwork:
    n_frames: int
    alpha: float = 0.01
    hidden: tuple = (256, 256)
    segment: str = "porf"
    scene_scale: float = 1.0
    # optional affine map of the inputs, x -> (x - input_shift) * input_scale
    input_shift: tuple = None
    input_scale: tuple = None

    @classmethod
    def standardised(cls, initial, gain, alpha=0.01, hidden=(256, 256), scene_scale=1.0, segment="porf"):
        """Network whose inputs have zero mean and standard deviation ``gain`` over ``initial``.

        The statistics are computed once from the initial poses and then held
        fixed. A constant input column is only shifted, not scaled.
        """
        if not gain > 0:
            raise InvalidArgument("input gain must be positive")
        n = len(initial)
        X = np.stack([porf_input(i, p, n, scene_scale) for i, p in enumerate(initial)])
        sd = X.std(axis=0)
        scale = np.where(sd > 1e-9, gain / np.maximum(sd, 1e-9), 1.0)
        return cls(n, alpha, hidden, segment, scene_scale, tuple(X.mean(axis=0)), tuple(scale))

    def __post_init__(self):
        if self.n_frames < 2:
            raise InvalidArgument("a pose field needs at least two frames")
        if not self.alpha > 0:
            raise InvalidArgument("alpha must be positive")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def spec(self):
        return ad.MlpSpec(7, self.hidden, 6)

    def init_params(self, rng):
        return ad.init_mlp(self.spec, rng, zero_output=True)


@dataclass(frozen=True)
class PoseBank:
    n_frames: int
    segment: str = "bank"

    def init_params(self):
        return np.zeros(6 * self.n_frames)


def _check_index(frame_index, n_frames):
    idx = np.atleast_1d(np.asarray(frame_index))
    if idx.dtype.kind not in "iu" or np.any(idx < 0) or np.any(idx >= n_frames):
        raise InvalidArgument(f"frame index out of range for {n_frames} frames")
    return idx


def porf_input(frame_index, initial, n_frames, scene_scale=1.0):
    """``[i/(N-1), r, t/s]`` for a single frame."""
    _check_index(frame_index, n_frames)
    if n_frames < 2:
        raise InvalidArgument("need at least two frames")
    return np.concatenate([[frame_index / (n_frames - 1)], initial.r, initial.t / scene_scale])


def _inputs(net, frame_index, initial):
    idx = _check_index(frame_index, net.n_frames)
    poses = [initial] if isinstance(initial, Pose6) else list(initial)
    if len(poses) != len(idx):
        raise InvalidArgument("one initial pose per frame index is required")
    x = np.stack([porf_input(int(i), p, net.n_frames, net.scene_scale) for i, p in zip(idx, poses)])
    if net.input_shift is not None:
        x = (x - np.asarray(net.input_shift)) * np.asarray(net.input_scale)
    r0 = np.stack([p.r for p in poses])
    t0 = np.stack([p.t for p in poses])
    return x, r0, t0


def porf_residual(net, params, frame_index, initial, tape):
    """Scaled residual ``alpha * MLP(input)``; ``(6,)`` for one frame, ``(K, 6)`` for many."""
    x, _, _ = _inputs(net, frame_index, initial)
    out = ad.mlp_forward(params, net.spec, x, tape, net.segment) * net.alpha
    return out[0] if np.ndim(frame_index) == 0 else out


def refined_pose(net, params, frame_index, initial, tape):
    """Tracked refined pose(s); rows follow ``frame_index``."""
    x, r0, t0 = _inputs(net, frame_index, initial)
    residual = ad.mlp_forward(params, net.spec, x, tape, net.segment) * net.alpha
    return diffgeom.compose(r0, t0, residual)


def bank_refined_pose(bank, params, frame_index, initial, tape):
    idx = _check_index(frame_index, bank.n_frames)
    poses = [initial] if isinstance(initial, Pose6) else list(initial)
    if len(poses) != len(idx):
        raise InvalidArgument("one initial pose per frame index is required")
    table = tape.param(params, bank.segment, 0, (bank.n_frames, 6))
    residual = ad.take(table, idx)
    r0 = np.stack([p.r for p in poses])
    t0 = np.stack([p.t for p in poses])
    return diffgeom.compose(r0, t0, residual)
