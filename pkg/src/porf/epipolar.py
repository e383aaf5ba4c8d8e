"""Correspondence-driven pose supervision.

Each training iteration samples matched image pairs, splits every pair's
matches into inliers and outliers by thresholding the square root of the
Sampson distance (pixels) under the fundamental matrix of the *current*
refined poses, and averages the inlier Sampson errors. A pair's term is
weighted by the square of its inlier rate, so poorly matched pairs count
less. The inlier split and the weights are constants for differentiation.
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import diffgeom
from .errors import InvalidArgument, ParseError
from .geometry import sampson_distance

log = logging.getLogger(__name__)


class Correspondence(NamedTuple):
    u1: float
    v1: float
    u2: float
    v2: float


@dataclass
class PairMatches:
    """Matches between frames ``i < j``; ``matches`` rows are ``(u1, v1, u2, v2)``."""

    i: int
    j: int
    matches: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        if self.i == self.j:
            raise InvalidArgument("a pair needs two distinct frames")
        if self.i > self.j:
            raise InvalidArgument("pair frame indices must satisfy i < j")
        m = np.asarray(self.matches, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(m)):
            raise InvalidArgument("correspondences must be finite")
        self.matches = m

    def __len__(self):
        return len(self.matches)

    def __iter__(self):
        return (Correspondence(*row) for row in self.matches)

    @property
    def x(self):
        return self.matches[:, 0:2]

    @property
    def x_prime(self):
        return self.matches[:, 2:4]


@dataclass
class EpipolarBatch:
    pairs: list
    inliers: list
    rates: np.ndarray
    weights: np.ndarray
    errors: list
    delta: float
    skipped: int = 0


def sample_pairs(db, n_pairs, rng):
    """Uniform draws with replacement among pairs that have matches."""
    candidates = [p for p in db if len(p) > 0]
    if not candidates:
        raise InvalidArgument("no pair with correspondences to sample from")
    picks = rng.integers(0, len(candidates), size=n_pairs)
    return [candidates[k] for k in picks]


def split_inliers(pair, F, delta):
    """Indices of matches with ``sqrt(sampson) <= delta`` and the inlier rate."""
    if not delta > 0:
        raise InvalidArgument("threshold must be positive")
    if len(pair) == 0:
        return np.zeros(0, dtype=np.intp), 0.0
    d = sampson_distance(pair.x, pair.x_prime, F)
    idx = np.flatnonzero(np.sqrt(d) <= delta)
    return idx, len(idx) / len(pair)


def epipolar_loss(pairs, pose_provider, intrinsics, delta, tape):
    """Weighted mean inlier Sampson error over sampled pairs.

    ``pose_provider(frames)`` must return tracked camera-to-world poses
    (:class:`porf.diffgeom.TrackedPoses`) for an integer array of frames.
    Returns ``(loss, batch)``.
    """
    n = len(pairs)
    if n == 0:
        raise InvalidArgument("no pairs sampled")
    fi = np.array([p.i for p in pairs])
    fj = np.array([p.j for p in pairs])
    poses = pose_provider(np.concatenate([fi, fj]))
    pi = diffgeom.TrackedPoses(ad.getitem(poses.r, slice(0, n)), ad.getitem(poses.t, slice(0, n)))
    pj = diffgeom.TrackedPoses(ad.getitem(poses.r, slice(n, 2 * n)), ad.getitem(poses.t, slice(n, 2 * n)))
    F, t_rel = diffgeom.fundamental_matrices(pi, pj, intrinsics, intrinsics)
    F_val = ad._val(F)

    inliers, rates, sel_pairs, sel_idx, coef = [], np.zeros(n), [], [], []
    skipped = 0
    for k, pair in enumerate(pairs):
        if np.linalg.norm(t_rel[k]) <= 1e-12:
            skipped += 1
            inliers.append(np.zeros(0, dtype=np.intp))
            continue
        idx, p = split_inliers(pair, F_val[k], delta)
        inliers.append(idx)
        rates[k] = p
        if len(idx):
            sel_pairs.append(np.full(len(idx), k))
            sel_idx.append(pair.matches[idx])
            # w_i * (1/m_i) * (1/n) per inlier
            coef.append(np.full(len(idx), p * p / (len(idx) * n)))
    if skipped:
        log.debug("skipped %d pair(s) with zero baseline", skipped)
    weights = rates**2
    batch = EpipolarBatch(list(pairs), inliers, rates, weights, [], float(delta), skipped)
    if not sel_pairs:
        return ad.sum_(poses.r * 0.0), batch
    owner = np.concatenate(sel_pairs)
    m = np.concatenate(sel_idx)
    e = diffgeom.sampson(m[:, 0:2], m[:, 2:4], ad.take(F, owner))
    e_val = ad._val(e)
    batch.errors = [e_val[owner == k] for k in range(n)]
    return ad.sum_(e * np.concatenate(coef)), batch


def total_loss(l_nsr, l_eg, beta):
    if beta < 0:
        raise InvalidArgument("loss weight must be non-negative")
    return l_nsr + l_eg * beta


# ---- file format ----------------------------------------------------------


def write_matches(path, db):
    with open(path, "w", encoding="utf-8") as fh:
        for pair in db:
            fh.write(f"PAIR {pair.i} {pair.j} {len(pair)}\n")
            for row in pair.matches:
                fh.write(" ".join(format(float(v), ".17g") for v in row) + "\n")


def read_matches(path, intrinsics=None):
    """Parse a correspondence file; out-of-image matches only trigger a warning."""
    db = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    pos = 0
    while pos < len(lines):
        lineno = pos + 1
        line = lines[pos].strip()
        pos += 1
        if not line or line.startswith("#"):
            continue
        head = line.split()
        if head[0] != "PAIR" or len(head) != 4:
            raise ParseError("expected 'PAIR <i> <j> <count>'", path, lineno)
        try:
            i, j, count = int(head[1]), int(head[2]), int(head[3])
        except ValueError:
            raise ParseError("non-integer field in PAIR header", path, lineno) from None
        if i >= j or i < 0 or count < 0:
            raise ParseError("PAIR header needs 0 <= i < j and count >= 0", path, lineno)
        rows = []
        while len(rows) < count:
            if pos >= len(lines):
                raise ParseError(f"pair ({i}, {j}) ends after {len(rows)} of {count} matches", path, pos)
            lineno = pos + 1
            text = lines[pos].strip()
            pos += 1
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 4:
                raise ParseError("expected '<u1> <v1> <u2> <v2>'", path, lineno)
            try:
                row = [float(v) for v in parts]
            except ValueError:
                raise ParseError("non-numeric correspondence", path, lineno) from None
            if not np.all(np.isfinite(row)):
                raise ParseError("non-finite correspondence", path, lineno)
            rows.append(row)
        db.append(PairMatches(i, j, np.array(rows).reshape(-1, 4)))
    if intrinsics is not None:
        check_bounds(db, intrinsics)
    return db


def check_bounds(db, intrinsics):
    """Count (and warn about) matches falling outside the image."""
    w, h = intrinsics.width, intrinsics.height
    bad = 0
    for pair in db:
        m = pair.matches
        out = (m[:, [0, 2]] < 0) | (m[:, [0, 2]] > w) | (m[:, [1, 3]] < 0) | (m[:, [1, 3]] > h)
        bad += int(out.any(axis=1).sum())
    if bad:
        log.warning("%d correspondence(s) lie outside the %dx%d image", bad, w, h)
    return bad
