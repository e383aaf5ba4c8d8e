"""Synthetic ground truth and trajectory evaluation.

Scenes are unions of analytic primitives inside the unit ball, rendered by
sphere tracing. Cameras orbit the origin (world up is +y) and look at it.
Correspondences come from exact projection of traced surface points, with
optional pixel noise and injected outliers. Evaluation aligns camera centres
with a closed-form similarity transform and reports per-frame rotation and
translation errors.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .epipolar import PairMatches
from .errors import DegenerateGeometry, InvalidArgument, ParseError
from .geometry import Intrinsics, Pose6, fundamental_matrix, project, rotation_angle, sampson_distance

log = logging.getLogger(__name__)

BACKGROUND = np.array([0.1, 0.1, 0.1])
LIGHT_DIR = np.array([0.3, 0.8, -0.5]) / np.linalg.norm([0.3, 0.8, -0.5])
TRACE_STEPS = 128
HIT_EPS = 1e-4
# injected outliers sit at least this far (sqrt Sampson, pixels) from the true epipolar line
OUTLIER_MIN_PX = 50.0


# ---- scenes -----------------------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    centre: tuple
    radius: float
    phase: float = 0.0

    def distance(self, x):
        return np.linalg.norm(x - np.asarray(self.centre), axis=-1) - self.radius


@dataclass(frozen=True)
class Box:
    centre: tuple
    half_extents: tuple
    phase: float = 0.0

    def distance(self, x):
        q = np.abs(x - np.asarray(self.centre)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0.0)


@dataclass(frozen=True)
class SyntheticScene:
    primitives: tuple
    blend: float = 0.05
    palette_freq: float = 12.0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))


def two_sphere_scene():
    """Benchmark scene: two blended, textured spheres inside the unit ball."""
    return SyntheticScene(
        (Sphere((-0.25, 0.0, 0.05), 0.45, 0.0), Sphere((0.38, 0.12, -0.05), 0.3, 2.0)),
        blend=0.05,
    )


def _smin(a, b, k):
    if k <= 0:
        return np.minimum(a, b)
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b + (a - b) * h - k * h * (1.0 - h)


def _palette(x, phase, freq):
    ch = np.arange(3)
    return 0.5 + 0.4 * np.sin(freq * x + phase + ch * (2.0 * np.pi / 3.0))


def scene_sdf(scene, x):
    """Signed distance and albedo of the scene at points ``x`` (``(..., 3)``)."""
    if not scene.primitives:
        raise InvalidArgument("scene has no primitives")
    x = np.asarray(x, dtype=np.float64)
    dists = np.stack([p.distance(x) for p in scene.primitives], axis=0)
    d = dists[0]
    for other in dists[1:]:
        d = _smin(d, other, scene.blend)
    nearest = np.argmin(dists, axis=0)
    phases = np.array([p.phase for p in scene.primitives])[nearest]
    colour = _palette(x, phases[..., None], scene.palette_freq)
    return d, colour


def scene_normal(scene, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    g = np.empty(x.shape)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        g[..., k] = (scene_sdf(scene, x + e)[0] - scene_sdf(scene, x - e)[0]) / (2 * h)
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def sphere_trace(scene, origins, dirs, t_max=10.0):
    """Depth of the first hit along each ray, ``inf`` on a miss."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs))
    t = np.zeros(len(dirs))
    active = np.arange(len(dirs))
    hit = np.zeros(len(dirs), dtype=bool)
    for _ in range(TRACE_STEPS):
        if active.size == 0:
            break
        d, _ = scene_sdf(scene, origins[active] + t[active, None] * dirs[active])
        done = d < HIT_EPS
        hit[active[done]] = True
        t[active[~done]] += d[~done]
        keep = ~done & (t[active] < t_max)
        active = active[keep]
    return np.where(hit, t, np.inf)


# ---- trajectories -------------------------------------------------------------


@dataclass
class Trajectory:
    ids: np.ndarray
    poses: list
    intrinsics: Intrinsics = None
    radius: float = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.poses = list(self.poses)
        if len(self.ids) != len(self.poses):
            raise InvalidArgument("one frame id per pose is required")
        if len(np.unique(self.ids)) != len(self.ids):
            raise InvalidArgument("duplicate frame ids")
        if self.radius is None and self.poses:
            self.radius = float(np.mean([np.linalg.norm(p.t) for p in self.poses]))

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, k):
        return self.poses[k]

    @property
    def centres(self):
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    @property
    def rotations(self):
        return np.array([p.R for p in self.poses]).reshape(-1, 3, 3)

    def is_contiguous(self):
        return np.array_equal(self.ids, np.arange(len(self.ids)))


def look_at(centre, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    """Camera-to-world rotation for a camera at ``centre`` facing ``target``."""
    centre = np.asarray(centre, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - centre
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    y = -(up - (up @ z) * z)
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    return np.stack([x, y, z], axis=1)


def orbit_trajectory(n_frames, radius, elevation_deg, intrinsics, start_deg=0.0):
    if n_frames < 2:
        raise InvalidArgument("need at least two frames")
    if radius <= 1:
        raise InvalidArgument("cameras must lie outside the unit ball")
    el = np.radians(elevation_deg)
    poses = []
    for k in range(n_frames):
        th = np.radians(start_deg) + 2.0 * np.pi * k / n_frames
        c = radius * np.array([np.cos(el) * np.sin(th), np.sin(el), np.cos(el) * np.cos(th)])
        poses.append(Pose6.from_matrix(look_at(c), c))
    return Trajectory(np.arange(n_frames), poses, intrinsics, float(radius))


@dataclass(frozen=True)
class NoiseSpec:
    rot_deg: float = 0.0
    trans_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.rot_deg < 0 or self.trans_frac < 0:
            raise InvalidArgument("noise levels must be non-negative")


def perturb_poses(traj, noise):
    """Additive Gaussian noise on axis-angle (degrees) and centre (fraction of radius)."""
    rng = np.random.default_rng(noise.seed)
    sr = np.radians(noise.rot_deg)
    st = noise.trans_frac * traj.radius
    poses = []
    for pose in traj.poses:
        dr = rng.normal(0.0, 1.0, 3) * sr
        dt = rng.normal(0.0, 1.0, 3) * st
        poses.append(Pose6(pose.r + dr, pose.t + dt))
    return Trajectory(traj.ids.copy(), poses, traj.intrinsics, traj.radius)


# ---- images -------------------------------------------------------------------


def pixel_grid(intrinsics):
    """Continuous coordinates of all pixel centres, row-major ``(H*W, 2)``."""
    v, u = np.mgrid[0 : intrinsics.height, 0 : intrinsics.width]
    return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=1).astype(np.float64)


def world_rays(pose, intrinsics, pixels):
    d = intrinsics.pixel_rays(pixels[:, 0], pixels[:, 1]) @ pose.R.T
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def shade(scene, points):
    _, albedo = scene_sdf(scene, points)
    n = scene_normal(scene, points)
    lambert = 0.3 + 0.7 * np.maximum(n @ LIGHT_DIR, 0.0)
    return albedo * lambert[:, None]


def render_gt_image(scene, pose, intrinsics, resolution=None):
    """Sphere-traced ``(H, W, 3)`` image with Lambertian shading."""
    K = intrinsics
    if resolution is not None:
        w, h = resolution
        sx, sy = w / K.width, h / K.height
        K = Intrinsics(K.fx * sx, K.fy * sy, K.cx * sx, K.cy * sy, int(w), int(h))
    pix = pixel_grid(K)
    dirs = world_rays(pose, K, pix)
    depth = sphere_trace(scene, pose.t, dirs)
    img = np.tile(BACKGROUND, (len(pix), 1))
    hit = np.isfinite(depth)
    if hit.any():
        pts = pose.t + depth[hit, None] * dirs[hit]
        img[hit] = shade(scene, pts)
    return img.reshape(K.height, K.width, 3)


# ---- correspondences ------------------------------------------------------------


def covisible_pairs(traj, max_angle_deg=45.0):
    pairs = []
    R = traj.rotations
    for a in range(len(traj)):
        for b in range(a + 1, len(traj)):
            ang = np.degrees(rotation_angle(R[b].T @ R[a]))
            if ang <= max_angle_deg + 1e-9:
                pairs.append((a, b))
    return pairs


def _pair_seed(master, a, b):
    return np.random.default_rng([master, a, b])


def outlier_margin(K):
    """Minimum outlier distance from the true line; shrinks for images too small for the default."""
    return min(OUTLIER_MIN_PX, 0.2 * min(K.width, K.height))


def _outlier_rows(rng, F, K, count):
    """Uniform random pixel pairs, rejecting any within ``outlier_margin(K)`` of the true epipolar line."""
    rows = np.zeros((0, 4))
    hi = [K.width, K.height, K.width, K.height]
    margin = outlier_margin(K)
    while len(rows) < count:
        cand = rng.uniform([0, 0, 0, 0], hi, size=(2 * count, 4))
        far = sampson_distance(cand[:, 0:2], cand[:, 2:4], F) >= margin**2
        rows = np.concatenate([rows, cand[far]])
    return rows[:count]


def synth_correspondences(scene, traj, per_pair_count, noise_px, outlier_rate, rng,
                          max_angle_deg=45.0, return_labels=False, max_tries=50):
    """Matches for every covisible frame pair.

    Each pair draws its randomness from a generator seeded by the master seed
    and the pair's frame indices, so results do not depend on pair order.
    Outliers replace randomly chosen matches with uniform pixel pairs lying at
    least ``outlier_margin(K)`` from the true epipolar line. With
    ``return_labels`` a list of boolean outlier masks is returned too.
    """
    if per_pair_count < 1:
        raise InvalidArgument("per_pair_count must be at least 1")
    if not 0 <= outlier_rate < 1:
        raise InvalidArgument("outlier rate must lie in [0, 1)")
    master = int(rng) if np.isscalar(rng) else int(rng.integers(0, 2**62))
    K = traj.intrinsics
    db, labels = [], []
    for a, b in covisible_pairs(traj, max_angle_deg):
        prng = _pair_seed(master, int(traj.ids[a]), int(traj.ids[b]))
        pa, pb = traj[a], traj[b]
        x1, x2 = [], []
        have = 0
        for _ in range(max_tries):
            n_try = 4 * (per_pair_count - have) + 256
            pix = prng.uniform([0, 0], [K.width, K.height], size=(n_try, 2))
            dirs = world_rays(pa, K, pix)
            depth = sphere_trace(scene, pa.t, dirs)
            hit = np.isfinite(depth)
            X = pa.t + depth[hit, None] * dirs[hit]
            uv, z = project(pb, K, X)
            ok = (z > 1e-6) & (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
            X, uv, src = X[ok], uv[ok], pix[hit][ok]
            if len(X):
                to = X - pb.t
                dist = np.linalg.norm(to, axis=1)
                first = sphere_trace(scene, pb.t, to / dist[:, None])
                vis = np.abs(first - dist) < 1e-3
                x1.append(src[vis])
                x2.append(uv[vis])
                have += int(vis.sum())
            if have >= per_pair_count:
                break
        if have == 0:
            continue
        m = np.concatenate([np.concatenate(x1), np.concatenate(x2)], axis=1)[:per_pair_count]
        if len(m) < per_pair_count:
            log.warning("pair (%d, %d): only %d covisible points", a, b, len(m))
        if noise_px > 0:
            m = m + prng.normal(0.0, noise_px, size=m.shape)
        is_out = np.zeros(len(m), dtype=bool)
        n_out = int(round(outlier_rate * len(m)))
        if n_out:
            which = prng.choice(len(m), size=n_out, replace=False)
            m[which] = _outlier_rows(prng, fundamental_matrix(pa, pb, K), K, n_out)
            is_out[which] = True
        db.append(PairMatches(int(traj.ids[a]), int(traj.ids[b]), m))
        labels.append(is_out)
    if not db:
        log.warning("no covisible frame pairs")
    return (db, labels) if return_labels else db


# ---- evaluation ---------------------------------------------------------------------


@dataclass
class Sim3:
    scale: float
    R: np.ndarray
    T: np.ndarray

    def apply_points(self, X):
        return self.scale * (np.asarray(X) @ self.R.T) + self.T

    def apply(self, traj):
        poses = [Pose6.from_matrix(self.R @ p.R, self.apply_points(p.t)) for p in traj.poses]
        return Trajectory(traj.ids.copy(), poses, traj.intrinsics)


def umeyama_align(est, gt):
    """Least-squares similarity mapping estimated camera centres onto ground truth.

    Returns ``(sim3, aligned_est)``.
    """
    if not np.array_equal(np.sort(est.ids), np.sort(gt.ids)):
        raise InvalidArgument("trajectories cover different frames")
    if len(est) < 3:
        raise DegenerateGeometry("alignment needs at least three cameras")
    order = {fid: k for k, fid in enumerate(gt.ids)}
    X = est.centres
    Y = gt.centres[[order[f] for f in est.ids]]
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateGeometry("camera centres are collinear")
    cov = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_x = np.sum(Xc * Xc) / len(X)
    s = float(np.trace(np.diag(D) @ S) / var_x)
    T = my - s * R @ mx
    sim = Sim3(s, R, T)
    return sim, sim.apply(est)


@dataclass
class EvalReport:
    ids: np.ndarray
    rot_err_deg: np.ndarray
    trans_err: np.ndarray
    sim3: Sim3 = None

    @property
    def mean_rot(self):
        return float(np.mean(self.rot_err_deg)) if len(self.ids) else 0.0

    @property
    def mean_trans(self):
        return float(np.mean(self.trans_err)) if len(self.ids) else 0.0


def ate(est_aligned, gt, sim3=None):
    """Per-frame rotation error (degrees) and centre error (scene units x 1000)."""
    if not np.array_equal(np.sort(est_aligned.ids), np.sort(gt.ids)):
        raise InvalidArgument("trajectories cover different frames")
    order = {fid: k for k, fid in enumerate(gt.ids)}
    rot, trans = [], []
    for fid, pose in zip(est_aligned.ids, est_aligned.poses):
        ref = gt.poses[order[fid]]
        # chordal form of the angle of ref.R^T pose.R; stays accurate near zero where arccos does not
        chord = np.linalg.norm(pose.R - ref.R) / (2.0 * np.sqrt(2.0))
        rot.append(np.degrees(2.0 * np.arcsin(min(chord, 1.0))))
        trans.append(1000.0 * np.linalg.norm(pose.t - ref.t))
    return EvalReport(est_aligned.ids.copy(), np.array(rot), np.array(trans), sim3)


def evaluate(est, gt):
    """Align ``est`` to ``gt`` and compute the trajectory errors."""
    sim, aligned = umeyama_align(est, gt)
    return ate(aligned, gt, sim)


def psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument("images differ in size")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return np.inf
    return 10.0 * np.log10(1.0 / mse)


# ---- pose files -------------------------------------------------------------------


def _fmt(v):
    return format(float(v) + 0.0, ".17g")


def write_poses(path, traj):
    """``<frame_id> <tx> <ty> <tz> <rx> <ry> <rz>`` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for fid, pose in zip(traj.ids, traj.poses):
            fh.write(" ".join([str(int(fid))] + [_fmt(v) for v in (*pose.t, *pose.r)]) + "\n")


def read_poses(path, intrinsics=None):
    ids, poses = [], []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 7:
                raise ParseError(f"expected 7 fields, found {len(parts)}", path, lineno)
            try:
                fid = int(parts[0])
                vals = [float(v) for v in parts[1:]]
            except ValueError:
                raise ParseError("malformed number", path, lineno) from None
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite pose value", path, lineno)
            if fid in seen:
                raise ParseError(f"duplicate frame id {fid}", path, lineno)
            seen.add(fid)
            ids.append(fid)
            poses.append(Pose6(vals[3:6], vals[0:3]))
    return Trajectory(np.array(ids, dtype=np.int64), poses, intrinsics)


# ---- benchmark datasets -------------------------------------------------------------


@dataclass
class Dataset:
    images: list
    initial: Trajectory
    intrinsics: Intrinsics
    matches: list = field(default_factory=list)
    gt: Trajectory = None

    @property
    def n_frames(self):
        return len(self.initial)


@dataclass(frozen=True)
class BenchmarkSpec:
    n_frames: int = 24
    radius: float = 2.0
    elevation_deg: float = 20.0
    width: int = 256
    height: int = 256
    fov_deg: float = 45.0
    rot_noise_deg: float = 0.5
    trans_noise_frac: float = 0.01
    per_pair_count: int = 500
    noise_px: float = 1.0
    outlier_rate: float = 0.1
    max_angle_deg: float = 45.0
    seed: int = 0


def make_benchmark(spec=BenchmarkSpec(), scene=None):
    """Ground-truth orbit, perturbed initial poses, images and matches."""
    scene = two_sphere_scene() if scene is None else scene
    K = Intrinsics.from_fov(spec.width, spec.height, spec.fov_deg)
    gt = orbit_trajectory(spec.n_frames, spec.radius, spec.elevation_deg, K)
    init = perturb_poses(gt, NoiseSpec(spec.rot_noise_deg, spec.trans_noise_frac, spec.seed))
    images = [render_gt_image(scene, p, K) for p in gt.poses]
    matches = synth_correspondences(scene, gt, spec.per_pair_count, spec.noise_px, spec.outlier_rate,
                                    spec.seed + 1, spec.max_angle_deg)
    return Dataset(images, init, K, matches, gt)
