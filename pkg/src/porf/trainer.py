"""Joint optimisation of camera poses and the neural surface.

Every iteration renders a batch of rays from one image and, in the modes that
use correspondences, evaluates the epipolar loss on a few sampled pairs.
Backpropagation runs in two stages. The render tape treats the chosen
camera's refined pose as a leaf; its adjoint is then pushed, together with
the epipolar loss, through a separate pose tape that holds only the pose
parameters. The epipolar term therefore cannot reach the SDF or colour
networks, by construction rather than by masking.

Modes: ``baseline`` (per-frame residuals), ``porf`` (shared pose field),
``baseline_eg`` and ``full`` (the same two with the epipolar loss).
"""

import csv
import ctypes
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import render
from .epipolar import epipolar_loss, sample_pairs
from .errors import DivergenceError, InvalidArgument
from .field import PorfNetwork, PoseBank, bank_refined_pose, refined_pose
from .harness import Trajectory, evaluate

log = logging.getLogger(__name__)

MODES = ("baseline", "porf", "baseline_eg", "full")
ABLATION_LABELS = {"baseline": "L1", "porf": "L2", "baseline_eg": "L3", "full": "L4"}
RUNLOG_FIELDS = ("iter", "l_colour", "l_reg", "l_eg", "rot_err_deg", "trans_err", "wall_s")
DIVERGENCE_PATIENCE = 10
BACKGROUND_SEGMENT = "background"


def _tune_allocator():
    # Large temporaries are freed and re-requested every iteration. Keeping
    # them on the heap instead of fresh mmaps avoids repeated page faults,
    # which otherwise cost about a third of the run time.
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 25)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()


@dataclass
class TrainConfig:
    iterations: int = 5000
    rays: int = 512
    samples: int = 32
    n_pairs: int = 20
    delta: float = 20.0
    lam: float = 0.1
    beta: float = 1.0
    alpha: float = 0.01
    lr_render: float = 5e-4
    lr_pose: float = 1e-4
    lr_floor: float = 0.05
    seed: int = 0
    mode: str = "full"
    preset: str = "desk"
    precision: str = "float32"
    porf_hidden: tuple = (256, 256)
    porf_input_gain: float = 0.0
    near: float = 0.05
    far: float = 4.0
    log_every: int = 100
    ray_chunks: int = 1
    threads: int = 1
    background: str = "learned"
    init_radius: float = 0.5
    pretrain_steps: int = 600

    def __post_init__(self):
        self.porf_hidden = tuple(int(h) for h in self.porf_hidden)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.preset not in render.PRESETS:
            raise InvalidArgument(f"unknown network preset {self.preset!r}")
        if self.precision not in ("float32", "float64"):
            raise InvalidArgument("precision must be float32 or float64")
        if self.iterations < 0:
            raise InvalidArgument("iterations must be non-negative")
        for name in ("rays", "n_pairs", "log_every", "ray_chunks", "threads"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be at least 1")
        if self.samples < 2:
            raise InvalidArgument("samples must be at least 2")
        for name in ("delta", "alpha", "lr_render", "lr_pose"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.porf_input_gain < 0:
            raise InvalidArgument("porf_input_gain must be non-negative (0 keeps raw inputs)")
        if self.lam < 0 or self.beta < 0:
            raise InvalidArgument("loss weights must be non-negative")
        if not 0 < self.lr_floor <= 1:
            raise InvalidArgument("lr_floor must lie in (0, 1]")
        if self.background not in ("learned", "none"):
            raise InvalidArgument("background must be 'learned' or 'none'")
        if not 0 <= self.near < self.far:
            raise InvalidArgument("need 0 <= near < far")
        if self.ray_chunks > self.rays:
            raise InvalidArgument("more ray chunks than rays")

    @property
    def uses_eg(self):
        return self.mode in ("baseline_eg", "full")

    @property
    def uses_porf(self):
        return self.mode in ("porf", "full")


@dataclass
class RunLog:
    rows: list = field(default_factory=list)
    initial_rot: float = None
    initial_trans: float = None

    def append(self, **row):
        if self.rows and row["iter"] <= self.rows[-1]["iter"]:
            raise InvalidArgument("log iterations must increase")
        self.rows.append({k: row.get(k, math.nan) for k in RUNLOG_FIELDS})

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def iterations_to_fraction(self, frac=0.5):
        """First logged iteration whose rotation error is at most ``frac`` of the initial one."""
        if self.initial_rot is None:
            return None
        for r in self.rows:
            if r["rot_err_deg"] <= frac * self.initial_rot:
                return int(r["iter"])
        return None

    def write_csv(self, path, deterministic=False):
        """CSV with the fixed header; ``deterministic`` blanks the wall-clock column."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RUNLOG_FIELDS)
            for r in self.rows:
                vals = [int(r["iter"])]
                for k in RUNLOG_FIELDS[1:]:
                    v = r[k]
                    if k == "wall_s" and deterministic:
                        vals.append("")
                    else:
                        vals.append(format(float(v), ".17g"))
                w.writerow(vals)

    @classmethod
    def read_csv(cls, path):
        out = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for r in reader:
                out.rows.append({k: (int(r[k]) if k == "iter" else float(r[k] or "nan")) for k in RUNLOG_FIELDS})
        return out


@dataclass
class TrainState:
    """Everything the optimiser owns: parameters, Adam moments and the RNG."""

    config: TrainConfig
    params: ad.ParamVector
    adam: ad.AdamState
    sdf: render.SdfField
    colour: render.ColourField
    porf: PorfNetwork
    bank: PoseBank
    initial: list
    rng: np.random.Generator
    pose_mask: np.ndarray
    iteration: int = 0


@dataclass
class TrainResult:
    poses: Trajectory
    log: RunLog
    state: TrainState
    checkpoint: str = None
    diverged: bool = False


def check_dataset(dataset):
    n = len(dataset.initial)
    if n < 2:
        raise InvalidArgument("need at least two frames")
    if not dataset.initial.is_contiguous():
        raise InvalidArgument("frame ids must be 0..N-1")
    if len(dataset.images) != n:
        raise InvalidArgument(f"{len(dataset.images)} images for {n} poses")
    K = dataset.intrinsics
    for k, img in enumerate(dataset.images):
        if np.shape(img) != (K.height, K.width, 3):
            raise InvalidArgument(f"image {k} is {np.shape(img)}, expected {(K.height, K.width, 3)}")
    for pair in dataset.matches:
        if pair.j >= n:
            raise InvalidArgument(f"pair ({pair.i}, {pair.j}) refers to a missing frame")
    if dataset.gt is not None and len(dataset.gt) != n:
        raise InvalidArgument("ground truth covers a different number of frames")


def border_colour(images):
    """Per-channel median of the outermost pixel ring over all images."""
    ring = [np.concatenate([im[0], im[-1], im[1:-1, 0], im[1:-1, -1]]) for im in images]
    return np.median(np.concatenate(ring), axis=0)


def init_state(config, dataset):
    check_dataset(dataset)
    n = len(dataset.initial)
    rng = np.random.default_rng(config.seed)
    sdf, colour = render.make_fields(config.preset, precision=config.precision)
    radius = float(np.mean(np.linalg.norm(dataset.initial.centres, axis=1)))
    if config.porf_input_gain > 0:
        porf = PorfNetwork.standardised(dataset.initial.poses, config.porf_input_gain, config.alpha,
                                        config.porf_hidden, scene_scale=radius)
    else:
        porf = PorfNetwork(n, config.alpha, config.porf_hidden, scene_scale=radius)
    bank = PoseBank(n)
    pv = ad.ParamVector()
    sdf.add_params(pv, rng)
    colour.add_params(pv, rng)
    pv.add_segment(porf.segment, porf.init_params(rng))
    pv.add_segment(bank.segment, bank.init_params())
    if config.background == "learned":
        c = np.clip(border_colour(dataset.images), 0.01, 0.99)
        pv.add_segment(BACKGROUND_SEGMENT, np.log(c / (1.0 - c)))
    if config.pretrain_steps:
        render.pretrain_sphere(sdf, pv, config.init_radius, config.pretrain_steps,
                               rng=np.random.default_rng([config.seed, 1]))
    pose_mask = pv.mask(porf.segment, bank.segment)
    return TrainState(config, pv, ad.AdamState.zeros(len(pv)), sdf, colour, porf, bank,
                      list(dataset.initial.poses), rng, pose_mask)


def pose_provider(state, tape):
    """Maps an integer array of frames to tracked refined poses for the run's mode."""
    cfg = state.config

    def provide(frames):
        frames = np.asarray(frames, dtype=np.int64)
        init = [state.initial[f] for f in frames]
        if cfg.uses_porf:
            return refined_pose(state.porf, state.params, frames, init, tape)
        return bank_refined_pose(state.bank, state.params, frames, init, tape)

    return provide


def current_poses(state):
    """Refined poses of every frame as a :class:`Trajectory`."""
    tape = ad.Tape()
    poses = pose_provider(state, tape)(np.arange(len(state.initial))).to_poses()
    return Trajectory(np.arange(len(poses)), poses)


def learning_rates(state, iteration):
    cfg = state.config
    total = max(cfg.iterations, 1)
    decay = cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * min(iteration, total) / total))
    return np.where(state.pose_mask, cfg.lr_pose, cfg.lr_render) * decay


def background_colour(params, tape):
    """Learned background RGB (sigmoid of three logits), or ``None`` if absent."""
    if BACKGROUND_SEGMENT not in params.segments:
        return None
    return ad.sigmoid(tape.param(params, BACKGROUND_SEGMENT, 0, (3,)))


def _render_chunk(state, r, t, K, pixels, target, t_samples, weight):
    """Render one chunk on its own tape; returns losses and gradients."""
    cfg = state.config
    tape = ad.Tape()
    r_leaf = tape.leaf(r)
    t_leaf = tape.leaf(t)
    o, d = render.camera_rays(r_leaf, t_leaf, K, pixels)
    res = render.render_rays(state.sdf, state.colour, state.params, o, d, t_samples, tape,
                             background_colour(state.params, tape))
    l_col = render.colour_loss(res.rgb, target)
    l_reg = render.eikonal_loss(res.sdf_grad)
    loss = render.nsr_loss(l_col, l_reg, cfg.lam) * weight
    tape.backward(loss)
    return (float(l_col.value) * weight, float(l_reg.value) * weight,
            tape.param_grad(state.params), tape.grad(r_leaf), tape.grad(t_leaf))


def iteration_step(state, dataset, pool=None, apply=True):
    """One optimisation step. Returns a dict of losses and the gradient pieces."""
    cfg = state.config
    rng = state.rng
    K = dataset.intrinsics
    n = len(state.initial)
    k = int(rng.integers(n))
    flat = rng.integers(K.width * K.height, size=cfg.rays)
    rows, cols = np.divmod(flat, K.width)
    pixels = np.stack([cols + 0.5, rows + 0.5], axis=1)
    target = dataset.images[k][rows, cols]
    t_samples = render.stratified_samples(cfg.near, cfg.far, cfg.samples, rng, size=cfg.rays)
    pairs = sample_pairs(dataset.matches, cfg.n_pairs, rng) if cfg.uses_eg else None

    pose_tape = ad.Tape()
    provide = pose_provider(state, pose_tape)
    cam = provide(np.array([k]))
    r_val, t_val = cam.r.value, cam.t.value

    bounds = np.linspace(0, cfg.rays, cfg.ray_chunks + 1).astype(int)
    jobs = [(state, r_val, t_val, K, pixels[a:b], target[a:b], t_samples[a:b], (b - a) / cfg.rays)
            for a, b in zip(bounds[:-1], bounds[1:])]
    if pool is not None and len(jobs) > 1:
        parts = list(pool.map(lambda j: _render_chunk(*j), jobs))
    else:
        parts = [_render_chunk(*j) for j in jobs]
    l_col = sum(p[0] for p in parts)
    l_reg = sum(p[1] for p in parts)
    g_render = parts[0][2]
    g_r, g_t = parts[0][3], parts[0][4]
    for p in parts[1:]:
        g_render = g_render + p[2]
        g_r = g_r + p[3]
        g_t = g_t + p[4]

    seeds = [(cam.r, g_r), (cam.t, g_t)]
    l_eg = 0.0
    batch = None
    if cfg.uses_eg:
        eg, batch = epipolar_loss(pairs, provide, K, cfg.delta, pose_tape)
        l_eg = float(eg.value)
        if cfg.beta > 0:
            seeds.append((eg, cfg.beta))
    pose_tape.backward(seeds)
    g_pose = pose_tape.param_grad(state.params)
    grad = g_render + g_pose
    if apply:
        ad.adam_step(state.params, grad, state.adam, learning_rates(state, state.iteration))
        state.iteration += 1
    return dict(frame=k, l_colour=l_col, l_reg=l_reg, l_eg=l_eg, grad=grad,
                grad_render=g_render, grad_pose=g_pose, pose_tape=pose_tape, batch=batch)


def _pose_errors(state, gt):
    if gt is None:
        return math.nan, math.nan
    rep = evaluate(current_poses(state), gt)
    return rep.mean_rot, rep.mean_trans


def train(config, dataset, checkpoint_path=None, state=None, progress=None):
    """Run ``config.iterations`` steps; returns a :class:`TrainResult`.

    Non-finite losses at ``DIVERGENCE_PATIENCE`` consecutive logging steps
    raise :class:`DivergenceError`; the last finite parameters are written to
    ``checkpoint_path`` (when given) before raising.
    """
    config.validate()
    state = init_state(config, dataset) if state is None else state
    runlog = RunLog()
    rot0, trans0 = _pose_errors(state, dataset.gt)
    runlog.initial_rot, runlog.initial_trans = rot0, trans0
    good = state.params.copy()
    bad_logs = 0
    t_start = time.perf_counter()
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 and config.ray_chunks > 1 else None
    try:
        for it in range(config.iterations):
            out = iteration_step(state, dataset, pool)
            if it == 0:
                runlog.append(iter=0, l_colour=out["l_colour"], l_reg=out["l_reg"], l_eg=out["l_eg"],
                              rot_err_deg=rot0, trans_err=trans0, wall_s=time.perf_counter() - t_start)
            done = it + 1
            if done % config.log_every == 0 or done == config.iterations:
                rot, trans = _pose_errors(state, dataset.gt)
                losses = (out["l_colour"], out["l_reg"], out["l_eg"])
                runlog.append(iter=done, l_colour=losses[0], l_reg=losses[1], l_eg=losses[2],
                              rot_err_deg=rot, trans_err=trans, wall_s=time.perf_counter() - t_start)
                if all(np.isfinite(losses)) and np.all(np.isfinite(state.params.data)):
                    good = state.params.copy()
                    bad_logs = 0
                else:
                    bad_logs += 1
                    log.warning("non-finite loss at iteration %d (%d in a row)", done, bad_logs)
                    if bad_logs >= DIVERGENCE_PATIENCE:
                        if checkpoint_path:
                            ad.save_checkpoint(checkpoint_path, good)
                        raise DivergenceError(f"training diverged at iteration {done}", checkpoint_path)
                log.info("iter %d  colour %.5f  eik %.5f  eg %.4f  rot %.4f deg  trans %.3f",
                         done, *losses, rot, trans)
                if progress is not None:
                    progress(done, runlog)
    finally:
        if pool is not None:
            pool.shutdown()
    if checkpoint_path:
        ad.save_checkpoint(checkpoint_path, state.params)
    return TrainResult(current_poses(state), runlog, state, checkpoint_path)


@dataclass
class AblationRow:
    mode: str
    label: str
    final_rot: float
    final_trans: float
    iters_to_half: int
    diverged: bool = False
    log: RunLog = None
    poses: Trajectory = None


def ablate(config, dataset, modes=MODES, progress=None):
    """Train every mode with identical seeds and budgets."""
    rows = []
    for mode in modes:
        cfg = replace(config, mode=mode)
        try:
            res = train(cfg, dataset, progress=progress)
            rows.append(AblationRow(mode, ABLATION_LABELS[mode], res.log.rows[-1]["rot_err_deg"] if res.log.rows
                                    else res.log.initial_rot,
                                    res.log.rows[-1]["trans_err"] if res.log.rows else res.log.initial_trans,
                                    res.log.iterations_to_fraction(0.5), False, res.log, res.poses))
        except DivergenceError as exc:
            log.error("mode %s diverged: %s", mode, exc)
            rows.append(AblationRow(mode, ABLATION_LABELS[mode], math.nan, math.nan, None, True))
    return rows


ABLATION_FIELDS = ("mode", "final_rot_deg", "final_trans", "iters_to_half")


def write_ablation_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_FIELDS)
        for r in rows:
            half = "" if r.iters_to_half is None else str(r.iters_to_half)
            status = "diverged" if r.diverged else ""
            w.writerow([r.mode, format(r.final_rot, ".17g") if not status else status,
                        format(r.final_trans, ".17g") if not status else status, half])


def read_ablation_csv(path):
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            div = r["final_rot_deg"] == "diverged"
            out.append(AblationRow(r["mode"], ABLATION_LABELS[r["mode"]],
                                   math.nan if div else float(r["final_rot_deg"]),
                                   math.nan if div else float(r["final_trans"]),
                                   int(r["iters_to_half"]) if r["iters_to_half"] else None, div))
    return out


def format_ablation(rows, config=None):
    head = ""
    if config is not None:
        head = (f"# beta={config.beta} lambda={config.lam} delta={config.delta} "
                f"iterations={config.iterations} seed={config.seed}\n")
    lines = [f"{'mode':<12} {'label':<5} {'rot_err_deg':>12} {'trans_err':>10} {'iters_to_half':>14}"]
    for r in rows:
        if r.diverged:
            lines.append(f"{r.mode:<12} {r.label:<5} {'diverged':>12} {'diverged':>10} {'-':>14}")
            continue
        half = "-" if r.iters_to_half is None else str(r.iters_to_half)
        lines.append(f"{r.mode:<12} {r.label:<5} {r.final_rot:>12.5f} {r.final_trans:>10.3f} {half:>14}")
    return head + "\n".join(lines) + "\n"


def config_dict(config):
    return asdict(config)
