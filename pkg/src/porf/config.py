"""Run configuration files: ``[section]`` headers with ``key = value`` lines.

Sections are ``scene``, ``trajectory``, ``noise``, ``correspondences``,
``train`` and ``paths``. Unknown sections or keys are rejected, and every
value is validated by the type that owns it. Relative paths are resolved
against the directory holding the config file.
"""

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError, InvalidArgument
from .harness import Box, NoiseSpec, Sphere, SyntheticScene, two_sphere_scene
from .trainer import TrainConfig

SECTIONS = ("scene", "trajectory", "noise", "correspondences", "train", "paths")


@dataclass
class SceneSection:
    name: str = "two_spheres"
    primitives: str = ""
    blend: float = 0.05
    palette_freq: float = 12.0

    def build(self):
        if self.name == "two_spheres" and not self.primitives:
            base = two_sphere_scene()
            return replace(base, blend=self.blend, palette_freq=self.palette_freq)
        return SyntheticScene(parse_primitives(self.primitives), self.blend, self.palette_freq)


@dataclass
class TrajectorySection:
    n_frames: int = 24
    radius: float = 2.0
    elevation_deg: float = 20.0
    width: int = 256
    height: int = 256
    fov_deg: float = 45.0


@dataclass
class CorrespondenceSection:
    per_pair_count: int = 500
    noise_px: float = 1.0
    outlier_rate: float = 0.1
    max_angle_deg: float = 45.0
    seed: int = 1


@dataclass
class PathsSection:
    data_dir: str = "data"
    out_dir: str = "out"
    checkpoint: str = ""


@dataclass
class RunConfig:
    scene: SceneSection = field(default_factory=SceneSection)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(0.5, 0.01, 0))
    correspondences: CorrespondenceSection = field(default_factory=CorrespondenceSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsSection = field(default_factory=PathsSection)
    base_dir: str = "."
    present: tuple = ()

    def path(self, key):
        value = getattr(self.paths, key)
        return value if os.path.isabs(value) else os.path.normpath(os.path.join(self.base_dir, value))

    @property
    def checkpoint_path(self):
        if self.paths.checkpoint:
            return self.path("checkpoint")
        return os.path.join(self.path("out_dir"), "checkpoint.bin")


def parse_primitives(text):
    """``sphere cx cy cz r [phase]`` and ``box cx cy cz hx hy hz [phase]``, separated by ``;``."""
    prims = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        kind, *nums = chunk.split()
        try:
            vals = [float(v) for v in nums]
        except ValueError:
            raise ConfigError(f"non-numeric primitive parameter in {chunk!r}", "scene.primitives") from None
        if kind == "sphere" and len(vals) in (4, 5):
            prims.append(Sphere(tuple(vals[:3]), vals[3], vals[4] if len(vals) == 5 else 0.0))
        elif kind == "box" and len(vals) in (6, 7):
            prims.append(Box(tuple(vals[:3]), tuple(vals[3:6]), vals[6] if len(vals) == 7 else 0.0))
        else:
            raise ConfigError(f"cannot parse primitive {chunk!r}", "scene.primitives")
    if not prims:
        raise ConfigError("scene has no primitives", "scene.primitives")
    return tuple(prims)


def _convert(raw, default, key):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {type(default).__name__}", key) from None


def _build(cls, items, section, base):
    known = {f.name for f in fields(cls)}
    values = asdict(base) if base is not None else {}
    for key, raw in items:
        name = f"{section}.{key}"
        if key not in known:
            raise ConfigError(f"unknown key {name!r}", name)
        default = values.get(key, getattr(cls(), key) if base is None else None)
        values[key] = _convert(raw, default, name)
    try:
        return cls(**values)
    except InvalidArgument as exc:
        raise ConfigError(f"[{section}] {exc}", section) from None
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}", section) from None


def parse_config(text, base_dir=".", require=()):
    """Parse config text; ``require`` lists sections that must be present."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",),
                                   comment_prefixes=("#",), delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]", sec)
    for sec in require:
        if not cp.has_section(sec):
            raise ConfigError(f"missing section [{sec}]", sec)
    defaults = RunConfig()
    parts = {}
    for sec in SECTIONS:
        base = getattr(defaults, sec)
        items = cp.items(sec) if cp.has_section(sec) else []
        parts[sec] = _build(type(base), items, sec, base)
    cfg = RunConfig(**parts, base_dir=base_dir, present=tuple(cp.sections()))
    validate(cfg)
    return cfg


def load_config(path, require=()):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "config") from None
    return parse_config(text, os.path.dirname(os.path.abspath(path)), require)


def validate(cfg):
    t = cfg.trajectory
    if t.n_frames < 2:
        raise ConfigError("trajectory.n_frames must be at least 2", "trajectory.n_frames")
    if t.radius <= 1:
        raise ConfigError("trajectory.radius must exceed 1 (cameras outside the unit ball)", "trajectory.radius")
    if t.width < 1 or t.height < 1:
        raise ConfigError("image size must be positive", "trajectory.width")
    if not 0 < t.fov_deg < 180:
        raise ConfigError("trajectory.fov_deg must lie in (0, 180)", "trajectory.fov_deg")
    c = cfg.correspondences
    if c.per_pair_count < 1:
        raise ConfigError("correspondences.per_pair_count must be at least 1", "correspondences.per_pair_count")
    if not 0 <= c.outlier_rate < 1:
        raise ConfigError("correspondences.outlier_rate must lie in [0, 1)", "correspondences.outlier_rate")
    if c.noise_px < 0:
        raise ConfigError("correspondences.noise_px must be non-negative", "correspondences.noise_px")
    if cfg.scene.primitives:
        parse_primitives(cfg.scene.primitives)
    elif cfg.scene.name != "two_spheres":
        raise ConfigError(f"unknown scene {cfg.scene.name!r} and no primitives given", "scene.name")
    return cfg


def with_overrides(cfg, mode=None, iterations=None, seed=None, threads=None, out=None):
    """Apply command-line flags on top of a parsed config."""
    train = cfg.train
    noise = cfg.noise
    corr = cfg.correspondences
    paths = cfg.paths
    changes = {}
    if mode is not None:
        changes["mode"] = mode
    if iterations is not None:
        changes["iterations"] = iterations
    if threads is not None:
        changes["threads"] = threads
    if seed is not None:
        changes["seed"] = seed
        noise = replace(noise, seed=seed)
        corr = replace(corr, seed=seed + 1)
    try:
        train = replace(train, **changes)
    except InvalidArgument as exc:
        raise ConfigError(str(exc), "train") from None
    if out is not None:
        paths = replace(paths, out_dir=os.path.abspath(out))
    return replace(cfg, train=train, noise=noise, correspondences=corr, paths=paths)


def dump_config(cfg):
    """Resolved config in the same file format."""
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        for key, value in asdict(getattr(cfg, sec)).items():
            if isinstance(value, tuple):
                value = " ".join(str(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
