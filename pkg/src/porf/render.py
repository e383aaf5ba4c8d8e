"""Differentiable SDF volume rendering (NeuS style) at desk scale.

Points along a ray are contracted into the ball of radius 2, the SDF network
turns consecutive samples into opacities through a learned logistic
sharpness, and colours are alpha-composited front to back. The SDF gradient
with respect to the contracted position is built on the same tape, so the
Eikonal penalty and the colour network's normal input are differentiable
too, with respect to network weights as well as camera poses.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import diffgeom
from .errors import InvalidArgument


def contract(x):
    """Identity inside the unit ball, ``(2 - 1/|x|) x/|x|`` outside.

    Works on numpy arrays and tracked values of shape ``(..., 3)``.
    """
    v = ad._val(x)
    sq = np.sum(v * v, axis=-1, keepdims=True)
    outside = sq > 1.0
    if not outside.any():
        return x
    if not isinstance(x, ad.Var):
        n = np.sqrt(np.where(outside, sq, 1.0))
        return np.where(outside, (2.0 - 1.0 / n) * (x / n), x)
    n = ad.sqrt(ad.where(outside, ad.sum_(ad.square(x), axis=-1, keepdims=True), 1.0))
    scale = (2.0 - 1.0 / n) / n
    return ad.where(outside, x * scale, x)


def stratified_samples(near, far, n, rng=None, size=()):
    """One depth per equal-width bin of ``[near, far]``.

    With ``rng=None`` every draw sits at its bin midpoint. ``size`` prepends
    batch dimensions (e.g. one row per ray).
    """
    if not (0 <= near < far) or n < 2:
        raise InvalidArgument("need 0 <= near < far and at least two samples")
    size = (size,) if np.isscalar(size) else tuple(size)
    width = (far - near) / n
    lo = near + width * np.arange(n)
    u = np.full(size + (n,), 0.5) if rng is None else rng.uniform(size=size + (n,))
    t = lo + width * u
    return np.clip(t, near, far)


def _log_sigmoid(x):
    return -ad.softplus(-x)


def neus_alpha(f_i, f_next, s):
    """Opacity of the section between two consecutive SDF samples.

    Computed as ``max(1 - Phi(f_next)/Phi(f_i), 0)`` with the ratio taken in
    log space, which equals ``(Phi(f_i) - Phi(f_next)) / Phi(f_i)`` without
    underflow at large sharpness.
    """
    d = _log_sigmoid(f_next * s) - _log_sigmoid(f_i * s)
    # d > 0 means alpha < 0, which the clamp maps to 0 anyway; capping first avoids exp overflow
    return ad.clip(1.0 - ad.exp(ad.minimum(d, 0.0)), 0.0, 1.0)


def composite(alphas, colours):
    """Front-to-back compositing: returns ``(transmittance, weights, rgb)``.

    ``alphas`` is ``(m, n)``, ``colours`` ``(m, n, 3)``.
    """
    T = ad.cumprod_exclusive(1.0 - alphas)
    w = T * alphas
    m, n = np.shape(ad._val(alphas))
    rgb = ad.sum_(w.reshape((m, n, 1)) * colours, axis=1)
    return T, w, rgb


def positional_encoding(p, n_freq):
    """``[p, sin(2^k pi p), cos(2^k pi p)]_k`` plus pieces needed for its Jacobian."""
    freqs = np.pi * 2.0 ** np.arange(n_freq)
    M = np.zeros((3, 3 * n_freq))
    for k, f in enumerate(freqs):
        M[np.arange(3), 3 * k + np.arange(3)] = f
    if n_freq == 0:
        return p, None, None, M
    arg = ad.matmul(p, M)
    S, C = ad.sin(arg), ad.cos(arg)
    return ad.concat([p, S, C], axis=-1), S, C, M


def _check_precision(name):
    if name not in ("float64", "float32"):
        raise InvalidArgument(f"precision must be float64 or float32, not {name!r}")


@dataclass(frozen=True)
class SdfField:
    hidden: tuple = (64, 64, 64, 64)
    n_freq: int = 4
    segment: str = "sdf"
    init_s: float = 10.0
    precision: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        _check_precision(self.precision)

    @property
    def log_s_segment(self):
        return self.segment + "_log_s"

    @property
    def in_width(self):
        return 3 + 6 * self.n_freq

    @property
    def spec(self):
        return ad.MlpSpec(self.in_width, self.hidden, 1)

    def add_params(self, pv, rng):
        pv.add_segment(self.segment, ad.init_mlp(self.spec, rng))
        pv.add_segment(self.log_s_segment, [np.log(self.init_s)])
        return pv

    def sharpness(self, params, tape):
        return ad.exp(tape.param(params, self.log_s_segment, 0, (1,)))

    def evaluate(self, params, p, tape):
        """SDF values ``(N,)``, spatial gradients ``(N, 3)`` and the encoding of ``p``."""
        enc, S, C, M = positional_encoding(p, self.n_freq)
        out, g_enc = ad.mlp_forward_with_input_grad(params, self.spec, enc, tape, self.segment,
                                                    dtype=np.dtype(self.precision))
        grad = g_enc[:, 0:3]
        if self.n_freq:
            k = 3 * self.n_freq
            g_sin = g_enc[:, 3 : 3 + k]
            g_cos = g_enc[:, 3 + k : 3 + 2 * k]
            grad = grad + ad.matmul_t(g_sin * C - g_cos * S, M)
        return out[:, 0], grad, enc


@dataclass(frozen=True)
class ColourField:
    """RGB from encoded position, view direction and SDF normal."""

    hidden: tuple = (64, 64, 64)
    segment: str = "colour"
    enc_width: int = 27
    precision: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        _check_precision(self.precision)

    @property
    def spec(self):
        return ad.MlpSpec(self.enc_width + 6, self.hidden, 3)

    def add_params(self, pv, rng):
        pv.add_segment(self.segment, ad.init_mlp(self.spec, rng))
        return pv

    def evaluate(self, params, enc, dirs, normals, tape):
        x = ad.concat([enc, dirs, normals], axis=-1)
        out = ad.mlp_forward(params, self.spec, x, tape, self.segment, dtype=np.dtype(self.precision))
        return ad.sigmoid(out)


PRESETS = {
    "desk": dict(sdf_hidden=(64,) * 4, colour_hidden=(64,) * 3),
    "paper": dict(sdf_hidden=(256,) * 8, colour_hidden=(256,) * 4),
}


def make_fields(preset="desk", n_freq=4, precision="float64"):
    """SDF and colour networks for a named size preset.

    ``precision`` is the working precision of the network layers; parameters
    and everything outside the layers stay float64.
    """
    if preset not in PRESETS:
        raise InvalidArgument(f"unknown network preset {preset!r}")
    cfg = PRESETS[preset]
    sdf = SdfField(hidden=cfg["sdf_hidden"], n_freq=n_freq, precision=precision)
    colour = ColourField(hidden=cfg["colour_hidden"], enc_width=sdf.in_width, precision=precision)
    return sdf, colour


@dataclass
class RenderResult:
    t: np.ndarray
    points: object
    sdf: object
    alphas: object
    transmittance: object
    weights: object
    colours: object
    rgb: object
    sdf_grad: object


def camera_rays(r, t, K, pixels):
    """World-space ray origins and unit directions through pixel coordinates.

    ``r``/``t`` describe one camera-to-world pose (shape ``(1, 3)``, tracked or
    not); ``pixels`` is ``(m, 2)`` in continuous pixel coordinates.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    d_cam = K.pixel_rays(pixels[:, 0], pixels[:, 1])
    R = diffgeom.rodrigues(r)[0]
    d = ad.matmul_t(d_cam, R)
    d = d / ad.sqrt(ad.sum_(ad.square(d), axis=1, keepdims=True))
    o = t + np.zeros((len(pixels), 3))
    return o, d


def render_rays(sdf, colour, params, origins, dirs, t_samples, tape, background=None):
    """Render a batch of rays; ``t_samples`` is ``(m, n)`` and increasing per row.

    ``background`` (an RGB triple, tracked or constant) is added with the
    transmittance left after the last sample; ``None`` leaves it out.
    """
    t_samples = np.asarray(t_samples, dtype=np.float64)
    m, n = t_samples.shape
    if n > 1 and np.any(np.diff(t_samples, axis=1) <= 0):
        raise InvalidArgument("sample depths must be strictly increasing")
    o = ad.reshape(origins, (m, 1, 3)) if isinstance(origins, ad.Var) else np.reshape(origins, (m, 1, 3))
    d = ad.reshape(dirs, (m, 1, 3)) if isinstance(dirs, ad.Var) else np.reshape(dirs, (m, 1, 3))
    pts = o + t_samples[:, :, None] * d
    p = contract(ad.reshape(pts, (m * n, 3)) if isinstance(pts, ad.Var) else pts.reshape(m * n, 3))
    f, grad, enc = sdf.evaluate(params, p, tape)
    s = sdf.sharpness(params, tape)
    f2 = f.reshape((m, n))
    if n > 1:
        inner = neus_alpha(f2[:, :-1], f2[:, 1:], s)
        # the last sample has no successor and contributes no opacity
        alphas = ad.concat([inner, np.zeros((m, 1))], axis=1)
    else:
        alphas = f2 * 0.0
    view = d + np.zeros((m, n, 3))
    c = colour.evaluate(params, enc, view.reshape((m * n, 3)), grad, tape)
    c3 = c.reshape((m, n, 3))
    T, w, rgb = composite(alphas, c3)
    if background is not None:
        rgb = rgb + ad.getitem(T, (slice(None), slice(n - 1, n))) * ad.reshape(background, (1, 3))
    return RenderResult(t_samples, p, f2, alphas, T, w, c3, rgb, grad)


def render_ray(sdf, colour, params, ray_origin, ray_dir, samples, tape):
    """Single-ray convenience wrapper around :func:`render_rays`."""
    o = ray_origin.reshape((1, 3)) if isinstance(ray_origin, ad.Var) else np.reshape(ray_origin, (1, 3))
    d = ray_dir.reshape((1, 3)) if isinstance(ray_dir, ad.Var) else np.reshape(ray_dir, (1, 3))
    return render_rays(sdf, colour, params, o, d, np.reshape(samples, (1, -1)), tape)


def colour_loss(rendered, gt):
    """Mean over rays of the L1 colour difference."""
    gt = np.asarray(gt, dtype=np.float64)
    m = np.shape(ad._val(rendered))[0]
    if m == 0 or np.shape(ad._val(rendered)) != gt.shape:
        raise InvalidArgument("rendered and ground-truth batches must match and be non-empty")
    return ad.sum_(ad.abs_(rendered - gt)) * (1.0 / m)


def eikonal_loss(gradients):
    """Mean of ``(|grad f| - 1)^2`` over all sample points."""
    k = np.shape(ad._val(gradients))[0]
    if k == 0:
        raise InvalidArgument("no gradients")
    sq = ad.sum_(ad.square(gradients), axis=-1)
    zero = ad._val(sq) == 0.0
    norm = ad.where(zero, 0.0, ad.sqrt(ad.where(zero, 1.0, sq)))
    return ad.sum_(ad.square(norm - 1.0)) * (1.0 / k)


def nsr_loss(colour_l, eikonal_l, lam):
    if lam < 0:
        raise InvalidArgument("regularisation weight must be non-negative")
    return colour_l + eikonal_l * lam


def pretrain_sphere(sdf, params, radius=0.5, steps=600, lr=1e-2, batch=1024, rng=None):
    """Fit the SDF network to ``|p| - radius`` and its gradient on the contracted domain.

    Used as geometric initialisation. Half of every batch lies within 0.2 of
    the sphere, the rest fills the ball of radius 2. Returns the final loss
    (squared value error plus squared gradient error, batch means). The
    learning rate decays along a half cosine to a tenth of ``lr``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    seg = params.mask(sdf.segment)
    state = ad.AdamState.zeros(len(params))
    err = np.inf
    half = batch // 2
    for k in range(steps):
        p = rng.normal(size=(batch, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        shell = radius + rng.uniform(-0.2, 0.2, size=(half, 1))
        ball = 2.0 * rng.uniform(0, 1, size=(batch - half, 1)) ** (1 / 3)
        p *= np.concatenate([shell, ball])
        tape = ad.Tape()
        f, grad, _ = sdf.evaluate(params, p, tape)
        n = np.linalg.norm(p, axis=1)
        loss = ad.mean(ad.square(f - (n - radius))) + ad.mean(ad.sum_(ad.square(grad - p / n[:, None]), axis=1))
        tape.backward(loss)
        grad = np.where(seg, tape.param_grad(params), 0.0)
        ad.adam_step(params, grad, state, lr * (0.1 + 0.45 * (1.0 + np.cos(np.pi * k / steps))))
        err = float(loss.value)
    return err


# ---- image files ------------------------------------------------------------


def write_ppm(path, image):
    """Binary PPM (P6, 8-bit) plus a raw little-endian float64 sidecar ``<path>.f64``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidArgument("image must be (H, W, 3)")
    h, w, _ = image.shape
    q = np.clip(np.rint(np.clip(image, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())
    with open(str(path) + ".f64", "wb") as fh:
        fh.write(image.astype("<f8").tobytes())


def read_ppm(path, prefer_sidecar=True):
    """Read an image written by :func:`write_ppm`, as floats in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P6" or tokens[3] != "255":
        raise InvalidArgument(f"{path}: only 8-bit P6 images are supported")
    w, h = int(tokens[1]), int(tokens[2])
    sidecar = str(path) + ".f64"
    if prefer_sidecar:
        try:
            with open(sidecar, "rb") as fh:
                data = np.frombuffer(fh.read(), dtype="<f8")
            if data.size == h * w * 3:
                return data.astype(np.float64).reshape(h, w, 3)
        except FileNotFoundError:
            pass
    q = np.frombuffer(blob[pos : pos + h * w * 3], dtype=np.uint8)
    return q.reshape(h, w, 3).astype(np.float64) / 255.0
