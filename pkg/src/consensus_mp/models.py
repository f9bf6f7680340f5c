"""Circle, square and face models: specs, samplers, graph builders, featurizers.

Coordinates for image models: pixel (i, j) (row i, column j) has its centre
at (j + 0.5, i + 0.5). Variable ids follow ``name[i][j]`` for pixels and
``name[i]`` for points.
"""
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .expfam import Bernoulli, Gaussian, MvGaussian, PointMass, mean_of, var_of
from .factors import (DETERMINISTIC_NOISE, BoxMembership, Gate, GaussianNoise,
                      InnerProduct, Product, QuadratureSpec, Rotation, SoftSymmetry, Sum)
from .graph import GraphBuilder, parse_id, var_id


class SpecError(ValueError):
    pass


MAX_REDRAWS = 1000


# -- specs -----------------------------------------------------------------

@dataclass(frozen=True)
class CircleSpec:
    n_points: int = 10
    noise_var: float = 0.01
    center_mean: tuple = (0.0, 0.0)
    center_var: float = 1.0
    radius_mean: float = 1.0
    radius_var: float = 0.25 ** 2
    angle_mean: float = 0.0
    angle_var: float = 10.0 ** 2
    # noise of the rotation factor; tight values stall mean-field updates
    rotation_noise: float = 0.01
    quadrature_nodes: int = 9
    model: str = field(default="circle", init=False)

    def __post_init__(self):
        if self.n_points < 3:
            raise SpecError("circle needs at least 3 points")
        if self.noise_var <= 0:
            raise SpecError("noise_var must be positive")


@dataclass(frozen=True)
class SquareSpec:
    width: int = 16
    height: int = 16
    center_var: float = None
    side_mean: float = None
    side_var: float = None
    fg_mean: float = 0.5
    fg_var: float = 0.25 ** 2
    bg_mean: float = 0.5
    bg_var: float = 0.25 ** 2
    noise_var: float = 0.001
    gate_var: float = DETERMINISTIC_NOISE
    edge_width: float = 0.05
    quadrature_nodes: int = 9
    model: str = field(default="square", init=False)

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise SpecError("image too small")
        if self.center_var is None:
            object.__setattr__(self, "center_var", (self.width / 4.0) ** 2)
        if self.side_mean is None:
            object.__setattr__(self, "side_mean", self.width / 2.0)
        if self.side_var is None:
            object.__setattr__(self, "side_var", (self.width / 8.0) ** 2)
        if self.side_mean + 3 * math.sqrt(self.side_var) > min(self.width, self.height) * 1.5:
            raise SpecError("side-length prior extends far beyond the image")

    @property
    def center_mean(self):
        return (self.width / 2.0, self.height / 2.0)


@dataclass(frozen=True)
class FaceSpec:
    width: int = 16
    height: int = 16
    reflectance_mean: float = 0.5
    reflectance_var: float = 0.2 ** 2
    normal_var: float = 0.1 ** 2
    light_mean: tuple = (0.0, 0.0, 1.0)
    light_var: float = 0.5 ** 2
    noise_var: float = 1e-3
    factor_var: float = DETERMINISTIC_NOISE
    symmetry_var: float = 0.01
    normal_symmetry_var: float = 0.01
    template_curvature: float = 0.8
    model: str = field(default="face", init=False)

    def __post_init__(self):
        if self.width % 2:
            raise SpecError("face width must be even for mirror pairing")

    def template_normals(self):
        """Unit normals of a smooth ellipsoidal cap, shape (H, W, 3)."""
        H, W, k = self.height, self.width, self.template_curvature
        u = (np.arange(W) + 0.5 - W / 2) / (W / 2)
        v = (np.arange(H) + 0.5 - H / 2) / (H / 2)
        U, V = np.meshgrid(u, v)
        nz = np.sqrt(np.clip(1.0 - k * k * (U ** 2 + V ** 2), 0.05, None))
        n = np.stack([k * U, -k * V, nz], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


@dataclass(frozen=True)
class ChainSpec:
    """Linear-Gaussian chain used to validate the engine against closed form."""
    top_mean: float = 0.3
    top_var: float = 2.0
    offset_mean: float = -0.5
    offset_var: float = 0.5
    noise_var: float = 0.1
    model: str = field(default="chain", init=False)


_SPECS = {"circle": CircleSpec, "square": SquareSpec, "face": FaceSpec, "chain": ChainSpec}


def spec_from_dict(d):
    """Model JSON -> spec. Unknown keys raise; priors may be nested."""
    d = dict(d)
    model = d.pop("model")
    if model not in _SPECS:
        raise SpecError(f"unknown model {model!r}")
    cls = _SPECS[model]
    flat = {}
    for key in ("dimensions", "priors", "noiseVariances"):
        flat.update(d.pop(key, {}) or {})
    if "symmetryVariance" in d:
        flat["symmetry_var"] = d.pop("symmetryVariance")
    d.pop("seed", None)
    flat.update(d)
    names = {f for f in cls.__dataclass_fields__ if f != "model"}
    bad = set(flat) - names
    if bad:
        raise SpecError(f"unknown {model} fields: {sorted(bad)}")
    for k, v in flat.items():
        if isinstance(v, list):
            flat[k] = tuple(v)
    return cls(**flat)


def spec_to_dict(spec):
    d = asdict(spec)
    model = d.pop("model")
    return {"model": model, **{k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}}


# -- samplers --------------------------------------------------------------

def sample(spec, seed):
    """Draw (latents, observations) from a model; seed-deterministic."""
    rng = np.random.default_rng(seed)
    if isinstance(spec, CircleSpec):
        return sample_circle(spec, rng)
    if isinstance(spec, SquareSpec):
        return sample_square(spec, rng)
    if isinstance(spec, FaceSpec):
        return sample_face(spec, rng)
    if isinstance(spec, ChainSpec):
        return sample_chain(spec, rng)
    raise SpecError(f"no sampler for {spec!r}")


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_circle(spec, seed, *, center=None, radius=None, angles=None):
    rng = _rng(seed)
    c = np.asarray(center if center is not None else
                   rng.normal(spec.center_mean, math.sqrt(spec.center_var), 2), dtype=float)
    r = radius
    for _ in range(MAX_REDRAWS):
        if r is not None and r > 0:
            break
        r = float(rng.normal(spec.radius_mean, math.sqrt(spec.radius_var)))
    else:
        raise SpecError("could not draw a positive radius")
    a = np.asarray(angles if angles is not None else
                   rng.normal(spec.angle_mean, math.sqrt(spec.angle_var), spec.n_points))
    p = np.stack([r * np.sin(a), r * np.cos(a)], axis=1)
    z = p + c
    x = z + rng.normal(0.0, math.sqrt(spec.noise_var), z.shape)
    latents = {"c": c, "r": r, "a": a, "p": p, "z": z}
    obs = {var_id("x", i): x[i] for i in range(spec.n_points)}
    return latents, obs


def square_mask(spec, center, side):
    """Hard box indicator on pixel centres, shape (H, W)."""
    xs = np.arange(spec.width) + 0.5
    ys = np.arange(spec.height) + 0.5
    inx = np.abs(xs - center[0]) <= side / 2
    iny = np.abs(ys - center[1]) <= side / 2
    return iny[:, None] & inx[None, :]


def sample_square(spec, seed):
    rng = _rng(seed)
    for _ in range(MAX_REDRAWS):
        c = rng.normal(spec.center_mean, math.sqrt(spec.center_var), 2)
        side = float(rng.normal(spec.side_mean, math.sqrt(spec.side_var)))
        if side <= 1.0:
            continue
        s = square_mask(spec, c, side)
        if s.any() and not s.all():
            break
    else:
        raise SpecError("could not draw a square inside the image")
    fg = float(rng.normal(spec.fg_mean, math.sqrt(spec.fg_var)))
    bg = float(rng.normal(spec.bg_mean, math.sqrt(spec.bg_var)))
    z = np.where(s, fg, bg)
    x = z + rng.normal(0.0, math.sqrt(spec.noise_var), z.shape)
    latents = {"c": c, "l": side, "fg": fg, "bg": bg, "s": s.astype(float), "z": z}
    obs = {var_id("x", i, j): float(x[i, j])
           for i in range(spec.height) for j in range(spec.width)}
    return latents, obs


def sample_face(spec, seed):
    rng = _rng(seed)
    H, W, half = spec.height, spec.width, spec.width // 2
    r = rng.normal(spec.reflectance_mean, math.sqrt(spec.reflectance_var), (H, W))
    r[:, half:] = r[:, :half][:, ::-1] + rng.normal(0, math.sqrt(spec.symmetry_var), (H, half))
    tmpl = spec.template_normals()
    n = tmpl + rng.normal(0, math.sqrt(spec.normal_var), (H, W, 3))
    mirrored = n[:, :half][:, ::-1] * np.array([-1.0, 1.0, 1.0])
    n[:, half:] = mirrored + rng.normal(0, math.sqrt(spec.normal_symmetry_var), (H, half, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    light = rng.normal(spec.light_mean, math.sqrt(spec.light_var), 3)
    s = n @ light
    z = s * r
    x = z + rng.normal(0.0, math.sqrt(spec.noise_var), z.shape)
    latents = {"r": r, "n": n, "l": light, "s": s, "z": z}
    obs = {var_id("x", i, j): float(x[i, j]) for i in range(H) for j in range(W)}
    return latents, obs


def sample_chain(spec, seed):
    rng = _rng(seed)
    top = rng.normal(spec.top_mean, math.sqrt(spec.top_var))
    off = rng.normal(spec.offset_mean, math.sqrt(spec.offset_var))
    mid = top + off
    x = mid + rng.normal(0, math.sqrt(spec.noise_var))
    return {"top": top, "offset": off, "mid": mid}, {"x": float(x)}


def latent_value(latents, vid):
    """Look up the sampled value of a structured variable id."""
    name, idx = parse_id(vid)
    val = latents[name]
    for i in idx:
        val = val[i]
    return val


# -- graph builders --------------------------------------------------------

def build(spec):
    if isinstance(spec, CircleSpec):
        return build_circle(spec)
    if isinstance(spec, SquareSpec):
        return build_square(spec)
    if isinstance(spec, FaceSpec):
        return build_face(spec)
    if isinstance(spec, ChainSpec):
        return build_chain(spec)
    raise SpecError(f"no builder for {spec!r}")


def build_circle(spec):
    b = GraphBuilder("circle")
    b.add_var("c", "mvgaussian", 2, layer=2, is_global=True)
    b.add_var("r", "gaussian", 1, layer=3, is_global=True)
    b.add_prior("c", MvGaussian.from_mean_cov(spec.center_mean, spec.center_var * np.eye(2)))
    b.add_prior("r", Gaussian.from_mean_var(spec.radius_mean, spec.radius_var))
    q = QuadratureSpec(spec.quadrature_nodes)
    for i in range(spec.n_points):
        x, z, p, a = (var_id(n, i) for n in "xzpa")
        b.add_var(x, "mvgaussian", 2, layer=0)
        b.add_var(z, "mvgaussian", 2, layer=1)
        b.add_var(p, "mvgaussian", 2, layer=2)
        b.add_var(a, "gaussian", 1, layer=3)
        b.add_prior(a, Gaussian.from_mean_var(spec.angle_mean, spec.angle_var))
        b.add_factor(var_id("noise", i), GaussianNoise(spec.noise_var), x, z)
        b.add_factor(var_id("sum", i), Sum(), z, p, "c")
        b.add_factor(var_id("rotation", i), Rotation(spec.rotation_noise, q), p, a, "r")
    return b.build()


def build_square(spec):
    b = GraphBuilder("square")
    b.add_var("fg", "gaussian", 1, layer=2, is_global=True)
    b.add_var("bg", "gaussian", 1, layer=2, is_global=True)
    b.add_var("c", "mvgaussian", 2, layer=3, is_global=True)
    b.add_var("l", "gaussian", 1, layer=3, is_global=True)
    b.add_prior("fg", Gaussian.from_mean_var(spec.fg_mean, spec.fg_var))
    b.add_prior("bg", Gaussian.from_mean_var(spec.bg_mean, spec.bg_var))
    b.add_prior("c", MvGaussian.from_mean_cov(spec.center_mean, spec.center_var * np.eye(2)))
    b.add_prior("l", Gaussian.from_mean_var(spec.side_mean, spec.side_var))
    q = QuadratureSpec(spec.quadrature_nodes)
    for i in range(spec.height):
        for j in range(spec.width):
            x, z, s = (var_id(n, i, j) for n in "xzs")
            b.add_var(x, "gaussian", 1, layer=0)
            b.add_var(z, "gaussian", 1, layer=1)
            b.add_var(s, "bernoulli", 1, layer=2)
            b.add_factor(var_id("noise", i, j), GaussianNoise(spec.noise_var), x, z)
            b.add_factor(var_id("gate", i, j), Gate(spec.gate_var), z, s, "fg", "bg")
            b.add_factor(var_id("box", i, j),
                         BoxMembership((j + 0.5, i + 0.5), spec.edge_width, q), s, "c", "l")
    return b.build()


def build_face(spec):
    b = GraphBuilder("face")
    H, W = spec.height, spec.width
    b.add_var("l", "mvgaussian", 3, layer=3, is_global=True)
    b.add_prior("l", MvGaussian.from_mean_cov(spec.light_mean, spec.light_var * np.eye(3)))
    tmpl = spec.template_normals()
    for i in range(H):
        for j in range(W):
            x, z, s, r, n = (var_id(v, i, j) for v in "xzsrn")
            b.add_var(x, "gaussian", 1, layer=0)
            b.add_var(z, "gaussian", 1, layer=1)
            b.add_var(s, "gaussian", 1, layer=2)
            b.add_var(r, "gaussian", 1, layer=2)
            b.add_var(n, "mvgaussian", 3, layer=3)
            b.add_prior(r, Gaussian.from_mean_var(spec.reflectance_mean, spec.reflectance_var))
            b.add_prior(n, MvGaussian.from_mean_cov(tmpl[i, j], spec.normal_var * np.eye(3)))
            b.add_factor(var_id("noise", i, j), GaussianNoise(spec.noise_var), x, z)
            b.add_factor(var_id("product", i, j), Product(spec.factor_var), z, s, r)
            b.add_factor(var_id("inner", i, j), InnerProduct(spec.factor_var), s, n, "l")
    for i in range(H):
        for j in range(W // 2):
            jm = W - 1 - j
            b.add_factor(var_id("symr", i, j), SoftSymmetry(spec.symmetry_var),
                         var_id("r", i, j), var_id("r", i, jm))
            b.add_factor(var_id("symn", i, j),
                         SoftSymmetry(spec.normal_symmetry_var, (-1.0, 1.0, 1.0)),
                         var_id("n", i, j), var_id("n", i, jm))
    return b.build()


def build_chain(spec):
    """x = mid + noise, mid = top + offset, with priors on top and offset."""
    b = GraphBuilder("chain")
    b.add_var("x", "gaussian", 1, layer=0)
    b.add_var("mid", "gaussian", 1, layer=1)
    b.add_var("top", "gaussian", 1, layer=2)
    b.add_var("offset", "gaussian", 1, layer=2, is_global=True)
    b.add_prior("top", Gaussian.from_mean_var(spec.top_mean, spec.top_var))
    b.add_prior("offset", Gaussian.from_mean_var(spec.offset_mean, spec.offset_var))
    b.add_factor("sum", Sum(), "mid", "top", "offset")
    b.add_factor("noise", GaussianNoise(spec.noise_var), "x", "mid")
    return b.build()


def chain_posterior(spec, x):
    """Closed-form posterior of (top, offset, mid) given x."""
    m = np.array([spec.top_mean, spec.offset_mean])
    S = np.diag([spec.top_var, spec.offset_var])
    a = np.array([1.0, 1.0])
    s2 = a @ S @ a + spec.noise_var
    gain = S @ a / s2
    mpost = m + gain * (x - a @ m)
    Spost = S - np.outer(gain, a @ S)
    mid_mean = a @ mpost
    mid_var = a @ Spost @ a
    return {"top": (mpost[0], Spost[0, 0]), "offset": (mpost[1], Spost[1, 1]),
            "mid": (mid_mean, mid_var)}


# -- featurizers -----------------------------------------------------------

def _means(ctx):
    return np.array([np.atleast_1d(mean_of(m)) for m in ctx], dtype=float)


class Featurizer:
    """Maps a context (list of messages) to tree and regression features.

    ``__call__`` returns ``(T, R)`` with one row per consensus target.
    ``pair_block`` optionally names the slice of tree features on which
    pixel-pair equality splits are sampled.
    """
    name = "featurizer"
    output_family = "gaussian"
    output_dim = 1
    pair_block = None

    def __call__(self, ctx):
        raise NotImplementedError

    def describe(self):
        return {"name": self.name, "outputFamily": self.output_family,
                "outputDim": self.output_dim}


class CircleFeatures(Featurizer):
    """Point-set features of the z-layer means for the circle predictors.

    target "c": regression on the centroid.
    target "r": regression on mean distance to the centroid and half extents.
    """

    def __init__(self, target="c"):
        self.target = target
        self.name = f"circle-{target}"
        self.output_family = "mvgaussian" if target == "c" else "gaussian"
        self.output_dim = 2 if target == "c" else 1

    def __call__(self, ctx):
        M = _means(ctx)
        cen = M.mean(axis=0)
        # canonical orientation: sort by angle about the centroid
        ang = np.arctan2(M[:, 0] - cen[0], M[:, 1] - cen[1])
        M = M[np.argsort(ang, kind="stable")]
        eig = np.linalg.eigvalsh(np.cov(M.T, bias=True))
        lo, hi = M.min(axis=0), M.max(axis=0)
        mvar = np.mean([np.trace(np.atleast_2d(var_of(m))) / 2 for m in ctx])
        t = np.concatenate([cen, eig, lo, hi, [mvar]])
        if self.target == "c":
            r = cen
        else:
            dist = np.linalg.norm(M - cen, axis=1).mean()
            r = np.concatenate([[dist], 0.5 * (hi - lo)])
        return t[None, :], r[None, :]


def circle_center_features(ctx):
    return CircleFeatures("c")(ctx)


def _two_means(v, iters=10):
    """1-D two-cluster split; returns (low mean, high mean, fraction high)."""
    lo, hi = np.percentile(v, 10), np.percentile(v, 90)
    if hi - lo < 1e-12:
        m = float(v.mean())
        return m, m, 0.5
    for _ in range(iters):
        thr = 0.5 * (lo + hi)
        hmask = v > thr
        if hmask.all() or not hmask.any():
            break
        lo, hi = v[~hmask].mean(), v[hmask].mean()
    thr = 0.5 * (lo + hi)
    return float(lo), float(hi), float(np.mean(v > thr))


class SquareColourFeatures(Featurizer):
    """Raw pixel means (for pair-equality splits) plus intensity clusters."""

    def __init__(self, height, width, target="fg"):
        self.shape = (height, width)
        self.target = target
        self.name = f"square-colour-{target}"
        self.pair_block = (0, height * width)

    def __call__(self, ctx):
        X = _means(ctx)[:, 0]
        lo, hi, frac = _two_means(X)
        minority, majority = (hi, lo) if frac < 0.5 else (lo, hi)
        t = np.concatenate([X, [lo, hi, frac, minority, majority]])
        r = np.array([lo, hi, minority, majority])
        return t[None, :], r[None, :]


def _longest_run(B):
    """Longest run of True along the last axis, per row."""
    best = np.zeros(B.shape[0], dtype=int)
    cur = np.zeros(B.shape[0], dtype=int)
    for j in range(B.shape[1]):
        cur = np.where(B[:, j], cur + 1, 0)
        best = np.maximum(best, cur)
    return best


class SideLengthFeatures(Featurizer):
    """Counting features of the segmentation beliefs.

    Soft counts alone are swamped by undecided pixels (p near 0.5), and the
    area of a square cut by the image border says little about its side, so
    run lengths of the thresholded map are included as well.
    """
    name = "square-side"

    def __init__(self, height, width):
        self.shape = (height, width)

    def __call__(self, ctx):
        P = np.array([m.prob for m in ctx]).reshape(self.shape)
        M = P.sum()
        rows, cols = P.sum(axis=1), P.sum(axis=0)
        span_r = rows.sum() / max(rows.max(), 1e-9)
        span_c = cols.sum() / max(cols.max(), 1e-9)
        B = P > 0.5
        run_r = float(np.max(_longest_run(B)))
        run_c = float(np.max(_longest_run(B.T)))
        run = max(run_r, run_c)
        nb = float(B.sum())
        conf = float(np.mean(np.abs(2.0 * P - 1.0)))
        t = np.array([M, math.sqrt(M), span_r, span_c, rows.max(), cols.max(),
                      run_r, run_c, run, nb, math.sqrt(nb), conf])
        r = np.array([run])
        return t[None, :], r[None, :]


def patch_half_width(width):
    """Patch half-width scaled from 21x21 at width 96."""
    return max(1, int(round(10 * width / 96)))


def block_grid(width):
    """Light-feature grid size scaled from 12x12 at width 96."""
    return max(2, int(round(12 * width / 96 * 2)))


class ReflectanceFeatures(Featurizer):
    """Per-pixel patch statistics of the z-layer means (one row per pixel)."""
    name = "face-reflectance"

    def __init__(self, height, width, half=None):
        self.shape = (height, width)
        self.half = half if half is not None else patch_half_width(width)

    def __call__(self, ctx):
        H, W = self.shape
        k = self.half
        Z = _means(ctx)[:, 0].reshape(H, W)
        P = np.pad(Z, k, mode="edge")
        win = np.lib.stride_tricks.sliding_window_view(P, (2 * k + 1, 2 * k + 1))
        flat = win.reshape(H, W, -1)
        pmean = flat.mean(-1)
        pmed = np.median(flat, -1)
        pmax = flat.max(-1)
        pmin = flat.min(-1)
        pstd = flat.std(-1)
        gx = win[:, :, :, k + 1:].mean((-1, -2)) - win[:, :, :, :k].mean((-1, -2))
        gy = win[:, :, k + 1:, :].mean((-1, -2)) - win[:, :, :k, :].mean((-1, -2))
        mirror = Z[:, ::-1]
        ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        full = np.broadcast_to
        T = np.stack([ii / H, np.minimum(jj, W - 1 - jj) / W, Z, pmean, pmed, pmax, pmin,
                      pstd, gx, gy, mirror, pmean[:, ::-1],
                      full(Z.mean(), Z.shape), full(Z.max(), Z.shape),
                      Z.mean(axis=1, keepdims=True) + 0 * Z,
                      Z / max(Z.max(), 1e-6)], axis=-1).reshape(H * W, -1)
        R = np.stack([Z, mirror, pmean, pmax, full(Z.max(), Z.shape)],
                     axis=-1).reshape(H * W, -1)
        return T, R


class LightFeatures(Featurizer):
    """Block means of the shading-message means."""
    name = "face-light"
    output_family = "mvgaussian"
    output_dim = 3

    def __init__(self, height, width, grid=None):
        self.shape = (height, width)
        self.grid = grid if grid is not None else block_grid(width)

    def __call__(self, ctx):
        S = _means(ctx)[:, 0].reshape(self.shape)
        t = block_means(S, self.grid).ravel()
        r = block_means(S, 2).ravel()
        return t[None, :], r[None, :]


def block_means(img, grid):
    H, W = img.shape
    rows = np.array_split(np.arange(H), grid)
    cols = np.array_split(np.arange(W), grid)
    return np.array([[img[np.ix_(r, c)].mean() for c in cols] for r in rows])


def reflectance_features(ctx, height, width):
    return ReflectanceFeatures(height, width)(ctx)


def light_features(ctx, height, width):
    return LightFeatures(height, width)(ctx)


def square_colour_features(ctx, height, width):
    return SquareColourFeatures(height, width)(ctx)


def side_length_features(ctx, height, width):
    return SideLengthFeatures(height, width)(ctx)


# -- predictor attachments -------------------------------------------------

def make_attachments(spec, g):
    """Default predictors for a model, lowest target layer first."""
    from .cmp import PredictorAttachment as PA
    if isinstance(spec, CircleSpec):
        z = g.vars_named("z")
        return [PA("delta_c", ["c"], z, CircleFeatures("c"))]
    if isinstance(spec, SquareSpec):
        H, W = spec.height, spec.width
        z, s = g.vars_named("z"), g.vars_named("s")
        return [PA("delta_fg", ["fg"], z, SquareColourFeatures(H, W, "fg")),
                PA("delta_bg", ["bg"], z, SquareColourFeatures(H, W, "bg")),
                PA("delta_l", ["l"], s, SideLengthFeatures(H, W))]
    if isinstance(spec, FaceSpec):
        H, W = spec.height, spec.width
        z, s = g.vars_named("z"), g.vars_named("s")
        att_r = PA("delta_r", g.vars_named("r"), z, ReflectanceFeatures(H, W))
        return [att_r, PA("delta_l", ["l"], s, LightFeatures(H, W))]
    return []


def radius_attachment(g):
    """Direct radius predictor used only by the forest-only comparison."""
    from .cmp import PredictorAttachment as PA
    return PA("delta_r", ["r"], g.vars_named("z"), CircleFeatures("r"), adjacent_context=False)
