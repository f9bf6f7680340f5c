"""Independent brute-force references for factor messages and the engine.

Quadrature factors are checked by comparing their tilted moments (the
moments an EP update matches before dividing out the cavity) against moments
computed on a dense uniform grid of the exact factor. Bernoulli messages are
compared through message times cavity, which involves no projection. These routines are deliberately simple and
slow; they back the ``check`` command and the test-suite.
"""
import math

import numpy as np
from scipy.special import ndtr

from . import expfam
from .expfam import Bernoulli, Gaussian, MvGaussian, PointMass
from .factors import (DETERMINISTIC_NOISE, EP, box_message, box_tilted, gate_message,
                      gate_tilted, rotation_tilted_moments)


def _norm_pdf(x, m, v):
    return np.exp(-0.5 * (x - m) ** 2 / v) / math.sqrt(2 * math.pi * v)


def _grid(m, v, n, width=8.0):
    sd = math.sqrt(v)
    x = np.linspace(m - width * sd, m + width * sd, n)
    return x


def tilted_moments(msg, cavity):
    """(mean, var or cov, prob) of msg * cavity in moment form."""
    t = expfam.multiply(cavity, msg)
    if isinstance(t, Bernoulli):
        return t.prob
    return expfam.mean_of(t), expfam.var_of(t)


def central(mom):
    """(mean, second moment) -> (mean, variance or covariance)."""
    mean, second = mom
    if np.ndim(mean) == 0:
        return mean, second - mean * mean
    return mean, second - np.outer(mean, mean)


# -- rotation --------------------------------------------------------------

def rotation_grid_moments(p, a, r, noise=DETERMINISTIC_NOISE, n=1201):
    """Moments of the tilted distribution of (p, a, r) on a dense (a, r) grid.

    p is integrated analytically given (a, r); the grid spans the region where
    the product of the cavities and the p-likelihood has mass.
    """
    ma, va = a.mean, a.var
    mr, vr = r.mean, r.var
    mp, Sp = p.mean, p.cov
    S = Sp + noise * np.eye(2)
    Sinv = np.linalg.inv(S)
    # bracket the posterior: start from the cavity box, refine once
    A = _grid(ma, va, n)
    R = _grid(mr, vr, n)
    for _ in range(2):
        AA, RR = np.meshgrid(A, R, indexing="ij")
        fx = RR * np.sin(AA) - mp[0]
        fy = RR * np.cos(AA) - mp[1]
        logw = (-0.5 * (AA - ma) ** 2 / va - 0.5 * (RR - mr) ** 2 / vr
                - 0.5 * (Sinv[0, 0] * fx * fx + 2 * Sinv[0, 1] * fx * fy + Sinv[1, 1] * fy * fy))
        w = np.exp(logw - logw.max())
        w /= w.sum()
        ea = (w * AA).sum()
        er = (w * RR).sum()
        sa = math.sqrt(max((w * (AA - ea) ** 2).sum(), 1e-300))
        sr = math.sqrt(max((w * (RR - er) ** 2).sum(), 1e-300))
        A = np.linspace(ea - 10 * sa, ea + 10 * sa, n)
        R = np.linspace(er - 10 * sr, er + 10 * sr, n)
    va_t = (w * (AA - ea) ** 2).sum()
    vr_t = (w * (RR - er) ** 2).sum()
    # p | a, r is Gaussian: precision Kp + I/noise
    Kp = np.linalg.inv(Sp)
    Cpost = np.linalg.inv(Kp + np.eye(2) / noise)
    hp = Kp @ mp
    Fx, Fy = RR * np.sin(AA), RR * np.cos(AA)
    Mx = Cpost[0, 0] * (Fx / noise + hp[0]) + Cpost[0, 1] * (Fy / noise + hp[1])
    My = Cpost[1, 0] * (Fx / noise + hp[0]) + Cpost[1, 1] * (Fy / noise + hp[1])
    emx, emy = (w * Mx).sum(), (w * My).sum()
    cxx = (w * (Mx - emx) ** 2).sum()
    cyy = (w * (My - emy) ** 2).sum()
    cxy = (w * (Mx - emx) * (My - emy)).sum()
    covp = Cpost + np.array([[cxx, cxy], [cxy, cyy]])
    return {"a": (ea, va_t), "r": (er, vr_t), "p": (np.array([emx, emy]), covp)}


def random_rotation_instance(rng):
    """Cavities around a consistent configuration, moderately informative."""
    a0 = rng.uniform(-math.pi, math.pi)
    r0 = rng.uniform(0.6, 1.6)
    a = Gaussian.from_mean_var(a0 + rng.normal(0, 0.1), rng.uniform(0.005, 0.05))
    r = Gaussian.from_mean_var(r0 + rng.normal(0, 0.05), rng.uniform(0.002, 0.02))
    pm = r0 * np.array([math.sin(a0), math.cos(a0)]) + rng.normal(0, 0.05, 2)
    v = rng.uniform(0.005, 0.03)
    p = MvGaussian.from_mean_cov(pm, np.diag([v, v * rng.uniform(0.5, 2.0)]))
    return p, a, r


def check_rotation(p, a, r, noise=DETERMINISTIC_NOISE):
    """Relative errors of the three rotation messages against the grid."""
    ref = rotation_grid_moments(p, a, r, noise)
    errs = {}
    for target in ("p", "a", "r"):
        mean, var = central(rotation_tilted_moments(target, p, a, r, noise))
        errs[target] = _rel(mean, var, *ref[target])
    return errs


# -- box membership --------------------------------------------------------

def box_indicator(cx, cy, l, pixel, width):
    """Probit-edged box membership of a pixel for centre (cx, cy), side l."""
    def axis(c, px):
        return ndtr((c - px + 0.5 * l) / width) - ndtr((c - px - 0.5 * l) / width)
    return np.where(l > 0, axis(cx, pixel[0]) * axis(cy, pixel[1]), 0.0)


def box_grid_moments(s, c, l, pixel, width=0.05, n=161):
    """Tilted moments of (s, c, l) on a dense 3-D grid."""
    mc, Cc = c.mean, c.cov
    ml, vl = l.mean, l.var
    X = _grid(mc[0], Cc[0, 0], n, 7.0)
    Y = _grid(mc[1], Cc[1, 1], n, 7.0)
    L = _grid(ml, vl, n, 7.0)
    XX, YY, LL = np.meshgrid(X, Y, L, indexing="ij")
    dc = np.stack([XX - mc[0], YY - mc[1]], axis=-1)
    Ki = np.linalg.inv(Cc)
    prior = np.exp(-0.5 * np.einsum("...i,ij,...j->...", dc, Ki, dc)
                   - 0.5 * (LL - ml) ** 2 / vl)
    inside = box_indicator(XX, YY, LL, pixel, width)
    p1 = s.prob
    f = p1 * inside + (1 - p1) * (1 - inside)
    w = prior * f
    w /= w.sum()
    P = (prior * inside).sum() / prior.sum()
    ex, ey, el = (w * XX).sum(), (w * YY).sum(), (w * LL).sum()
    cov = np.array([[(w * (XX - ex) ** 2).sum(), (w * (XX - ex) * (YY - ey)).sum()],
                    [(w * (XX - ex) * (YY - ey)).sum(), (w * (YY - ey) ** 2).sum()]])
    vlt = (w * (LL - el) ** 2).sum()
    # tilted Bernoulli for s: p1 P / (p1 P + p0 (1 - P))
    ps = p1 * P / (p1 * P + (1 - p1) * (1 - P))
    return {"s": ps, "c": (np.array([ex, ey]), cov), "l": (el, vlt), "inside": P}


def random_box_instance(rng):
    """Pixel near the edge of a plausible square so every message is informative."""
    l0 = rng.uniform(4.0, 10.0)
    c0 = rng.uniform(4.0, 12.0, 2)
    side = rng.integers(4)
    off = rng.uniform(-0.5 * l0, 0.5 * l0)
    edge = 0.5 * l0 + rng.normal(0, 0.4)
    px = {0: (c0[0] + edge, c0[1] + off), 1: (c0[0] - edge, c0[1] + off),
          2: (c0[0] + off, c0[1] + edge), 3: (c0[0] + off, c0[1] - edge)}[side]
    c = MvGaussian.from_mean_cov(c0, np.diag(rng.uniform(0.05, 0.3, 2)))
    l = Gaussian.from_mean_var(l0, rng.uniform(0.05, 0.3))
    s = Bernoulli.from_prob(rng.uniform(0.2, 0.8))
    return s, c, l, (float(px[0]), float(px[1]))


def check_box(s, c, l, pixel, width=0.05):
    ref = box_grid_moments(s, c, l, pixel, width)
    errs = {}
    msg = box_message("s", s, c, l, pixel, width)
    ps = tilted_moments(msg, s)
    errs["s"] = abs(ps - ref["s"]) / max(min(ref["s"], 1 - ref["s"]), 1e-12)
    for target in ("c", "l"):
        mean, var = central(box_tilted(target, s, c, l, pixel, width))
        errs[target] = _rel(mean, var, *ref[target])
    return errs


# -- gate ------------------------------------------------------------------

def gate_grid_moments(z, s, fg, bg, variance=DETERMINISTIC_NOISE, n=201):
    """Tilted moments of (z, s, fg, bg) by summing s and gridding fg and bg.

    z is integrated analytically given the selected colour.
    """
    p1 = s.prob
    F = _grid(fg.mean, fg.var, n)
    B = _grid(bg.mean, bg.var, n)
    FF, BB = np.meshgrid(F, B, indexing="ij")
    prior = _norm_pdf(FF, fg.mean, fg.var) * _norm_pdf(BB, bg.mean, bg.var)
    vz = z.var + variance
    like1 = _norm_pdf(z.mean, FF, vz)
    like0 = _norm_pdf(z.mean, BB, vz)
    w1 = prior * p1 * like1
    w0 = prior * (1 - p1) * like0
    Z = w1.sum() + w0.sum()
    ps = w1.sum() / Z

    def mom(g):
        e = ((w1 + w0) * g).sum() / Z
        return e, ((w1 + w0) * (g - e) ** 2).sum() / Z
    # z | colour: product of N(z.mean, z.var) and N(colour, variance);
    # the colour carries weight z.var / (z.var + variance)
    k = z.var / (z.var + variance)
    postv = z.var * variance / (z.var + variance)
    zm1 = z.mean + k * (FF - z.mean)
    zm0 = z.mean + k * (BB - z.mean)
    ez = ((w1 * zm1).sum() + (w0 * zm0).sum()) / Z
    ez2 = ((w1 * zm1 ** 2).sum() + (w0 * zm0 ** 2).sum()) / Z + postv
    return {"s": ps, "fg": mom(FF), "bg": mom(BB), "z": (ez, ez2 - ez * ez)}


def random_gate_instance(rng):
    fgm, bgm = rng.uniform(0.4, 1.0), rng.uniform(0.0, 0.6)
    fg = Gaussian.from_mean_var(fgm, rng.uniform(0.002, 0.05))
    bg = Gaussian.from_mean_var(bgm, rng.uniform(0.002, 0.05))
    zc = fgm if rng.random() < 0.5 else bgm
    z = Gaussian.from_mean_var(zc + rng.normal(0, 0.1), rng.uniform(0.005, 0.02))
    s = Bernoulli.from_prob(rng.uniform(0.1, 0.9))
    return z, s, fg, bg


def check_gate(z, s, fg, bg, variance=DETERMINISTIC_NOISE):
    ref = gate_grid_moments(z, s, fg, bg, variance)
    errs = {}
    ps = tilted_moments(gate_message("s", z, s, fg, bg, variance, EP), s)
    errs["s"] = abs(ps - ref["s"]) / max(min(ref["s"], 1 - ref["s"]), 1e-12)
    for target in ("z", "fg", "bg"):
        mean, var = central(gate_tilted(target, z, s, fg, bg, variance))
        errs[target] = _rel(mean, var, *ref[target])
    return errs


# -- helpers ---------------------------------------------------------------

def _rel(mean, var, rmean, rvar):
    """Max of the mean error in units of max(|mean|, sd) and relative variance error."""
    mean, rmean = np.atleast_1d(mean), np.atleast_1d(rmean)
    var, rvar = np.atleast_2d(var), np.atleast_2d(rvar)
    scale = np.maximum(np.abs(rmean), np.sqrt(np.diag(rvar)))
    em = float(np.max(np.abs(mean - rmean) / scale))
    ev = float(np.max(np.abs(var - rvar)) / np.max(np.abs(np.diag(rvar))))
    return max(em, ev)


def run_quadrature_oracles(instances=50, seed=0, tol=1e-3):
    """Worst relative error per factor kind over random instances."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name, make, check in (("rotation", random_rotation_instance, check_rotation),
                              ("box", random_box_instance, check_box),
                              ("gate", random_gate_instance, check_gate)):
        w = 0.0
        for _ in range(instances):
            errs = check(*make(rng))
            w = max(w, max(errs.values()))
        worst[name] = w
    return {k: (v, v <= tol) for k, v in worst.items()}


def run_conjugate_oracle(tol=1e-8):
    """Max abs error of chain beliefs vs closed form for VMP and EP."""
    from .engine import EngineConfig, run_inference
    from .graph import condition_observations
    from .models import ChainSpec, build_chain, chain_posterior
    spec = ChainSpec()
    worst = 0.0
    for mode in ("VMP", "EP"):
        for x in (-1.3, 0.0, 2.1):
            g = condition_observations(build_chain(spec), {"x": x})
            tr = run_inference(g, EngineConfig(iterations=20, mode=mode))
            ref = chain_posterior(spec, x)
            for vid, (m, v) in ref.items():
                b = tr.final[vid]
                worst = max(worst, abs(b.mean - m), abs(b.var - v))
    return worst, worst <= tol
