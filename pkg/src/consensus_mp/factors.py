"""Messages for every factor kind used by the circle, square and face models.

Each kind exposes ``message(k, inputs, mode)`` which computes the outgoing
message on edge ``k`` from the messages on the other edges. Linear-Gaussian
kinds and the quadrature kinds (rotation, box membership) work on cavity
messages in both modes; gate, inner product and product use beliefs under
VMP. A kind returns ``None`` when it cannot yet say anything (e.g. a VMP
expectation of a still-uniform belief); the engine then keeps the old message.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.special import ndtr

from .expfam import (Bernoulli, Gaussian, MvGaussian, PointMass, divide, eig_range,
                     from_moments)

VMP = "VMP"
EP = "EP"

# noise added to deterministic relations that have no exact in-family message
DETERMINISTIC_NOISE = 1e-4
MAX_LOG_ODDS = 50.0
_LOG_2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class QuadratureSpec:
    nodes_per_dim: int = 9
    method: str = "gauss-hermite"

    def __post_init__(self):
        if self.nodes_per_dim < 3:
            raise ValueError("nodes_per_dim must be >= 3")


_GH_CACHE = {}


def gh_standard(n):
    """Gauss-Hermite nodes and weights for a standard normal (weights sum to 1)."""
    if n not in _GH_CACHE:
        x, w = hermgauss(n)
        _GH_CACHE[n] = (x * math.sqrt(2.0), w / math.sqrt(math.pi))
    return _GH_CACHE[n]


_GRID_CACHE = {}


def gh_grid(n):
    """Tensor Gauss-Hermite grid (U1, U2, log weights), U1 varying slowest."""
    if n not in _GRID_CACHE:
        u, w = gh_standard(n)
        _GRID_CACHE[n] = (np.repeat(u, n), np.tile(u, n),
                          np.log(np.repeat(w, n)) + np.log(np.tile(w, n)))
    return _GRID_CACHE[n]


# -- helpers ---------------------------------------------------------------

def _scalar(m):
    """(mean, var) of a scalar message, or None when it carries no moments."""
    if isinstance(m, PointMass):
        return m.location, 0.0
    if isinstance(m, Gaussian):
        if m.eta2 < 0.0:
            p = -2.0 * m.eta2
            return m.eta1 / p, 1.0 / p
        return None
    raise TypeError(f"expected a scalar Gaussian message, got {m!r}")


def _vector(m):
    """(mean, cov) of a vector message, or None when not positive definite."""
    if isinstance(m, PointMass):
        loc = np.atleast_1d(m.location)
        return loc, np.zeros((loc.shape[0], loc.shape[0]))
    if isinstance(m, MvGaussian):
        if not m.K.any():
            return None
        lo, hi = eig_range(m.K)
        if lo <= 1e-12 * max(1.0, hi):
            return None
        cov = np.linalg.inv(0.5 * (m.K + m.K.T))
        return cov @ m.h, cov
    if isinstance(m, Gaussian):
        s = _scalar(m)
        if s is None:
            return None
        return np.array([s[0]]), np.array([[s[1]]])
    raise TypeError(f"expected a vector Gaussian message, got {m!r}")


def _second(mv):
    mu, cov = mv
    return cov + np.outer(mu, mu)


def clip_gaussian(m):
    """Project a quotient message onto nonnegative precision."""
    if isinstance(m, Gaussian):
        if m.eta2 > 0.0:
            return Gaussian.uniform()
        return m
    if isinstance(m, MvGaussian):
        K = 0.5 * (m.K + m.K.T)
        w, V = np.linalg.eigh(K)
        if w[0] >= 0.0:
            return MvGaussian(m.h, K)
        keep = w > 0.0
        he = V.T @ m.h
        he[~keep] = 0.0
        w = np.where(keep, w, 0.0)
        return MvGaussian(V @ he, (V * w) @ V.T)
    return m


def _moment_matched_quotient(family, mom, cavity):
    """EP update: moment-matched tilted divided by the cavity, clipped."""
    tilted = from_moments(family, mom)
    if isinstance(tilted, PointMass):
        return tilted
    if cavity is None or cavity.is_uniform:
        return tilted
    return clip_gaussian(divide(tilted, cavity))


def _log_normal(x, mu, var):
    return -0.5 * (_LOG_2PI + math.log(var) + (x - mu) ** 2 / var)


# -- linear-Gaussian kinds -------------------------------------------------

def _info(m):
    """(h, K) of a vector message; point masses return None."""
    if isinstance(m, PointMass):
        return None
    if isinstance(m, MvGaussian):
        return m.h, 0.5 * (m.K + m.K.T)
    raise TypeError(f"expected a vector Gaussian message, got {m!r}")


def _shifted(u, w, sign):
    """Message of ``u + sign * w`` in information form.

    Works for rank-deficient precisions, which arise from messages that
    constrain only some directions (e.g. a polar linearisation).
    """
    if isinstance(u, PointMass) and isinstance(w, PointMass):
        return PointMass(u.location + sign * w.location)
    if isinstance(u, PointMass):
        return _reflect_shift(w, u.location, sign)
    if isinstance(w, PointMass):
        hu, Ku = _info(u)
        return MvGaussian(hu + sign * Ku @ w.location, Ku)
    hu, Ku = _info(u)
    hw, Kw = _info(w)
    if sign < 0:
        hw = -hw
    A = Ku + Kw
    lo, hi = eig_range(A)
    if lo > 1e-12 * max(1.0, hi):
        M = np.linalg.inv(A)
    else:
        M = np.linalg.pinv(A, hermitian=True)
    K = Ku - Ku @ M @ Ku
    h = hu - Ku @ M @ (hu - hw)
    return MvGaussian(h, 0.5 * (K + K.T))


def _reflect_shift(u, loc, sign):
    """Message of ``sign * u + loc`` for a density u."""
    hu, Ku = _info(u)
    h = sign * hu + Ku @ loc
    return MvGaussian(h, Ku)


def gaussian_noise_message(target, x, z, variance):
    """x = z + N(0, variance); ``target`` is "x" or "z"."""
    src = x if target == "z" else z
    if isinstance(src, (Gaussian, PointMass)) and np.ndim(getattr(src, "location", 0.0)) == 0:
        s = _scalar(src)
        if s is None:
            return Gaussian.uniform()
        return Gaussian.from_mean_var(s[0], s[1] + variance)
    d = src.dim
    noise = MvGaussian(np.zeros(d), np.eye(d) / variance)
    return _shifted(src, noise, 1.0)


def sum_message(target, total, a, b):
    """total = a + b; ``target`` is "sum", "a" or "b"."""
    if target == "sum":
        u, w, sign = a, b, 1.0
    elif target == "a":
        u, w, sign = total, b, -1.0
    else:
        u, w, sign = total, a, -1.0
    scalar = u.dim == 1 and not isinstance(u, MvGaussian)
    if scalar:
        su, sw = _scalar(u), _scalar(w)
        if su is None or sw is None:
            return Gaussian.uniform()
        return Gaussian.from_mean_var(su[0] + sign * sw[0], su[1] + sw[1])
    return _shifted(u, w, sign)


def soft_symmetry_message(target, a, b, variance, flip=None):
    """N(a - F b; 0, variance) with F = diag(flip) mirroring vector components."""
    src = b if target == "a" else a
    if src.dim == 1 and not isinstance(src, MvGaussian):
        s = _scalar(src)
        if s is None:
            return Gaussian.uniform()
        return Gaussian.from_mean_var(s[0], s[1] + variance)
    d = src.dim
    if flip is not None:
        f = np.asarray(flip, dtype=float)
        if isinstance(src, PointMass):
            src = PointMass(f * src.location)
        else:
            src = MvGaussian(f * src.h, src.K * np.outer(f, f))
    noise = MvGaussian(np.zeros(d), np.eye(d) / variance)
    return _shifted(src, noise, 1.0)


# -- rotation --------------------------------------------------------------

def rotation_tilted(p, a, r, noise=DETERMINISTIC_NOISE, q=QuadratureSpec()):
    """Weighted quadrature nodes of the tilted distribution over (a, r).

    The factor is N(p; r (sin a, cos a), noise I). Nodes are placed by
    Gauss-Hermite on the cavity of (a, r), or, when the message from p is
    informative, on the product of that cavity with a polar linearisation of
    the p message (adaptive Gauss-Hermite with importance weights).
    Returns (a_nodes, r_nodes, weights, likelihood_params) or None.
    """
    sa, sr = _scalar(a), _scalar(r)
    if sa is None or sr is None:
        return None
    ma, va = sa
    mr, vr = sr
    U1, U2, logW = gh_grid(q.nodes_per_dim)

    lik = None
    if isinstance(p, PointMass):
        lik = (np.asarray(p.location, dtype=float), noise * np.eye(2))
    else:
        pv = _vector(p)
        if pv is not None:
            lik = (pv[0], pv[1] + noise * np.eye(2))

    adaptive = lik is not None and va > 0.0 and vr > 0.0
    if adaptive:
        mu_p, S = lik
        r0 = float(np.hypot(mu_p[0], mu_p[1]))
        spread = math.sqrt(eig_range(S)[1])
        adaptive = r0 > 3.0 * spread
    if adaptive:
        a0 = math.atan2(mu_p[0], mu_p[1])
        a0 += 2 * math.pi * round((ma - a0) / (2 * math.pi))
        sa0, ca0 = math.sin(a0), math.cos(a0)
        J = np.array([[ca0 / r0, -sa0 / r0], [sa0, ca0]])
        Spol = J @ S @ J.T
        Ppol = np.linalg.inv(Spol)
        Pprop = Ppol + np.diag([1.0 / va, 1.0 / vr])
        Cprop = np.linalg.inv(Pprop)
        mprop = Cprop @ (Ppol @ np.array([a0, r0]) + np.array([ma / va, mr / vr]))
        Cprop = Cprop * 1.44
        L = np.linalg.cholesky(Cprop)
        an = mprop[0] + L[0, 0] * U1
        rn = mprop[1] + L[1, 0] * U1 + L[1, 1] * U2
        # log q(a) q(r) - log proposal; the GH weight already carries the
        # standard-normal density of (U1, U2)
        logq = (-0.5 * (an - ma) ** 2 / va - 0.5 * math.log(va)
                - 0.5 * (rn - mr) ** 2 / vr - 0.5 * math.log(vr))
        logprop = -0.5 * (U1 ** 2 + U2 ** 2) - math.log(L[0, 0] * L[1, 1])
        logw = logW + logq - logprop
    else:
        an = ma + math.sqrt(va) * U1
        rn = mr + math.sqrt(vr) * U2
        logw = logW.copy()

    if lik is not None:
        mu_p, S = lik
        fx = rn * np.sin(an) - mu_p[0]
        fy = rn * np.cos(an) - mu_p[1]
        Sinv = np.linalg.inv(S)
        quad = Sinv[0, 0] * fx * fx + 2 * Sinv[0, 1] * fx * fy + Sinv[1, 1] * fy * fy
        logw = logw - 0.5 * quad
    top = np.max(logw)
    if not np.isfinite(top):
        return None
    wn = np.exp(logw - top)
    wn /= wn.sum()
    return an, rn, wn


_TILT_CACHE = {}


def _cached_tilted(p, a, r, noise, q):
    # the three edge updates of one factor usually share identical inputs
    key = (p.natural().tobytes(), type(p), a.natural().tobytes(), type(a),
           r.natural().tobytes(), type(r), noise, q)
    hit = _TILT_CACHE.get("last")
    if hit is not None and hit[0] == key:
        return hit[1]
    tilt = rotation_tilted(p, a, r, noise, q)
    _TILT_CACHE["last"] = (key, tilt)
    return tilt


def rotation_message(target, p, a, r, noise=DETERMINISTIC_NOISE, q=QuadratureSpec()):
    """EP message of p = r (sin a, cos a) (+ N(0, noise I)) to ``target``."""
    if target in ("a", "r") and isinstance(a if target == "a" else r, PointMass):
        return Gaussian.uniform()
    if target == "p" and isinstance(p, PointMass):
        return MvGaussian.uniform(2)
    mom = rotation_tilted_moments(target, p, a, r, noise, q)
    if mom is None:
        return MvGaussian.uniform(2) if target == "p" else Gaussian.uniform()
    if target == "p":
        cav = p if _vector(p) is not None else None
        return _moment_matched_quotient("mvgaussian", mom, cav)
    return _moment_matched_quotient("gaussian", mom, a if target == "a" else r)


def rotation_tilted_moments(target, p, a, r, noise=DETERMINISTIC_NOISE, q=QuadratureSpec()):
    """``(mean, second moment)`` of ``target`` under the rotation tilted distribution.

    Given (a, r) the point p is Gaussian, so its moments are mixed over the
    quadrature nodes analytically.
    """
    tilt = _cached_tilted(p, a, r, noise, q)
    if tilt is None:
        return None
    an, rn, wn = tilt
    if target == "a":
        return float(wn @ an), float(wn @ (an * an))
    if target == "r":
        return float(wn @ rn), float(wn @ (rn * rn))
    F = np.stack([rn * np.sin(an), rn * np.cos(an)], axis=1)
    if _vector(p) is None:
        mu = wn @ F
        return mu, noise * np.eye(2) + (F * wn[:, None]).T @ F
    Kpost = p.K + np.eye(2) / noise
    Cpost = np.linalg.inv(Kpost)
    M = (F / noise + p.h) @ Cpost
    return wn @ M, Cpost + (M * wn[:, None]).T @ M


def rotation_vmp_message(target, p, a, r, noise=DETERMINISTIC_NOISE):
    """Variational message of N(p; r (sin a, cos a), noise I) given beliefs.

    Messages to p and r are conjugate. The message to a is proportional to
    exp(kappa cos(a - phi)); it is projected to a Gaussian by a Laplace
    approximation at the mode nearest the current belief of a.
    """
    sa, sr = _scalar(a), _scalar(r)
    if target == "p":
        if sa is None or sr is None:
            return None
        damp = math.exp(-0.5 * sa[1])
        u = damp * np.array([math.sin(sa[0]), math.cos(sa[0])])
        return MvGaussian(sr[0] * u / noise, np.eye(2) / noise)
    vp = _vector(p)
    if vp is None:
        return None
    mp = vp[0]
    if target == "r":
        if sa is None:
            return None
        damp = math.exp(-0.5 * sa[1])
        proj = damp * (mp[0] * math.sin(sa[0]) + mp[1] * math.cos(sa[0]))
        return Gaussian(proj / noise, -0.5 / noise)
    if sr is None:
        return None
    kappa = sr[0] * math.hypot(mp[0], mp[1]) / noise
    if kappa <= 0.0:
        return Gaussian.uniform()
    phi = math.atan2(mp[0], mp[1])
    ref = sa[0] if sa is not None else 0.0
    phi += 2 * math.pi * round((ref - phi) / (2 * math.pi))
    return Gaussian(kappa * phi, -0.5 * kappa)


# -- gate ------------------------------------------------------------------

def gate_message(target, z, s, fg, bg, variance=DETERMINISTIC_NOISE, mode=EP):
    """z = s ? fg : bg (+ N(0, variance)); ``target`` in z, s, fg, bg.

    Under EP the inputs are cavities, under VMP they are beliefs.
    """
    if mode == VMP:
        return _gate_vmp(target, z, s, fg, bg, variance)
    p1 = s.prob
    sfg, sbg = _scalar(fg), _scalar(bg)
    sz = _scalar(z)
    if target == "s":
        if sz is None or sfg is None or sbg is None:
            return Bernoulli.uniform()
        lo = (_log_normal(sz[0], sfg[0], sz[1] + sfg[1] + variance)
              - _log_normal(sz[0], sbg[0], sz[1] + sbg[1] + variance))
        return Bernoulli(max(-MAX_LOG_ODDS, min(MAX_LOG_ODDS, lo)))
    if sfg is None or sbg is None:
        return Gaussian.uniform()
    if target == "z":
        w1 = _gate_branch_weight(sz, p1, sfg, sbg, variance)
        if w1 in (0.0, 1.0):
            pred = (sfg[0], sfg[1] + variance) if w1 == 1.0 else (sbg[0], sbg[1] + variance)
            return Gaussian.from_mean_var(*pred)
    elif sz is None:
        return Gaussian.uniform()
    else:
        wb = _gate_branch_weight(sz, p1, sfg, sbg, variance)
        wb = wb if target == "fg" else 1.0 - wb
        if wb == 1.0:
            return Gaussian.from_mean_var(sz[0], sz[1] + variance)
        if wb == 0.0:
            return Gaussian.uniform()
    mom = gate_tilted(target, z, s, fg, bg, variance)
    cav = {"z": z, "fg": fg, "bg": bg}[target]
    return _moment_matched_quotient("gaussian", mom, cav if _scalar(cav) is not None else None)


def _gate_branch_weight(sz, p1, sfg, sbg, variance):
    """Posterior probability of the foreground branch given the z cavity."""
    if sz is None or p1 >= 1.0 or p1 <= 0.0:
        return p1
    l1 = math.log(p1) + _log_normal(sz[0], sfg[0], sz[1] + sfg[1] + variance)
    l0 = math.log1p(-p1) + _log_normal(sz[0], sbg[0], sz[1] + sbg[1] + variance)
    m = max(l1, l0)
    return math.exp(l1 - m) / (math.exp(l1 - m) + math.exp(l0 - m))


def gate_tilted(target, z, s, fg, bg, variance=DETERMINISTIC_NOISE):
    """Exact first two moments of ``target`` under the gate's tilted distribution.

    The tilted distribution is a two-component mixture (one per value of s),
    so its moments are available in closed form. Inputs are cavities.
    """
    p1 = s.prob
    sz, sfg, sbg = _scalar(z), _scalar(fg), _scalar(bg)
    w1 = _gate_branch_weight(sz, p1, sfg, sbg, variance)
    if target == "z":
        pred1 = (sfg[0], sfg[1] + variance)
        pred0 = (sbg[0], sbg[1] + variance)
        post1 = pred1 if sz is None else _product_mv(sz, pred1)
        post0 = pred0 if sz is None else _product_mv(sz, pred0)
        e1 = w1 * post1[0] + (1 - w1) * post0[0]
        e2 = (w1 * (post1[1] + post1[0] ** 2)
              + (1 - w1) * (post0[1] + post0[0] ** 2))
        return e1, e2
    own, wb = (sfg, w1) if target == "fg" else (sbg, 1.0 - w1)
    post = _product_mv(own, (sz[0], sz[1] + variance))
    e1 = wb * post[0] + (1 - wb) * own[0]
    e2 = wb * (post[1] + post[0] ** 2) + (1 - wb) * (own[1] + own[0] ** 2)
    return e1, e2


def _product_mv(x, y):
    """Product of two scalar Gaussians given as (mean, var); var 0 allowed."""
    if x[1] == 0.0:
        return x
    if y[1] == 0.0:
        return y
    p = 1.0 / x[1] + 1.0 / y[1]
    return ((x[0] / x[1] + y[0] / y[1]) / p, 1.0 / p)


def _gate_vmp(target, z, s, fg, bg, variance):
    p1 = s.prob
    sz, sfg, sbg = _scalar(z), _scalar(fg), _scalar(bg)
    if target == "s":
        if sz is None or sfg is None or sbg is None:
            return None
        efg2 = sfg[1] + sfg[0] ** 2
        ebg2 = sbg[1] + sbg[0] ** 2
        lo = -(-2.0 * sz[0] * (sfg[0] - sbg[0]) + efg2 - ebg2) / (2.0 * variance)
        return Bernoulli(max(-MAX_LOG_ODDS, min(MAX_LOG_ODDS, lo)))
    if target == "z":
        if sfg is None or sbg is None:
            return None
        mean = p1 * sfg[0] + (1 - p1) * sbg[0]
        return Gaussian(mean / variance, -0.5 / variance)
    if sz is None:
        return None
    resp = p1 if target == "fg" else 1.0 - p1
    return Gaussian(resp * sz[0] / variance, -0.5 * resp / variance)


# -- box membership --------------------------------------------------------

def _axis_terms(px, mu, v, l_nodes, width):
    """E[I], E[c I], E[c^2 I] over c ~ N(mu, v) for each half-width node.

    I(c) = Phi((c - px + l/2)/w) - Phi((c - px - l/2)/w), i.e. a box edge
    smoothed by a Gaussian CDF of width w. Zero for l <= 0.
    """
    s = math.sqrt(v + width * width)
    out = []
    for sign, t in ((1.0, px - 0.5 * l_nodes), (-1.0, px + 0.5 * l_nodes)):
        zz = (mu - t) / s
        Ph = ndtr(zz)
        ph = np.exp(-0.5 * zz * zz) / math.sqrt(2 * math.pi)
        e0 = Ph
        e1 = mu * Ph + (v / s) * ph
        e2 = (mu * mu + v) * Ph + 2 * mu * (v / s) * ph - v * (v / (s * s)) * zz * ph
        out.append((sign * e0, sign * e1, sign * e2))
    pos = l_nodes > 0
    A0 = np.where(pos, out[0][0] + out[1][0], 0.0)
    A1 = np.where(pos, out[0][1] + out[1][1], 0.0)
    A2 = np.where(pos, out[0][2] + out[1][2], 0.0)
    return A0, A1, A2


def box_message(target, s, c, l, pixel, width=0.05, q=QuadratureSpec()):
    """EP message of s = [pixel inside the square (c, l)] to ``target``.

    Per-axis membership integrals over the centre are closed-form under the
    Gaussian-CDF edge; the side length is integrated by Gauss-Hermite with
    ``nodes_per_dim ** 2`` nodes.
    """
    if target == "c" and isinstance(c, PointMass):
        return MvGaussian.uniform(2)
    if target == "l" and isinstance(l, PointMass):
        return Gaussian.uniform()
    got = _box_inputs(c, l, pixel, width, q)
    if got is None:
        if target == "s":
            return Bernoulli.uniform()
        return MvGaussian.uniform(2) if target == "c" else Gaussian.uniform()
    mc, Cc, ml, vl, ln, wq, X, Y = got
    if target == "s":
        inside = X[0] * Y[0]
        P = float(wq @ inside)
        Pout = float(wq @ (1.0 - inside))
        if P <= 0.0:
            return Bernoulli(-MAX_LOG_ODDS)
        if Pout <= 0.0:
            return Bernoulli(MAX_LOG_ODDS)
        lo = math.log(P) - math.log(Pout)
        return Bernoulli(max(-MAX_LOG_ODDS, min(MAX_LOG_ODDS, lo)))
    mom = _box_tilted(target, s, mc, Cc, ml, vl, ln, wq, *X, *Y)
    if mom is None:
        return MvGaussian.uniform(2) if target == "c" else Gaussian.uniform()
    if target == "l":
        return _moment_matched_quotient("gaussian", mom, l)
    return _moment_matched_quotient("mvgaussian", mom, c)


def _box_inputs(c, l, pixel, width, q):
    vc, sl = _vector(c), _scalar(l)
    if vc is None or sl is None:
        return None
    mc, Cc = vc
    ml, vl = sl
    if vl > 0.0:
        u, wq = gh_standard(q.nodes_per_dim ** 2)
        ln = ml + math.sqrt(vl) * u
    else:
        ln, wq = np.array([ml]), np.array([1.0])
    X = _axis_terms(pixel[0], mc[0], Cc[0, 0], ln, width)
    Y = _axis_terms(pixel[1], mc[1], Cc[1, 1], ln, width)
    return mc, Cc, ml, vl, ln, wq, X, Y


def box_tilted(target, s, c, l, pixel, width=0.05, q=QuadratureSpec()):
    """Tilted moments ``(mean, second moment)`` of c or l for the box factor.

    The centre cavity enters through its diagonal: the two axes are treated
    as independent given the side length. Returns None if undefined.
    """
    got = _box_inputs(c, l, pixel, width, q)
    if got is None:
        return None
    mc, Cc, ml, vl, ln, wq, X, Y = got
    return _box_tilted(target, s, mc, Cc, ml, vl, ln, wq, *X, *Y)


def _box_tilted(target, s, mc, Cc, ml, vl, ln, wq, X0, X1, X2, Y0, Y1, Y2):
    p1 = s.prob
    p0 = 1.0 - p1
    dp = p1 - p0
    P = float(wq @ (X0 * Y0))
    Z = p0 + dp * P
    if Z <= 0.0:
        return None
    if target == "l":
        e1 = (p0 * ml + dp * float(wq @ (ln * X0 * Y0))) / Z
        e2 = (p0 * (ml * ml + vl) + dp * float(wq @ (ln * ln * X0 * Y0))) / Z
        return e1, e2
    ex = (p0 * mc[0] + dp * float(wq @ (X1 * Y0))) / Z
    ey = (p0 * mc[1] + dp * float(wq @ (X0 * Y1))) / Z
    exx = (p0 * (mc[0] ** 2 + Cc[0, 0]) + dp * float(wq @ (X2 * Y0))) / Z
    eyy = (p0 * (mc[1] ** 2 + Cc[1, 1]) + dp * float(wq @ (X0 * Y2))) / Z
    exy = (p0 * mc[0] * mc[1] + dp * float(wq @ (X1 * Y1))) / Z
    return np.array([ex, ey]), np.array([[exx, exy], [exy, eyy]])


# -- bilinear kinds (VMP) --------------------------------------------------

def inner_product_message(target, s, n, l, variance=DETERMINISTIC_NOISE):
    """VMP message of N(s; n . l, variance) to ``target`` in s, n, l."""
    if target == "s":
        vn, vl = _vector(n), _vector(l)
        if vn is None or vl is None:
            return None
        return Gaussian(float(vn[0] @ vl[0]) / variance, -0.5 / variance)
    other = l if target == "n" else n
    vo, ss = _vector(other), _scalar(s)
    if vo is None or ss is None:
        return None
    K = _second(vo) / variance
    h = vo[0] * ss[0] / variance
    return MvGaussian(h, K)


def product_message(target, z, s, r, variance=DETERMINISTIC_NOISE):
    """VMP message of N(z; s r, variance) to ``target`` in z, s, r."""
    if target == "z":
        a, b = _scalar(s), _scalar(r)
        if a is None or b is None:
            return None
        return Gaussian(a[0] * b[0] / variance, -0.5 / variance)
    other = r if target == "s" else s
    so, sz = _scalar(other), _scalar(z)
    if so is None or sz is None:
        return None
    e2 = so[1] + so[0] ** 2
    return Gaussian(so[0] * sz[0] / variance, -0.5 * e2 / variance)


# -- factor kinds ----------------------------------------------------------

@dataclass(frozen=True)
class FactorKind:
    """Base for factor kinds. ``roles`` names the edges in order."""
    roles = ()

    @property
    def name(self):
        return type(self).__name__

    def uses_beliefs(self, mode):
        return False

    def message(self, k, inputs, mode):
        raise NotImplementedError

    def params(self):
        return {}


@dataclass(frozen=True)
class Prior(FactorKind):
    prior: object = None
    roles = ("x",)

    def message(self, k, inputs, mode):
        return self.prior


@dataclass(frozen=True)
class GaussianNoise(FactorKind):
    variance: float = 0.01
    roles = ("x", "z")

    def message(self, k, inputs, mode):
        return gaussian_noise_message(self.roles[k], inputs[0], inputs[1], self.variance)

    def params(self):
        return {"variance": self.variance}


@dataclass(frozen=True)
class Sum(FactorKind):
    roles = ("sum", "a", "b")

    def message(self, k, inputs, mode):
        return sum_message(self.roles[k], *inputs)


@dataclass(frozen=True)
class SoftSymmetry(FactorKind):
    variance: float = 0.01
    flip: tuple = None
    roles = ("a", "b")

    def message(self, k, inputs, mode):
        return soft_symmetry_message(self.roles[k], inputs[0], inputs[1],
                                     self.variance, self.flip)

    def params(self):
        return {"variance": self.variance, "flip": self.flip}


@dataclass(frozen=True)
class Rotation(FactorKind):
    noise: float = DETERMINISTIC_NOISE
    quadrature: QuadratureSpec = field(default_factory=QuadratureSpec)
    roles = ("p", "a", "r")

    def uses_beliefs(self, mode):
        return mode == VMP

    def message(self, k, inputs, mode):
        if mode == VMP:
            return rotation_vmp_message(self.roles[k], *inputs, noise=self.noise)
        return rotation_message(self.roles[k], *inputs, noise=self.noise, q=self.quadrature)


@dataclass(frozen=True)
class Gate(FactorKind):
    variance: float = DETERMINISTIC_NOISE
    roles = ("z", "s", "fg", "bg")

    def uses_beliefs(self, mode):
        return mode == VMP

    def message(self, k, inputs, mode):
        return gate_message(self.roles[k], *inputs, variance=self.variance, mode=mode)


@dataclass(frozen=True)
class BoxMembership(FactorKind):
    pixel: tuple = (0.0, 0.0)
    width: float = 0.05
    quadrature: QuadratureSpec = field(default_factory=QuadratureSpec)
    roles = ("s", "c", "l")

    def message(self, k, inputs, mode):
        return box_message(self.roles[k], *inputs, pixel=self.pixel, width=self.width,
                           q=self.quadrature)

    def params(self):
        return {"pixel": list(self.pixel), "width": self.width}


@dataclass(frozen=True)
class InnerProduct(FactorKind):
    variance: float = DETERMINISTIC_NOISE
    roles = ("s", "n", "l")

    def uses_beliefs(self, mode):
        return mode == VMP

    def message(self, k, inputs, mode):
        return inner_product_message(self.roles[k], *inputs, variance=self.variance)


@dataclass(frozen=True)
class Product(FactorKind):
    variance: float = DETERMINISTIC_NOISE
    roles = ("z", "s", "r")

    def uses_beliefs(self, mode):
        return mode == VMP

    def message(self, k, inputs, mode):
        return product_message(self.roles[k], *inputs, variance=self.variance)
