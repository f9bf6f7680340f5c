"""Exponential-family messages.

Every message is stored in natural parameters so that products and quotients
are additions and subtractions. Moment form is derived on demand.

Families:

* ``Gaussian``    scalar, ``eta1 = precision * mean``, ``eta2 = -precision / 2``
* ``MvGaussian``  vector, ``h = K @ mean``, ``K`` the precision matrix
* ``Bernoulli``   ``log_odds``; +/- inf encode the two point masses
* ``PointMass``   a fixed location, scalar or vector

A Gaussian with zero precision is the uniform (improper) message.
"""
import math

import numpy as np
import scipy.special

# variances below this collapse to a point mass
POINT_MASS_VAR = 1e-12
# tolerated negative precision before a product is declared invalid
NEG_PRECISION_TOL = 1e-10


def eig_range(K):
    """(smallest, largest) eigenvalue of a symmetric matrix; closed form for 2x2."""
    if K.shape == (2, 2):
        a, b, d = K[0, 0], 0.5 * (K[0, 1] + K[1, 0]), K[1, 1]
        m = 0.5 * (a + d)
        r = math.sqrt(max(0.25 * (a - d) ** 2 + b * b, 0.0))
        return m - r, m + r
    w = np.linalg.eigvalsh(0.5 * (K + K.T))
    return w[0], w[-1]


def is_positive_definite(K):
    """Sylvester's criterion for small matrices, Cholesky otherwise."""
    n = K.shape[0]
    if n == 1:
        return K[0, 0] > 0.0
    if n == 2:
        a, b, d = K[0, 0], 0.5 * (K[0, 1] + K[1, 0]), K[1, 1]
        return a > 0.0 and a * d - b * b > 0.0
    if n == 3:
        a, d, f = K[0, 0], K[1, 1], K[2, 2]
        b = 0.5 * (K[0, 1] + K[1, 0])
        c = 0.5 * (K[0, 2] + K[2, 0])
        e = 0.5 * (K[1, 2] + K[2, 1])
        m2 = a * d - b * b
        det = a * (d * f - e * e) - b * (b * f - c * e) + c * (b * e - c * d)
        return a > 0.0 and m2 > 0.0 and det > 0.0
    try:
        np.linalg.cholesky(0.5 * (K + K.T))
    except np.linalg.LinAlgError:
        return False
    return True


class ImproperMessageError(ValueError):
    pass


class FamilyMismatchError(TypeError):
    pass


class Gaussian:
    __slots__ = ("eta1", "eta2")
    family = "gaussian"
    dim = 1

    def __init__(self, eta1=0.0, eta2=0.0):
        self.eta1 = float(eta1)
        self.eta2 = float(eta2)

    @classmethod
    def uniform(cls):
        return cls(0.0, 0.0)

    @classmethod
    def from_mean_var(cls, mean, var):
        if var < POINT_MASS_VAR:
            if var < 0:
                raise ImproperMessageError(f"negative variance {var}")
            return PointMass(float(mean))
        if math.isinf(var):
            return cls(0.0, 0.0)
        return cls(mean / var, -0.5 / var)

    @property
    def precision(self):
        return -2.0 * self.eta2

    @property
    def mean(self):
        return self.eta1 / self.precision

    @property
    def var(self):
        return 1.0 / self.precision

    @property
    def is_uniform(self):
        return self.eta2 == 0.0 and self.eta1 == 0.0

    @property
    def is_proper(self):
        return self.eta2 < 0.0

    def natural(self):
        return np.array([self.eta1, self.eta2])

    def __repr__(self):
        if self.is_proper:
            return f"Gaussian(mean={self.mean:.6g}, var={self.var:.6g})"
        return f"Gaussian(eta1={self.eta1:.6g}, eta2={self.eta2:.6g})"


class MvGaussian:
    __slots__ = ("h", "K")
    family = "mvgaussian"

    def __init__(self, h, K):
        self.h = np.asarray(h, dtype=float)
        self.K = np.asarray(K, dtype=float)

    @property
    def dim(self):
        return self.h.shape[0]

    @classmethod
    def uniform(cls, dim):
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    @classmethod
    def from_mean_cov(cls, mean, cov):
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        if cov.ndim == 0 or cov.ndim == 1:
            cov = np.eye(mean.shape[0]) * cov
        cov = 0.5 * (cov + cov.T)
        w = eig_range(cov)
        if w[1] < POINT_MASS_VAR:
            if w[0] < -NEG_PRECISION_TOL:
                raise ImproperMessageError("covariance is not PSD")
            return PointMass(mean.copy())
        if w[0] < POINT_MASS_VAR:
            cov = cov + np.eye(mean.shape[0]) * (POINT_MASS_VAR - w[0])
        K = np.linalg.inv(cov)
        K = 0.5 * (K + K.T)
        return cls(K @ mean, K)

    @property
    def precision(self):
        return self.K

    @property
    def cov(self):
        return np.linalg.inv(self.K)

    @property
    def mean(self):
        return np.linalg.solve(self.K, self.h)

    @property
    def is_uniform(self):
        return not self.K.any() and not self.h.any()

    @property
    def is_proper(self):
        if not np.isfinite(self.K).all():
            return False
        return bool(is_positive_definite(self.K))

    def natural(self):
        return np.concatenate([self.h, self.K.ravel()])

    def __repr__(self):
        if self.is_proper:
            return f"MvGaussian(mean={self.mean}, cov={self.cov.tolist()})"
        return f"MvGaussian(h={self.h}, K={self.K.tolist()})"


class Bernoulli:
    __slots__ = ("log_odds",)
    family = "bernoulli"
    dim = 1

    def __init__(self, log_odds=0.0):
        self.log_odds = float(log_odds)

    @classmethod
    def uniform(cls):
        return cls(0.0)

    @classmethod
    def from_prob(cls, p):
        if p <= 0.0:
            return cls(-math.inf)
        if p >= 1.0:
            return cls(math.inf)
        return cls(math.log(p) - math.log1p(-p))

    @property
    def prob(self):
        x = self.log_odds
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)

    @property
    def is_uniform(self):
        return self.log_odds == 0.0

    @property
    def is_proper(self):
        return not math.isnan(self.log_odds)

    def natural(self):
        return np.array([self.log_odds])

    def __repr__(self):
        return f"Bernoulli(p={self.prob:.6g})"


class PointMass:
    __slots__ = ("location",)
    is_uniform = False
    is_proper = True

    def __init__(self, location):
        if np.ndim(location) == 0:
            self.location = float(location)
        else:
            self.location = np.array(location, dtype=float)
        if not np.all(np.isfinite(self.location)):
            raise ValueError("point mass location must be finite")

    @property
    def family(self):
        return "gaussian" if isinstance(self.location, float) else "mvgaussian"

    @property
    def dim(self):
        return 1 if isinstance(self.location, float) else self.location.shape[0]

    @property
    def mean(self):
        return self.location

    @property
    def var(self):
        return 0.0

    @property
    def cov(self):
        return np.zeros((self.dim, self.dim))

    def natural(self):
        return np.ravel(self.location)

    def __repr__(self):
        return f"PointMass({self.location!r})"


def uniform_like(family, dim=1):
    if family == "gaussian":
        return Gaussian.uniform()
    if family == "mvgaussian":
        return MvGaussian.uniform(dim)
    if family == "bernoulli":
        return Bernoulli.uniform()
    raise FamilyMismatchError(f"unknown family {family!r}")


def _check_same(a, b):
    if a.family != b.family or a.dim != b.dim:
        raise FamilyMismatchError(f"{a!r} vs {b!r}")


def multiply(a, b):
    """Product of two messages (natural parameters add)."""
    if isinstance(a, PointMass):
        _check_same(a, b)
        return a
    if isinstance(b, PointMass):
        _check_same(a, b)
        return b
    _check_same(a, b)
    if isinstance(a, Gaussian):
        out = Gaussian(a.eta1 + b.eta1, a.eta2 + b.eta2)
        if out.eta2 > 0.5 * NEG_PRECISION_TOL:
            raise ImproperMessageError(f"product has precision {out.precision}")
        return out
    if isinstance(a, MvGaussian):
        out = MvGaussian(a.h + b.h, a.K + b.K)
        if out.K.any() and eig_range(out.K)[0] < -NEG_PRECISION_TOL:
            raise ImproperMessageError("product precision is not PSD")
        return out
    la, lb = a.log_odds, b.log_odds
    if math.isinf(la) and math.isinf(lb) and la != lb:
        raise ImproperMessageError("product of opposite Bernoulli point masses")
    return Bernoulli(la + lb)


def divide(a, b):
    """Quotient ``a / b``; may produce negative precision (EP cavities)."""
    if isinstance(a, PointMass):
        _check_same(a, b)
        return a
    if isinstance(b, PointMass):
        raise ImproperMessageError("cannot divide a density by a point mass")
    _check_same(a, b)
    if isinstance(a, Gaussian):
        return Gaussian(a.eta1 - b.eta1, a.eta2 - b.eta2)
    if isinstance(a, MvGaussian):
        return MvGaussian(a.h - b.h, a.K - b.K)
    la, lb = a.log_odds, b.log_odds
    if math.isinf(la):
        return a
    if math.isinf(lb):
        raise ImproperMessageError("cannot divide by a Bernoulli point mass")
    return Bernoulli(la - lb)


def moments(m):
    """First two raw moments: ``(mean, E[x^2])`` or ``(p,)`` for Bernoulli."""
    if isinstance(m, PointMass):
        x = m.location
        if isinstance(x, float):
            return (x, x * x)
        return (x.copy(), np.outer(x, x))
    if isinstance(m, Bernoulli):
        return (m.prob,)
    if isinstance(m, Gaussian):
        if not m.is_proper:
            raise ImproperMessageError(f"{m!r} has no moments")
        mu, v = m.mean, m.var
        return (mu, v + mu * mu)
    if not m.is_proper:
        raise ImproperMessageError(f"{m!r} has no moments")
    cov = m.cov
    mu = cov @ m.h
    return (mu, cov + np.outer(mu, mu))


def from_moments(family, mom):
    """Inverse of :func:`moments` for the given family."""
    if family == "bernoulli":
        (p,) = mom
        if not 0.0 <= p <= 1.0:
            raise ImproperMessageError(f"probability {p} outside [0, 1]")
        return Bernoulli.from_prob(p)
    mu, second = mom
    if family == "gaussian":
        var = second - mu * mu
        if var < -NEG_PRECISION_TOL * max(1.0, abs(second)):
            raise ImproperMessageError(f"implied variance {var} < 0")
        return Gaussian.from_mean_var(mu, max(var, 0.0))
    if family == "mvgaussian":
        mu = np.asarray(mu, dtype=float)
        cov = np.asarray(second, dtype=float) - np.outer(mu, mu)
        return MvGaussian.from_mean_cov(mu, cov)
    raise FamilyMismatchError(f"unknown family {family!r}")


def moment_average(ms):
    """Average the moments of several messages and refit the family.

    Works with central moments (mean, spread of the means plus the average
    covariance), which equals averaging raw moments but avoids the
    ``E[x^2] - mean^2`` cancellation when means are large.
    """
    ms = list(ms)
    if not ms:
        raise ValueError("moment_average of an empty list")
    fam, dim = ms[0].family, ms[0].dim
    for m in ms[1:]:
        if m.family != fam or m.dim != dim:
            raise FamilyMismatchError(f"{ms[0]!r} vs {m!r}")
    n = len(ms)
    if fam == "bernoulli":
        # average p and 1 - p separately so extreme log odds keep their precision
        lo = np.array([m.log_odds for m in ms])
        p1 = np.mean(scipy.special.expit(lo))
        p0 = np.mean(scipy.special.expit(-lo))
        if p1 == 0.0 or p0 == 0.0:
            return from_moments(fam, (float(p1),))
        return Bernoulli(float(math.log(p1) - math.log(p0)))
    for m in ms:
        if not m.is_proper:
            raise ImproperMessageError(f"{m!r} has no moments")
    if fam == "gaussian":
        mus = np.array([float(mean_of(m)) for m in ms])
        mu = float(np.mean(mus))
        var = float(np.mean([var_of(m) for m in ms]) + np.mean((mus - mu) ** 2))
        return Gaussian.from_mean_var(mu, var)
    mus = np.array([np.asarray(mean_of(m), dtype=float) for m in ms])
    mu = mus.mean(axis=0)
    dev = mus - mu
    cov = np.mean([var_of(m) for m in ms], axis=0) + dev.T @ dev / n
    return MvGaussian.from_mean_cov(mu, cov)


def to_dict(m):
    """Tagged record ``{family, parameters}`` for JSON persistence."""
    if isinstance(m, PointMass):
        loc = m.location
        return {"family": "pointmass",
                "parameters": {"location": loc if isinstance(loc, float) else loc.tolist()}}
    if isinstance(m, Gaussian):
        return {"family": "gaussian", "parameters": {"eta1": m.eta1, "eta2": m.eta2}}
    if isinstance(m, MvGaussian):
        return {"family": "mvgaussian", "parameters": {"h": m.h.tolist(), "K": m.K.tolist()}}
    return {"family": "bernoulli", "parameters": {"logOdds": m.log_odds}}


def from_dict(d):
    fam, p = d["family"], d["parameters"]
    if fam == "pointmass":
        return PointMass(p["location"])
    if fam == "gaussian":
        return Gaussian(p["eta1"], p["eta2"])
    if fam == "mvgaussian":
        return MvGaussian(p["h"], p["K"])
    if fam == "bernoulli":
        return Bernoulli(p["logOdds"])
    raise FamilyMismatchError(f"unknown family {fam!r}")


def mean_of(m):
    """Mean of a proper message (probability for Bernoulli)."""
    if isinstance(m, Bernoulli):
        return m.prob
    return m.mean


def var_of(m):
    """Variance (covariance for vectors) of a proper message."""
    if isinstance(m, Bernoulli):
        p = m.prob
        return p * (1 - p)
    if isinstance(m, MvGaussian):
        return m.cov
    if isinstance(m, PointMass):
        return m.cov if m.dim > 1 or not isinstance(m.location, float) else 0.0
    return m.var
