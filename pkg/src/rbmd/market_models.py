"""Two-component multivariate Student-t mixture market model.

Provides exact seeded sampling, the induced univariate law of a portfolio
loss -<w, X> (a location-scale t mixture), and semi-analytic VaR / ES /
covariance used to build reference portfolios.  Either component can be
degenerated to a Gaussian via an explicit flag (nu = infinity is not
representable).
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, ndtr, ndtri, stdtr, stdtrit

__all__ = [
    "ModelError",
    "NumericsError",
    "MixtureModel",
    "LossLawParams",
    "sample_returns",
    "portfolio_loss_params",
    "mixture_cdf",
    "var_exact",
    "es_exact",
    "covariance",
    "expected_power_loss",
    "save_samples_csv",
]

# Fixed sampling chunk (rows scaled by dimension) so that the draws for a
# given (model, n, seed) are identical no matter the available memory.
_CHUNK_BUDGET = 2_097_152

_DENS_FLOOR = 1e-300


class ModelError(ValueError):
    """Invalid model parameters (e.g. a scale matrix that is not SPD)."""


class NumericsError(RuntimeError):
    """A semi-analytic routine failed to attain its stated tolerance."""


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """p * t(mu1, lambda1, nu1) + (1 - p) * t(mu2, lambda2, nu2)."""

    weight: float
    mu1: np.ndarray
    mu2: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    nu1: float
    nu2: float
    gaussian1: bool = False
    gaussian2: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mu1", np.asarray(self.mu1, dtype=float))
        object.__setattr__(self, "mu2", np.asarray(self.mu2, dtype=float))
        object.__setattr__(self, "lambda1", np.asarray(self.lambda1, dtype=float))
        object.__setattr__(self, "lambda2", np.asarray(self.lambda2, dtype=float))
        if not (0.0 < self.weight <= 1.0):
            raise ModelError(f"weight must lie in (0, 1], got {self.weight}")
        d = self.mu1.shape[0]
        for name in ("mu2",):
            if getattr(self, name).shape != (d,):
                raise ModelError(f"{name} must have shape ({d},)")
        for name in ("lambda1", "lambda2"):
            lam = getattr(self, name)
            if lam.shape != (d, d):
                raise ModelError(f"{name} must have shape ({d}, {d})")
            if not np.allclose(lam, lam.T, rtol=1e-10, atol=1e-14):
                raise ModelError(f"{name} is not symmetric")
        for name, nu, gauss in (("nu1", self.nu1, self.gaussian1),
                                ("nu2", self.nu2, self.gaussian2)):
            if not gauss and nu <= 1.0:
                raise ModelError(f"{name} must exceed 1, got {nu}")
        # Cholesky both factors up front: failure means the model is unusable.
        try:
            chol1 = np.linalg.cholesky(self.lambda1)
            chol2 = np.linalg.cholesky(self.lambda2)
        except np.linalg.LinAlgError as exc:
            raise ModelError(f"scale matrix is not positive definite: {exc}") from exc
        object.__setattr__(self, "_chol1", chol1)
        object.__setattr__(self, "_chol2", chol2)

    @property
    def d(self) -> int:
        return self.mu1.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.weight * self.mu1 + (1.0 - self.weight) * self.mu2

    @classmethod
    def single_t(cls, mu, lam, nu: float) -> "MixtureModel":
        """Degenerate one-component Student-t model."""
        return cls(1.0, mu, mu, lam, lam, nu, nu)

    @classmethod
    def single_gaussian(cls, mu, lam) -> "MixtureModel":
        return cls(1.0, mu, mu, lam, lam, 4.0, 4.0, gaussian1=True, gaussian2=True)

    def to_dict(self) -> dict:
        return {
            "weight": self.weight,
            "mu1": self.mu1.tolist(),
            "mu2": self.mu2.tolist(),
            "lambda1": self.lambda1.tolist(),
            "lambda2": self.lambda2.tolist(),
            "nu1": self.nu1,
            "nu2": self.nu2,
            "gaussian1": self.gaussian1,
            "gaussian2": self.gaussian2,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MixtureModel":
        required = {"weight", "mu1", "mu2", "lambda1", "lambda2", "nu1", "nu2"}
        allowed = required | {"gaussian1", "gaussian2"}
        unknown = set(doc) - allowed
        if unknown:
            raise ModelError(f"unknown model keys: {sorted(unknown)}")
        missing = required - set(doc)
        if missing:
            raise ModelError(f"missing model keys: {sorted(missing)}")
        return cls(
            weight=float(doc["weight"]),
            mu1=doc["mu1"],
            mu2=doc["mu2"],
            lambda1=doc["lambda1"],
            lambda2=doc["lambda2"],
            nu1=float(doc["nu1"]),
            nu2=float(doc["nu2"]),
            gaussian1=bool(doc.get("gaussian1", False)),
            gaussian2=bool(doc.get("gaussian2", False)),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "MixtureModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class LossLawParams:
    """Univariate law of the loss Z = -<w, X>: a two-component location-scale
    t mixture with loc_i = -<w, mu_i> and scale_i = sqrt(w' Lambda_i w)."""

    weight: float
    loc1: float
    loc2: float
    scale1: float
    scale2: float
    nu1: float
    nu2: float
    gaussian1: bool = False
    gaussian2: bool = False

    def __post_init__(self):
        if not (0.0 < self.weight <= 1.0):
            raise ModelError(f"weight must lie in (0, 1], got {self.weight}")
        if not (self.scale1 > 0.0 and self.scale2 > 0.0):
            raise ModelError("component scales must be positive")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _rng(seed: int) -> np.random.Generator:
    # Philox is counter based, so streams are stable and cheap to derive.
    return np.random.Generator(np.random.Philox(key=seed & (2 ** 64 - 1)))


def sample_returns(model: MixtureModel, n: int, seed: int) -> np.ndarray:
    """Draw n i.i.d. return vectors; identical seeds give bit-identical output.

    Each row picks component 1 with probability ``weight``, then draws
    mu + (chol(Lambda) g) * sqrt(nu / chi2_nu) with g standard normal
    (the chi-squared factor is skipped for Gaussian-flagged components).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    d = model.d
    rng = _rng(seed)
    chunk = min(n, max(1024, _CHUNK_BUDGET // d))
    out = np.empty((n, d))
    chol1_t = model._chol1.T
    chol2_t = model._chol2.T
    done = 0
    while done < n:
        k = min(chunk, n - done)
        pick1 = rng.random(k) < model.weight
        g = rng.standard_normal((k, d))
        w1 = 2.0 * rng.standard_gamma(model.nu1 / 2.0, k)
        w2 = 2.0 * rng.standard_gamma(model.nu2 / 2.0, k)
        f1 = 1.0 if model.gaussian1 else np.sqrt(model.nu1 / w1)[:, None]
        f2 = 1.0 if model.gaussian2 else np.sqrt(model.nu2 / w2)[:, None]
        x1 = model.mu1 + (g @ chol1_t) * f1
        x2 = model.mu2 + (g @ chol2_t) * f2
        out[done:done + k] = np.where(pick1[:, None], x1, x2)
        done += k
    return out


def save_samples_csv(samples: np.ndarray, path) -> None:
    """Headerless CSV dump, one draw per row, 17 significant digits."""
    np.savetxt(path, np.atleast_2d(samples), fmt="%.17g", delimiter=",")


# ---------------------------------------------------------------------------
# Univariate t / normal building blocks (all vectorized over the quantile)
# ---------------------------------------------------------------------------

_T_LOGNORM_CACHE: dict = {}


def _t_lognorm(nu: float) -> float:
    c = _T_LOGNORM_CACHE.get(nu)
    if c is None:
        c = gammaln((nu + 1.0) / 2.0) - gammaln(nu / 2.0) - 0.5 * math.log(nu * math.pi)
        _T_LOGNORM_CACHE[nu] = c
    return c


def _t_pdf(x, nu: float):
    return np.exp(_t_lognorm(nu) - 0.5 * (nu + 1.0) * np.log1p(np.asarray(x) ** 2 / nu))

def _t_cdf(x, nu: float):
    return stdtr(nu, x)

def _t_sf(x, nu: float):
    return stdtr(nu, -np.asarray(x))

def _norm_pdf(x):
    return np.exp(-0.5 * np.asarray(x) ** 2) / math.sqrt(2.0 * math.pi)

def _norm_sf(x):
    return ndtr(-np.asarray(x))


def _t_tail_ex1(q, nu: float):
    """E[T 1{T > q}] for standard t; finite for nu > 1."""
    return _t_pdf(q, nu) * (nu + np.asarray(q) ** 2) / (nu - 1.0)


def _t_tail_ex2(q, nu: float):
    """E[T^2 1{T > q}] for standard t; finite for nu > 2."""
    q = np.asarray(q)
    shrink = math.sqrt((nu - 2.0) / nu)
    return nu * ((nu - 1.0) / (nu - 2.0) * _t_sf(q * shrink, nu - 2.0) - _t_sf(q, nu))


def _component_sf_pdf(x, gaussian: bool, nu: float):
    if gaussian:
        return _norm_sf(x), _norm_pdf(x)
    return _t_sf(x, nu), _t_pdf(x, nu)


def _partial_upper(q, gaussian: bool, nu: float, p: int):
    """E[(T - q)_+^p] for the standardized component, p in {1, 2}."""
    q = np.asarray(q, dtype=float)
    if gaussian:
        sf = _norm_sf(q)
        ex1 = _norm_pdf(q)
        if p == 1:
            return ex1 - q * sf
        ex2 = q * _norm_pdf(q) + sf
        return ex2 - 2.0 * q * ex1 + q ** 2 * sf
    if p == 1:
        if nu <= 1.0:
            raise NumericsError(f"first partial moment needs nu > 1, got {nu}")
        return _t_tail_ex1(q, nu) - q * _t_sf(q, nu)
    if nu <= 2.0:
        raise NumericsError(f"second partial moment needs nu > 2, got {nu}")
    return _t_tail_ex2(q, nu) - 2.0 * q * _t_tail_ex1(q, nu) + q ** 2 * _t_sf(q, nu)


# ---------------------------------------------------------------------------
# Portfolio loss law, CDF, VaR, ES
# ---------------------------------------------------------------------------

def portfolio_loss_params(model: MixtureModel, w: np.ndarray) -> LossLawParams:
    """Parameters of the univariate law of -<w, X>."""
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ValueError("portfolio weights must be finite")
    if not np.any(w != 0.0):
        raise ModelError("zero portfolio has a degenerate loss law")
    return LossLawParams(
        weight=model.weight,
        loc1=float(-w @ model.mu1),
        loc2=float(-w @ model.mu2),
        scale1=float(np.sqrt(w @ model.lambda1 @ w)),
        scale2=float(np.sqrt(w @ model.lambda2 @ w)),
        nu1=model.nu1,
        nu2=model.nu2,
        gaussian1=model.gaussian1,
        gaussian2=model.gaussian2,
    )


def _mixture_cdf_arrays(x, p: LossLawParams, loc1, scale1, loc2, scale2):
    z1 = (x - loc1) / scale1
    c1 = ndtr(z1) if p.gaussian1 else _t_cdf(z1, p.nu1)
    if p.weight >= 1.0:
        return c1
    z2 = (x - loc2) / scale2
    c2 = ndtr(z2) if p.gaussian2 else _t_cdf(z2, p.nu2)
    return p.weight * c1 + (1.0 - p.weight) * c2


def _mixture_pdf_arrays(x, p: LossLawParams, loc1, scale1, loc2, scale2):
    z1 = (x - loc1) / scale1
    d1 = (_norm_pdf(z1) if p.gaussian1 else _t_pdf(z1, p.nu1)) / scale1
    if p.weight >= 1.0:
        return d1
    z2 = (x - loc2) / scale2
    d2 = (_norm_pdf(z2) if p.gaussian2 else _t_pdf(z2, p.nu2)) / scale2
    return p.weight * d1 + (1.0 - p.weight) * d2


def _component_quantile(alpha: float, gaussian: bool, nu: float, loc, scale):
    base = ndtri(alpha) if gaussian else stdtrit(nu, alpha)
    return loc + scale * base


def _make_mixture_evals(p: LossLawParams, loc1, scale1, loc2, scale2):
    """Closures (cdf, pdf) over pre-stacked component parameters.

    Built once per quantile solve so that each evaluation is a handful of
    vectorized ufunc calls regardless of the batch size."""
    if p.weight >= 1.0:
        if p.gaussian1:
            return (lambda x: ndtr((x - loc1) / scale1),
                    lambda x: _norm_pdf((x - loc1) / scale1) / scale1)
        nu1 = p.nu1
        return (lambda x: stdtr(nu1, (x - loc1) / scale1),
                lambda x: _t_pdf((x - loc1) / scale1, nu1) / scale1)
    l1, l2, s1, s2 = np.broadcast_arrays(loc1, loc2, scale1, scale2)
    locs = np.stack([l1, l2])
    scales = np.stack([s1, s2])
    w = np.array([[p.weight], [1.0 - p.weight]])
    if not (p.gaussian1 or p.gaussian2):
        df = np.stack([np.full_like(scales[0], p.nu1), np.full_like(scales[1], p.nu2)])
        lognorm = np.stack([np.full_like(scales[0], _t_lognorm(p.nu1)),
                            np.full_like(scales[1], _t_lognorm(p.nu2))])
        nu_plus = 0.5 * (df + 1.0)

        def cdf(x):
            z = (x - locs) / scales
            return (w * stdtr(df, z)).sum(axis=0)

        def pdf(x):
            z = (x - locs) / scales
            d = np.exp(lognorm - nu_plus * np.log1p(z * z / df)) / scales
            return (w * d).sum(axis=0)

        return cdf, pdf

    def cdf(x):
        return _mixture_cdf_arrays(x, p, loc1, scale1, loc2, scale2)

    def pdf(x):
        return _mixture_pdf_arrays(x, p, loc1, scale1, loc2, scale2)

    return cdf, pdf


def mixture_cdf(params: LossLawParams, x) -> float:
    """CDF of the loss mixture at x (scalar or array)."""
    out = _mixture_cdf_arrays(np.asarray(x, dtype=float), params,
                              params.loc1, params.scale1, params.loc2, params.scale2)
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(out)
    return out


def _var_arrays(p: LossLawParams, loc1, scale1, loc2, scale2, alpha: float) -> np.ndarray:
    """Alpha-quantile of each column law by safeguarded Newton.

    The mixture quantile is bracketed by the two component quantiles; a
    geometric expansion from the mixture mean backs that up, then bisection
    plus Newton polishing drive |cdf(q) - alpha| to the 1e-12 contract."""
    loc1 = np.atleast_1d(np.asarray(loc1, dtype=float))
    scale1 = np.atleast_1d(np.asarray(scale1, dtype=float))
    loc2 = np.atleast_1d(np.asarray(loc2, dtype=float))
    scale2 = np.atleast_1d(np.asarray(scale2, dtype=float))
    cdf, pdf = _make_mixture_evals(p, loc1, scale1, loc2, scale2)
    q1 = _component_quantile(alpha, p.gaussian1, p.nu1, loc1, scale1)
    if p.weight >= 1.0:
        lo = q1 - np.abs(q1) * 1e-8 - 1e-12
        hi = q1 + np.abs(q1) * 1e-8 + 1e-12
    else:
        q2 = _component_quantile(alpha, p.gaussian2, p.nu2, loc2, scale2)
        lo = np.minimum(q1, q2)
        hi = np.maximum(q1, q2)
    # Safety net in case the closed-form bracket is off by rounding.
    mean = p.weight * loc1 + (1.0 - p.weight) * loc2
    s = 10.0 * np.maximum(scale1, scale2)
    for _ in range(200):
        bad_lo = cdf(lo) > alpha
        bad_hi = cdf(hi) < alpha
        if not (bad_lo.any() or bad_hi.any()):
            break
        lo = np.where(bad_lo, np.minimum(lo, mean) - s, lo)
        hi = np.where(bad_hi, np.maximum(hi, mean) + s, hi)
        s = s * 2.0
    else:
        raise NumericsError("quantile bracket expansion failed after 200 doublings")
    for _ in range(10):
        mid = 0.5 * (lo + hi)
        above = cdf(mid) >= alpha
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    q = 0.5 * (lo + hi)
    for _ in range(4):
        f = cdf(q) - alpha
        above = f >= 0.0
        hi = np.where(above, q, hi)
        lo = np.where(above, lo, q)
        q = np.clip(q - f / np.maximum(pdf(q), _DENS_FLOOR), lo, hi)
    err = np.abs(cdf(q) - alpha)
    if np.any(err > 1e-12):
        raise NumericsError(f"quantile refinement stalled at cdf error {err.max():.3e}")
    return q


def var_exact(params: LossLawParams, alpha: float) -> float:
    """Value-at-risk: the unique root of mixture_cdf(x) = alpha."""
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    q = _var_arrays(params, params.loc1, params.scale1, params.loc2, params.scale2, alpha)
    return float(q[0])


def _es_arrays(p: LossLawParams, loc1, scale1, loc2, scale2, alpha: float) -> np.ndarray:
    """Closed-form tail expectation E[Z | Z >= VaR_alpha] per component."""
    for nu, gauss in ((p.nu1, p.gaussian1), (p.nu2, p.gaussian2)):
        if not gauss and nu <= 1.0:
            raise NumericsError(f"expected shortfall needs nu > 1, got {nu}")
    q = _var_arrays(p, loc1, scale1, loc2, scale2, alpha)
    z1 = (q - loc1) / scale1
    sf1, pdf1 = _component_sf_pdf(z1, p.gaussian1, p.nu1)
    ex1 = pdf1 if p.gaussian1 else _t_tail_ex1(z1, p.nu1)
    tail = p.weight * (loc1 * sf1 + scale1 * ex1)
    if p.weight < 1.0:
        z2 = (q - loc2) / scale2
        sf2, pdf2 = _component_sf_pdf(z2, p.gaussian2, p.nu2)
        ex2 = pdf2 if p.gaussian2 else _t_tail_ex1(z2, p.nu2)
        tail = tail + (1.0 - p.weight) * (loc2 * sf2 + scale2 * ex2)
    return tail / (1.0 - alpha)


def es_exact(params: LossLawParams, alpha: float) -> float:
    """Expected shortfall at level alpha, semi-analytic."""
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    es = _es_arrays(params, params.loc1, params.scale1, params.loc2, params.scale2, alpha)
    return float(es[0])


def covariance(model: MixtureModel) -> np.ndarray:
    """Exact covariance of X; needs nu > 2 for non-Gaussian components."""
    pieces = []
    for w, mu, lam, nu, gauss in (
        (model.weight, model.mu1, model.lambda1, model.nu1, model.gaussian1),
        (1.0 - model.weight, model.mu2, model.lambda2, model.nu2, model.gaussian2),
    ):
        if w == 0.0:
            continue
        if gauss:
            c = 1.0
        else:
            if nu <= 2.0:
                raise NumericsError(f"covariance needs nu > 2, got {nu}")
            c = nu / (nu - 2.0)
        pieces.append(w * (c * lam + np.outer(mu, mu)))
    mean = model.mean
    return sum(pieces) - np.outer(mean, mean)


# ---------------------------------------------------------------------------
# Expected power loss of the mixture (deviation-measure objective)
# ---------------------------------------------------------------------------

def expected_power_loss(params: LossLawParams, a_plus: float, b_minus: float,
                        p_power: int, xi: float) -> float:
    """E[(a (Z - xi)_+ + b (Z - xi)_-)^p] in expanded two-branch form."""
    total = 0.0
    for w, loc, scale, nu, gauss in (
        (params.weight, params.loc1, params.scale1, params.nu1, params.gaussian1),
        (1.0 - params.weight, params.loc2, params.scale2, params.nu2, params.gaussian2),
    ):
        if w == 0.0:
            continue
        q = (xi - loc) / scale
        up = _partial_upper(q, gauss, nu, p_power)
        down = _partial_upper(-q, gauss, nu, p_power)  # symmetry of t / normal
        total += w * scale ** p_power * (a_plus ** p_power * up + b_minus ** p_power * down)
    return float(total)
