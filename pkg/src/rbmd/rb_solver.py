"""Risk-budgeting objective, tamed gradient, reference portfolios, diagnostics.

The unnormalized objective is

    Gamma(y) = g(r(y)) - sum_i b_i log y_i,      r(y) = rho(-<y, X>),

whose unique minimizer y*, once normalized to the simplex, is the portfolio
whose risk contributions match the budgets b.  The gradient is tamed by the
factor kappa(y) = min_i y_i ^ 1 so that it stays bounded and extends
continuously to the boundary of the nonnegative orthant.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import market_models as mm
from . import risk_loss as rl

__all__ = [
    "ConvergenceError",
    "RiskBudget",
    "ObjectiveContext",
    "PortfolioReport",
    "gamma_value",
    "gamma_gradient",
    "tamed_gradient",
    "normalize",
    "risk_contributions",
    "mde",
    "kl_divergence",
    "reference_portfolio",
    "divergence_flag",
]

_FD_REL_STEP = 1e-6
_GOLDEN_RELTOL = 1e-10
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


class ConvergenceError(RuntimeError):
    """Reference solve did not reach the requested gradient tolerance."""

    def __init__(self, message: str, grad_norm: float):
        super().__init__(message)
        self.grad_norm = grad_norm


@dataclass(frozen=True, eq=False)
class RiskBudget:
    """Positive budget shares, normalized to sum to one on construction."""

    b: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        if b.ndim != 1 or b.size == 0:
            raise ValueError("budget must be a nonempty vector")
        if not np.all(np.isfinite(b)) or np.any(b <= 0.0):
            raise ValueError("budget entries must be positive and finite")
        object.__setattr__(self, "b", b / b.sum())

    @classmethod
    def uniform(cls, d: int) -> "RiskBudget":
        return cls(np.full(d, 1.0 / d))

    @property
    def d(self) -> int:
        return self.b.size


def _golden_min(fn, lo: float, hi: float, reltol: float = _GOLDEN_RELTOL):
    """Golden-section minimum of a unimodal fn on [lo, hi]."""
    tol = reltol * max(1.0, abs(lo), abs(hi))
    a, b = lo, hi
    x1 = b - _INVPHI * (b - a)
    x2 = a + _INVPHI * (b - a)
    f1, f2 = fn(x1), fn(x2)
    while (b - a) > tol:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INVPHI * (b - a)
            f1 = fn(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INVPHI * (b - a)
            f2 = fn(x2)
    x = 0.5 * (a + b)
    return x, fn(x)


@dataclass(eq=False)
class ObjectiveContext:
    """Binds budgets, measure and market model to one evaluable objective.

    ``g_mode`` selects the outer function: "identity" leaves the risk as is,
    "power" raises it to the measure's exponent p.  Expected shortfall always
    uses the identity; deviation measures default to the power mode that
    matches their loss representation but may be evaluated with the identity
    as well (the normalized minimizer is the same either way).
    """

    budget: RiskBudget
    measure: rl.MeasureSpec
    model: mm.MixtureModel
    g_mode: str = ""

    def __post_init__(self):
        if self.budget.d != self.model.d:
            raise ValueError("budget and model dimensions differ")
        if not self.g_mode:
            self.g_mode = "identity" if self.measure.is_es else "power"
        if self.g_mode not in ("identity", "power"):
            raise ValueError(f"unknown g_mode {self.g_mode!r}")
        if self.measure.is_es and self.g_mode != "identity":
            raise ValueError("expected shortfall requires the identity outer function")

    @property
    def d(self) -> int:
        return self.model.d

    @cached_property
    def _mode(self) -> str:
        m = self.measure
        if m.is_es:
            return "es"
        if m.p_power == 2 and m.a_plus == m.b_minus:
            try:
                self._sigma  # noqa: B018 - probe covariance availability
                return "vol"
            except mm.NumericsError:
                pass
        if self._is_single_centered:
            return "dev_unit"
        return "dev_general"

    @cached_property
    def _sigma(self) -> np.ndarray:
        return mm.covariance(self.model)

    @cached_property
    def _is_single_centered(self) -> bool:
        return self.model.weight >= 1.0 and not np.any(self.model.mu1)

    @cached_property
    def _unit_loss_min(self) -> float:
        """min_xi E[(a (T - xi)_+ + b (T - xi)_-)^p] for the standardized
        single-component law; the loss of y then scales as |y|_Lambda^p."""
        unit = mm.LossLawParams(1.0, 0.0, 0.0, 1.0, 1.0, self.model.nu1,
                                self.model.nu1, self.model.gaussian1, self.model.gaussian1)
        lo = mm.var_exact(unit, 0.001)
        hi = mm.var_exact(unit, 0.999)
        m = self.measure
        _, val = _golden_min(
            lambda xi: mm.expected_power_loss(unit, m.a_plus, m.b_minus, m.p_power, xi),
            lo, hi)
        return val

    # -- outer objective g(r(y)) ------------------------------------------

    def _power_outer(self, y: np.ndarray) -> float:
        """min_xi E[L(xi, -<y, X>)], i.e. g(r(y)) with the power outer mode."""
        m = self.measure
        mode = self._mode
        if mode == "vol":
            return m.a_plus ** 2 * float(y @ self._sigma @ y)
        if mode == "dev_unit":
            s2 = float(y @ self.model.lambda1 @ y)
            return self._unit_loss_min * s2 ** (m.p_power / 2.0)
        params = mm.portfolio_loss_params(self.model, y)
        lo = mm.var_exact(params, 0.001)
        hi = mm.var_exact(params, 0.999)
        _, val = _golden_min(
            lambda xi: mm.expected_power_loss(params, m.a_plus, m.b_minus, m.p_power, xi),
            lo, hi)
        return val

    def risk_value(self, y: np.ndarray) -> float:
        """r(y) = rho(-<y, X>)."""
        if self._mode == "es":
            params = mm.portfolio_loss_params(self.model, y)
            return mm.es_exact(params, self.measure.alpha)
        return rl.rho_from_expected_loss(self.measure, self._power_outer(y))

    def outer_value(self, y: np.ndarray) -> float:
        """g(r(y)) under the context's g_mode."""
        if self._mode == "es":
            return self.risk_value(y)
        if self.g_mode == "power":
            return self._power_outer(y)
        return self.risk_value(y)

    # -- gradients ----------------------------------------------------------

    def _es_batch(self, rows: np.ndarray) -> np.ndarray:
        """Semi-analytic ES for every row portfolio at once."""
        model = self.model
        loc1 = -(rows @ model.mu1)
        loc2 = -(rows @ model.mu2)
        scale1 = np.sqrt(np.einsum("ij,ij->i", rows @ model.lambda1, rows))
        scale2 = np.sqrt(np.einsum("ij,ij->i", rows @ model.lambda2, rows))
        template = mm.portfolio_loss_params(model, rows[0])
        return mm._es_arrays(template, loc1, scale1, loc2, scale2, self.measure.alpha)

    def _fd_probe(self, y: np.ndarray):
        h = _FD_REL_STEP * np.maximum(1.0, y)
        rows = np.repeat(y[None, :], 2 * y.size, axis=0)
        idx = np.arange(y.size)
        rows[2 * idx, idx] += h
        rows[2 * idx + 1, idx] -= h
        return rows, h

    def outer_gradient(self, y: np.ndarray) -> np.ndarray:
        """Gradient of g(r(.)): analytic for the volatility family, central
        finite differences of the semi-analytic value otherwise."""
        mode = self._mode
        m = self.measure
        if mode == "vol":
            sig_y = self._sigma @ y
            if self.g_mode == "power":
                return m.a_plus ** 2 * 2.0 * sig_y
            return m.a_plus * sig_y / math.sqrt(float(y @ sig_y))
        if mode == "es":
            rows, h = self._fd_probe(y)
            vals = self._es_batch(rows)
            return (vals[0::2] - vals[1::2]) / (2.0 * h)
        rows, h = self._fd_probe(y)
        vals = np.array([self.outer_value(r) for r in rows])
        return (vals[0::2] - vals[1::2]) / (2.0 * h)

    def risk_gradient(self, y: np.ndarray) -> np.ndarray:
        """Gradient of r(.) itself (no outer function, no log term)."""
        if self._mode == "vol":
            sig_y = self._sigma @ y
            return self.measure.a_plus * sig_y / math.sqrt(float(y @ sig_y))
        if self._mode == "es":
            return self.outer_gradient(y)
        rows, h = self._fd_probe(y)
        vals = np.array([self.risk_value(r) for r in rows])
        return (vals[0::2] - vals[1::2]) / (2.0 * h)


def _require_interior(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0) or not np.all(np.isfinite(y)):
        raise ValueError("y must be strictly positive and finite")
    return y


def gamma_value(ctx: ObjectiveContext, y: np.ndarray) -> float:
    """Gamma(y) = g(r(y)) - sum_i b_i log y_i on the open orthant."""
    y = _require_interior(y)
    return ctx.outer_value(y) - float(ctx.budget.b @ np.log(y))


def gamma_gradient(ctx: ObjectiveContext, y: np.ndarray) -> np.ndarray:
    """Untamed gradient of Gamma at an interior point."""
    y = _require_interior(y)
    return ctx.outer_gradient(y) - ctx.budget.b / y


def tamed_gradient(budget: RiskBudget, grad_outer: np.ndarray, y: np.ndarray) -> np.ndarray:
    """kappa(y) * grad Gamma(y), extended by continuity to the boundary.

    At a boundary point the value is -b_j on zero coordinates and 0 elsewhere
    (the 0/0 = 1 convention applied to b_j * min(y)/y_j).
    """
    y = np.asarray(y, dtype=float)
    if np.any(y < 0.0):
        raise ValueError("y must be nonnegative")
    b = budget.b
    if np.any(y == 0.0):
        return np.where(y == 0.0, -b, 0.0)
    kappa = min(float(y.min()), 1.0)
    return kappa * (np.asarray(grad_outer, dtype=float) - b / y)


def normalize(y: np.ndarray) -> np.ndarray:
    """Project onto the simplex by the l1 rescaling u = y / sum(y)."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0):
        raise ValueError("y must be strictly positive")
    total = y.sum()
    if total == 0.0:
        raise ValueError("cannot normalize the zero vector")
    return y / total


def risk_contributions(ctx: ObjectiveContext, u: np.ndarray):
    """(u_i * d_i r(u), r(u)) for an interior simplex point u."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0.0):
        raise ValueError("u must be interior to the simplex")
    if abs(u.sum() - 1.0) > 1e-6:
        raise ValueError("u must sum to one")
    grad = ctx.risk_gradient(u)
    return u * grad, ctx.risk_value(u)


def mde(u: np.ndarray, u_ref: np.ndarray) -> float:
    """Mean deviation error (1/d) sum_i |u_i - u_ref_i|."""
    u = np.asarray(u, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    if u.shape != u_ref.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {u_ref.shape}")
    return float(np.abs(u - u_ref).mean())


def kl_divergence(y: np.ndarray, y_prime: np.ndarray) -> float:
    """Entropic Bregman divergence sum y log(y/y') - sum y + sum y'.

    Defined for y >= 0 (0 log 0 = 0) against strictly positive y'.
    """
    y = np.asarray(y, dtype=float)
    y_prime = np.asarray(y_prime, dtype=float)
    if y.shape != y_prime.shape:
        raise ValueError("dimension mismatch")
    if np.any(y < 0.0):
        raise ValueError("y must be nonnegative")
    if np.any(y_prime <= 0.0):
        raise ValueError("y' must be strictly positive")
    logs = np.where(y > 0.0, y * np.log(np.where(y > 0.0, y, 1.0) / y_prime), 0.0)
    return float(logs.sum() - y.sum() + y_prime.sum())


def divergence_flag(gap: float, epsilon: float) -> bool:
    """True when a run's objective gap exceeds epsilon or is not finite."""
    if not (epsilon > 0.0):
        raise ValueError("epsilon must be positive")
    return (not math.isfinite(gap)) or gap > epsilon


@dataclass(eq=False)
class PortfolioReport:
    """Converged reference portfolio with its Euler decomposition."""

    u: np.ndarray
    y_raw: np.ndarray
    contributions: np.ndarray
    risk: float
    var: float | None
    grad_norm: float
    iterations: int

    def to_dict(self) -> dict:
        return {
            "weights": self.u.tolist(),
            "y_raw": self.y_raw.tolist(),
            "contributions": self.contributions.tolist(),
            "risk": self.risk,
            "var": self.var,
            "gradient_norm": self.grad_norm,
            "iterations": self.iterations,
        }


def reference_portfolio(ctx: ObjectiveContext, tol: float,
                        max_iterations: int = 100_000) -> PortfolioReport:
    """Solve for the budget-matching portfolio to a tamed-gradient tolerance.

    Runs the deterministic mirror descent with a constant unit step and cap
    m = 100 d; if that stalls, retries once with the decaying n^-0.55
    schedule before giving up.
    """
    from . import mirror_descent as md

    m_cap = 100.0 * ctx.d
    schedules = [md.StepSchedule.constant(1.0), md.StepSchedule.power(1.0, 0.55)]
    last_norm = math.inf
    for schedule in schedules:
        cfg = md.OptimizerConfig(
            m_cap=m_cap,
            schedule=schedule,
            iterations=max_iterations,
            y0=md.default_y0(ctx.model, m_cap),
            record_every=max_iterations,
            grad_tol=tol,
        )
        result = md.dmd_run(ctx, cfg)
        last_norm = result.grad_norm
        if not result.diverged and result.grad_norm <= tol:
            u = normalize(result.y_final)
            contributions, risk = risk_contributions(ctx, u)
            var = None
            if ctx.measure.is_es:
                params = mm.portfolio_loss_params(ctx.model, u)
                var = mm.var_exact(params, ctx.measure.alpha)
            return PortfolioReport(
                u=u,
                y_raw=result.y_final,
                contributions=contributions,
                risk=risk,
                var=var,
                grad_norm=result.grad_norm,
                iterations=result.iterations,
            )
    raise ConvergenceError(
        f"reference solve stalled with gradient norm {last_norm:.3e} > {tol:.3e}",
        grad_norm=last_norm,
    )
