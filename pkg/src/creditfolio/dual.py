"""Pointwise coefficient kernel of the dual control problem.

Pure functions of value inputs; freely parallelizable.  The dual diffusion
loading ``theta`` is never an independent input: it is always derived from the
jump loading ``h`` through the admissibility constraint

    sigma(y) (xi(y) - theta) = diag((1 - z) lambda(y, z)) h,

which pins the pair (theta, h) and removes a redundant degree of freedom.
Jump loadings of defaulted names are stored as 0 and excluded from all sums.
"""

from __future__ import annotations

import numpy as np

from .model import DefaultState, ModelSpec

__all__ = [
    "H_FLOOR",
    "market_price_of_risk",
    "theta_from_h",
    "h_from_theta",
    "psi",
    "phi_and_nu",
    "phi_bounds",
    "beta_exponent",
    "legendre",
    "kappa_hat",
    "dual_value",
]

# powers (1+h)^q use the real branch; require 1 + h > H_FLOOR
H_FLOOR = 1e-6


def _check_h(h: np.ndarray, state: DefaultState) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    alive = 1.0 - state.indicator()
    if np.any(1.0 + h[alive > 0] <= H_FLOOR):
        raise ValueError(f"jump loading out of domain: need 1 + h > {H_FLOOR} for alive names")
    return h * alive


def market_price_of_risk(y: float, spec: ModelSpec) -> np.ndarray:
    """xi(y) = sigma(y)^{-1} (mu - r 1)."""
    s = spec.market.sigma_at(y)
    return np.linalg.solve(s, spec.market.mu - spec.market.r)


def theta_from_h(h, y: float, state: DefaultState, spec: ModelSpec) -> np.ndarray:
    """Dual diffusion loading tied to the jump loading h.

    theta = xi(y) - sigma(y)^{-1} diag((1-z) lambda) h; when every name has
    defaulted this is the market price of risk regardless of h.
    """
    h = _check_h(h, state)
    s = spec.market.sigma_at(y)
    xi = np.linalg.solve(s, spec.market.mu - spec.market.r)
    lam = spec.alive_intensity(y, state)
    return xi - np.linalg.solve(s, lam * h)


def h_from_theta(theta, y: float, state: DefaultState, spec: ModelSpec) -> np.ndarray:
    """Inverse of :func:`theta_from_h` on alive components (0 where defaulted)."""
    s = spec.market.sigma_at(y)
    xi = np.linalg.solve(s, spec.market.mu - spec.market.r)
    rhs = s @ (xi - np.asarray(theta, dtype=float))
    lam = spec.alive_intensity(y, state)
    h = np.zeros(spec.n)
    for i in state.alive:
        if lam[i] <= 0:
            if abs(rhs[i]) > 1e-12:
                raise ValueError(f"no jump loading reproduces theta: zero intensity for name {i}")
            continue
        h[i] = rhs[i] / lam[i]
    return h


def psi(a, h, theta, y: float, state: DefaultState, spec: ModelSpec) -> float:
    """Exponential growth rate of the simplified dual criterion.

    psi = q(q-1)/2 (|theta|^2 + |a|^2) - q r
          + sum_i (1-z_i) [ (1+h_i)^q - q (1+h_i) + q - 1 ] lambda_i(y, z).
    """
    q = spec.q
    a = np.asarray(a, dtype=float)
    theta = np.asarray(theta, dtype=float)
    h = _check_h(h, state)
    lam = spec.alive_intensity(y, state)
    alive = 1.0 - state.indicator()
    one_ph = np.where(alive > 0, 1.0 + h, 1.0)
    bracket = one_ph**q - q * one_ph + q - 1.0
    out = 0.5 * q * (q - 1.0) * (float(theta @ theta) + float(a @ a)) - q * spec.market.r
    return float(out + np.sum(bracket * lam))


def phi_and_nu(hhat, theta, y: float, state: DefaultState, spec: ModelSpec) -> tuple[float, float]:
    """Linear reaction rate phi and transformed factor drift nu at one node.

    nu = mu0(y) - q rho sigma0(y) theta (scalar for m = 1);
    phi = q(q-1)/2 |theta|^2 - q r + sum_i [q - 1 - q (1 + hhat_i)] (1-z_i) lambda_i.
    """
    q = spec.q
    theta = np.asarray(theta, dtype=float)
    hhat = _check_h(hhat, state)
    lam = spec.alive_intensity(y, state)
    nu = float(spec.factor.drift(y)) - q * spec.factor.rho * float(spec.factor.vol_row(y) @ theta)
    phi = 0.5 * q * (q - 1.0) * float(theta @ theta) - q * spec.market.r
    phi += float(np.sum((q - 1.0 - q * (1.0 + hhat)) * lam))
    return phi, nu


def phi_bounds(sup_theta_sq: float, sup_lam, sup_h, sup_one_ph, q: float, r: float) -> tuple[float, float]:
    """State-dependent lower/upper bounds of phi from sup norms of the control family.

    ``sup_theta_sq`` bounds sum_j ||theta_j||_inf^2; the per-name arrays bound
    (1-z_i)||lambda_i||, (1-z_i)||hhat_i|| and (1-z_i)||1+hhat_i||.  Branches:
    for q in (0,1) the upper bound is 0; for q < 0 the lower bound is
    -(1-q) sum_i ||lambda_i||.
    """
    if not q < 1.0:
        raise ValueError("need q < 1")
    sup_lam = np.asarray(sup_lam, dtype=float)
    sup_h = np.asarray(sup_h, dtype=float)
    sup_one_ph = np.asarray(sup_one_ph, dtype=float)
    if q == 0.0:
        return (-float(np.sum(sup_lam)), 0.0)
    if 0.0 < q < 1.0:
        lower = -(0.5 * q * (1.0 - q) * sup_theta_sq + q * r
                  + (1.0 - q) * float(np.sum(sup_lam))
                  + q * float(np.sum(sup_lam * sup_one_ph)))
        return (lower, 0.0)
    upper = 0.5 * q * (q - 1.0) * sup_theta_sq - q * r - q * float(np.sum(sup_lam * sup_h))
    lower = -(1.0 - q) * float(np.sum(sup_lam))
    return (lower, upper)


def beta_exponent(q: float, rho: float) -> float:
    """Power-transform exponent beta = (1-q)/(1 - q rho^2); positive for q < 1, |rho| < 1."""
    return (1.0 - q) / (1.0 - q * rho * rho)


def legendre(i: int, y_dual: float, spec: ModelSpec) -> tuple[float, float]:
    """Convex-conjugate pair (Utilde_i, I_i) of the power utility at a dual point.

    I_i(y) = K_i^{1-q} y^{q-1} attains the sup in the transform, and
    Utilde_i(y) = -(1/q) K_i^{1-q} y^q.
    """
    if y_dual <= 0:
        raise ValueError("dual argument must be positive")
    if i not in (1, 2):
        raise ValueError("utility index must be 1 (terminal wealth) or 2 (consumption)")
    q = spec.q
    if q == 0.0:
        raise ValueError("legendre transform of power utility needs q != 0")
    K = spec.pref.K1 if i == 1 else spec.pref.K2
    I = K ** (1.0 - q) * y_dual ** (q - 1.0)
    U_tilde = -(1.0 / q) * K ** (1.0 - q) * y_dual**q
    return U_tilde, I


def kappa_hat(x: float, F: float, q: float) -> float:
    """Optimal dual scale kappa = (F / x)^{1/(1-q)} for initial wealth x and dual value F."""
    if x <= 0 or F <= 0:
        raise ValueError("wealth and dual value must be positive")
    return (F / x) ** (1.0 / (1.0 - q))


def dual_value(x: float, F: float, p: float) -> float:
    """Primal value attained by the dual optimum: (x^p / p) F^{1-p}."""
    if x <= 0 or F <= 0:
        raise ValueError("wealth and dual value must be positive")
    return (x**p / p) * F ** (1.0 - p)
