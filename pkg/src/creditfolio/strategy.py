"""Dual controls (hhat, ahat) and primal feedback controls (pi, consumption).

At each grid node the jump loading hhat of every alive name with positive
default intensity solves the stationarity system

    J(h)^T sigma(y) = Lambda(h)  restricted to alive columns,

where theta is tied to h by the admissibility constraint, J_i = 1 -
(1+h_i)^{q-1} g(.,zbar^i)/g(.,z) and Lambda = (1-q) theta^T + rho (D_y g)^T
sigma0 / g.  Alive names with zero intensity have no jump exposure; their
portfolio weight comes from the diffusion matching alone (this is how the
classical Merton fraction, which may exceed 1, is recovered in the
default-free limit).  Defaulted names carry h = 0 and zero weight.

Roots are followed by continuation in time: each slice warm-starts from the
previous one, seeded with h = 0 at zero horizon, which picks the branch that
is continuous in t when the scalar equations admit several crossings.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .dual import H_FLOOR
from .fields import PolicyField, SolutionField
from .model import DefaultState, ModelSpec

__all__ = [
    "SolverError",
    "lambda_and_J",
    "solve_hhat",
    "solve_hhat_slice",
    "ahat_slice",
    "build_policy",
    "pi_hat",
    "consumption_rate",
    "value_function",
]

_LAMBDA_TOL = 1e-12
_RESID_TOL = 1e-10
_NEWTON_TOL = 1e-13
_MAX_ITER = 200
_H_MAX_START = 8.0
_H_MAX_CAP = 512.0
_PI_CONSISTENCY_TOL = 1e-6


class SolverError(RuntimeError):
    """Raised when a pointwise control solve or a PDE step fails to converge."""


def _fields_of(obj) -> Mapping[str, SolutionField]:
    return obj.fields if hasattr(obj, "fields") else obj


# ---------------------------------------------------------------------------
# Slice-level solve (vectorised over space nodes)
# ---------------------------------------------------------------------------


def solve_hhat_slice(y_nodes: np.ndarray, state: DefaultState, spec: ModelSpec,
                     f_slice: np.ndarray, df_slice: np.ndarray,
                     children: Mapping[int, np.ndarray],
                     h_init: np.ndarray | None = None,
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, float]:
    """Solve the feedback system at every node of one horizon slice.

    Returns ``(hhat, theta, pi, newton_iters, residual_max)`` with arrays of
    shape (n_y, n).  ``children[i]`` is the f-slice of the state where name i
    has additionally defaulted, required for every alive name with positive
    intensity.
    """
    n = spec.n
    q = spec.q
    beta = spec.beta
    rho = spec.factor.rho
    y_nodes = np.asarray(y_nodes, dtype=float)
    n_y = y_nodes.shape[0]
    alive = state.alive

    lam_full = spec.intensity(y_nodes, state)
    zmask = 1.0 - state.indicator()
    lam = lam_full * zmask

    grad_term = np.zeros((n_y, n))
    if rho != 0.0:
        s0 = spec.factor.vol_row(y_nodes)
        grad_term = rho * beta * (df_slice / f_slice)[:, None] * s0

    ratio = np.ones((n_y, n))
    for i in alive:
        if i in children:
            ratio[:, i] = (children[i] / f_slice) ** beta
        elif np.any(lam[:, i] > _LAMBDA_TOL):
            raise SolverError(f"missing child field for alive name {i} in state {state}")

    sig_diag = spec.market.sigma_diag_grid(y_nodes)
    if sig_diag is not None:
        return _solve_slice_diagonal(y_nodes, state, spec, sig_diag, lam, ratio, grad_term, h_init)
    return _solve_slice_general(y_nodes, state, spec, lam, ratio, grad_term, h_init)


def _solve_slice_diagonal(y_nodes, state, spec, sig_diag, lam, ratio, grad_term, h_init):
    """Decoupled per-name scalar roots: safeguarded Newton inside a sign-change bracket."""
    n = spec.n
    q = spec.q
    n_y = y_nodes.shape[0]
    alive_mask = (1.0 - state.indicator()) > 0
    xi = (spec.market.mu - spec.market.r) / sig_diag  # diagonal: componentwise

    hhat = np.zeros((n_y, n))
    pi = np.zeros((n_y, n))
    iters_used = 0
    resid_max = 0.0

    jumpy = alive_mask[None, :] & (lam > _LAMBDA_TOL)        # names solved through the jump FOC
    riskfree = alive_mask[None, :] & ~jumpy                   # defaultless names: diffusion matching only

    if np.any(riskfree):
        lin = ((1.0 - q) * xi + grad_term) / sig_diag
        pi[riskfree] = lin[riskfree]

    if np.any(jumpy):
        sd = sig_diag[jumpy]
        xiv = xi[jumpy]
        lamv = lam[jumpy]
        ratv = ratio[jumpy]
        gv = grad_term[jumpy]
        one_q = 1.0 - q

        def resid(h):
            return sd * (1.0 - (1.0 + h) ** (q - 1.0) * ratv) - one_q * (xiv - lamv * h / sd) - gv

        def dresid(h):
            return one_q * (sd * (1.0 + h) ** (q - 2.0) * ratv + lamv / sd)

        lo = np.full(sd.shape, -1.0 + H_FLOOR)
        hi = np.full(sd.shape, _H_MAX_START)
        r_hi = resid(hi)
        while np.any(r_hi <= 0) and hi.max() < _H_MAX_CAP:
            grow = r_hi <= 0
            hi = np.where(grow, np.minimum(hi * 2.0, _H_MAX_CAP), hi)
            r_hi = resid(hi)
        if np.any(r_hi <= 0):
            bad = int(np.argmax(r_hi <= 0))
            raise SolverError(
                f"jump-loading root not bracketed below h={_H_MAX_CAP} in state {state} "
                f"(residual {r_hi[bad]:.3e})")

        x = np.clip(h_init[jumpy] if h_init is not None else np.zeros(sd.shape), lo + 1e-12, hi - 1e-12)
        r = resid(x)
        lo = np.where(r < 0, x, lo)
        hi = np.where(r > 0, x, hi)
        converged = np.abs(r) < _NEWTON_TOL
        for iters_used in range(1, _MAX_ITER + 1):
            if converged.all():
                break
            step = r / dresid(x)
            x_new = x - step
            outside = (x_new <= lo) | (x_new >= hi)
            x_new = np.where(outside, 0.5 * (lo + hi), x_new)
            x = np.where(converged, x, x_new)
            r = np.where(converged, r, resid(x))
            lo = np.where(~converged & (r < 0), x, lo)
            hi = np.where(~converged & (r > 0), x, hi)
            converged |= (np.abs(r) < _NEWTON_TOL) | (hi - lo < 1e-15)
        resid_final = np.abs(resid(x))
        resid_max = float(resid_final.max()) if resid_final.size else 0.0
        if resid_max > _RESID_TOL:
            raise SolverError(
                f"jump-loading solve stalled in state {state}: residual {resid_max:.3e} "
                f"after {iters_used} iterations")
        hhat[jumpy] = x
        pi[jumpy] = 1.0 - (1.0 + x) ** (q - 1.0) * ratv

    theta = xi - lam * hhat / sig_diag
    return hhat, theta, pi, iters_used, resid_max


def _solve_slice_general(y_nodes, state, spec, lam, ratio, grad_term, h_init):
    """Per-node damped Newton on the coupled alive-column system (full sigma).

    Unknowns at a node: h_i for alive names with positive intensity, pi_i for
    alive defaultless names.  Equations: the alive columns of
    pi^T sigma = Lambda with pi_i = J_i(h_i) substituted for jump names.
    """
    n = spec.n
    q = spec.q
    n_y = y_nodes.shape[0]
    alive = list(state.alive)
    hhat = np.zeros((n_y, n))
    theta = np.zeros((n_y, n))
    pi = np.zeros((n_y, n))
    iters_max = 0
    resid_max = 0.0
    one_q = 1.0 - q
    warm = np.zeros(n)

    for k, yv in enumerate(y_nodes):
        s = spec.market.sigma_at(float(yv))
        s_inv = np.linalg.inv(s)
        xi = s_inv @ (spec.market.mu - spec.market.r)
        lam_k = lam[k]
        jumpy = [i for i in alive if lam_k[i] > _LAMBDA_TOL]
        free = [i for i in alive if i not in jumpy]
        n_j = len(jumpy)

        def assemble(u):
            h = np.zeros(n)
            piv = np.zeros(n)
            for m, i in enumerate(jumpy):
                h[i] = u[m]
                piv[i] = 1.0 - (1.0 + u[m]) ** (q - 1.0) * ratio[k, i]
            for m, i in enumerate(free):
                piv[i] = u[n_j + m]
            th = xi - s_inv @ (lam_k * h)
            res = (piv @ s) - (one_q * th + grad_term[k])
            return h, piv, th, res[alive]

        def jacobian(u):
            J = np.zeros((len(alive), len(alive)))
            for col, i in enumerate(jumpy):
                dpi = one_q * (1.0 + u[col]) ** (q - 2.0) * ratio[k, i]
                for row, j in enumerate(alive):
                    # pi_i(h_i) enters column j through sigma[i, j]; theta through s^{-1}
                    J[row, col] = dpi * s[i, j] + one_q * lam_k[i] * s_inv[j, i]
            for col, i in enumerate(free):
                for row, j in enumerate(alive):
                    J[row, n_j + col] = s[i, j]
            return J

        u = np.zeros(len(alive))
        if h_init is not None:
            for m, i in enumerate(jumpy):
                u[m] = h_init[k, i]
        elif k > 0:
            for m, i in enumerate(jumpy):
                u[m] = warm[i]
        _, _, _, res = assemble(u)
        it = 0
        while np.max(np.abs(res)) > _NEWTON_TOL and it < _MAX_ITER:
            J = jacobian(u)
            try:
                step = np.linalg.solve(J, res)
            except np.linalg.LinAlgError as exc:
                raise SolverError(f"singular Jacobian at node {k} in state {state}") from exc
            scale = 1.0
            improved = False
            for _ in range(60):
                u_try = u - scale * step
                if all(1.0 + u_try[m] > H_FLOOR for m in range(n_j)):
                    _, _, _, res_try = assemble(u_try)
                    if np.max(np.abs(res_try)) < np.max(np.abs(res)) or scale < 1e-8:
                        u, res = u_try, res_try
                        improved = True
                        break
                scale *= 0.5
            if not improved:
                break
            it += 1
        h, piv, th, res = assemble(u)
        node_res = float(np.max(np.abs(res))) if alive else 0.0
        if node_res > _RESID_TOL:
            raise SolverError(
                f"coupled control solve failed at node {k} (y={yv:.4g}) in state {state}: "
                f"residual {node_res:.3e}")
        hhat[k] = h
        pi[k] = piv
        theta[k] = th
        warm = h
        iters_max = max(iters_max, it)
        resid_max = max(resid_max, node_res)
    return hhat, theta, pi, iters_max, resid_max


def ahat_slice(y_nodes: np.ndarray, spec: ModelSpec, f_slice: np.ndarray,
               df_slice: np.ndarray) -> np.ndarray:
    """Orthogonal diffusion loading ahat = -sqrt(1-rho^2)/(1-q) * beta sigma0^T D_y f / f."""
    rho = spec.factor.rho
    coef = -np.sqrt(1.0 - rho * rho) / (1.0 - spec.q) * spec.beta
    s0 = spec.factor.vol_row(np.asarray(y_nodes, dtype=float))
    return coef * (df_slice / f_slice)[:, None] * s0


# ---------------------------------------------------------------------------
# Full-grid policy extraction
# ---------------------------------------------------------------------------


def build_policy(fields: Mapping[str, SolutionField], state: DefaultState,
                 spec: ModelSpec) -> PolicyField:
    """Pointwise controls on every grid node of one state, by time continuation."""
    fld = fields[state.bitstring]
    grid = fld.grid
    y_nodes = grid.y_nodes()
    n_t = grid.n_t
    n = spec.n
    q = spec.q

    hhat = np.zeros((n_t + 1, grid.n_y, n))
    theta = np.zeros_like(hhat)
    ahat = np.zeros_like(hhat)
    pi = np.zeros_like(hhat)
    c_mult = np.zeros((n_t + 1, grid.n_y))
    resid = 0.0
    iters = 0

    child_fields = {i: fields[state.flip(i).bitstring] for i in state.alive}
    K2_pow = spec.pref.K2 ** (1.0 - q)
    h_prev = None
    hedge_gap = 0.0
    dead = list(state.defaulted)
    sig_diag = spec.market.sigma_diag_grid(y_nodes)
    for k in range(n_t + 1):
        f_slice = fld.f[k]
        df_slice = fld.df[k]
        children = {i: cf.f[k] for i, cf in child_fields.items()}
        h_k, th_k, pi_k, it_k, r_k = solve_hhat_slice(
            y_nodes, state, spec, f_slice, df_slice, children, h_init=h_prev)
        hhat[k], theta[k], pi[k] = h_k, th_k, pi_k
        ahat[k] = ahat_slice(y_nodes, spec, f_slice, df_slice)
        c_mult[k] = K2_pow / f_slice**spec.beta
        h_prev = h_k
        resid = max(resid, r_k)
        iters = max(iters, it_k)
        if dead:
            # unmatched diffusion loading on dead names' drivers (replication
            # hypothesis diagnostic; the alive columns vanish by construction)
            Lam = (1.0 - q) * th_k
            if spec.factor.rho != 0.0:
                s0 = spec.factor.vol_row(y_nodes)
                Lam = Lam + spec.factor.rho * spec.beta * (df_slice / f_slice)[:, None] * s0
            if sig_diag is not None:
                pisig = pi_k * sig_diag
            else:
                pisig = np.stack([pi_k[j] @ spec.market.sigma_at(float(y_nodes[j]))
                                  for j in range(len(y_nodes))])
            hedge_gap = max(hedge_gap, float(np.max(np.abs((pisig - Lam)[:, dead]))))
    return PolicyField(state=state, grid=grid, t_nodes=fld.t_nodes, hhat=hhat,
                       theta=theta, ahat=ahat, pi=pi, c_mult=c_mult,
                       residual_max=resid, newton_iters_max=iters, hedge_gap=hedge_gap)


# ---------------------------------------------------------------------------
# Point queries (trading-clock time t; fields are read at horizon T - t)
# ---------------------------------------------------------------------------


def _point_inputs(t: float, y: float, state: DefaultState, fields, spec: ModelSpec):
    fields = _fields_of(fields)
    fld = fields[state.bitstring]
    u = spec.pref.T - t
    if u < -1e-12:
        raise ValueError(f"clock time {t} exceeds the horizon {spec.pref.T}")
    u = max(u, 0.0)
    f_val = float(fld.f_at(u, y))
    df_val = float(fld.df_at(u, y))
    children = {}
    for i in state.alive:
        key = state.flip(i).bitstring
        if key not in fields:
            raise SolverError(f"missing child field {key} for state {state}")
        children[i] = np.array([float(fields[key].f_at(u, y))])
    return fld, u, f_val, df_val, children


def solve_hhat(t: float, y: float, state: DefaultState, fields, spec: ModelSpec) -> np.ndarray:
    """Jump loadings hhat(t, y, z) at one point (zeros for defaulted names)."""
    _, _, f_val, df_val, children = _point_inputs(t, y, state, fields, spec)
    h, _, _, _, _ = solve_hhat_slice(np.array([y]), state, spec,
                                     np.array([f_val]), np.array([df_val]), children)
    return h[0]


def lambda_and_J(t: float, y: float, state: DefaultState, hhat: np.ndarray,
                 fields, spec: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Diffusion row Lambda and jump vector J of the optimal wealth dynamics."""
    from .dual import theta_from_h

    fields = _fields_of(fields)
    _, u, f_val, df_val, children = _point_inputs(t, y, state, fields, spec)
    q = spec.q
    beta = spec.beta
    g_val = f_val**beta
    theta = theta_from_h(hhat, y, state, spec)
    Lam = (1.0 - q) * theta
    if spec.factor.rho != 0.0:
        dg = beta * f_val ** (beta - 1.0) * df_val
        Lam = Lam + spec.factor.rho * (dg / g_val) * spec.factor.vol_row(y)
    J = np.zeros(spec.n)
    for i in state.alive:
        g_child = float(children[i][0]) ** beta
        J[i] = 1.0 - (1.0 + hhat[i]) ** (q - 1.0) * g_child / g_val
    return Lam, J


def pi_hat(t: float, y: float, state: DefaultState, hhat: np.ndarray,
           fields, spec: ModelSpec) -> np.ndarray:
    """Optimal wealth fractions; raises if inconsistent with the diffusion matching."""
    fields = _fields_of(fields)
    _, u, f_val, df_val, children = _point_inputs(t, y, state, fields, spec)
    q = spec.q
    beta = spec.beta
    lam = spec.alive_intensity(y, state)
    pi = np.zeros(spec.n)
    s = spec.market.sigma_at(y)
    from .dual import theta_from_h

    theta = theta_from_h(hhat, y, state, spec)
    Lam = (1.0 - q) * theta
    if spec.factor.rho != 0.0:
        Lam = Lam + spec.factor.rho * beta * (df_val / f_val) * spec.factor.vol_row(y)
    Lam_masked = Lam * (1.0 - state.indicator())
    for i in state.alive:
        if lam[i] > _LAMBDA_TOL:
            ratio = (float(children[i][0]) / f_val) ** beta
            pi[i] = 1.0 - (1.0 + hhat[i]) ** (q - 1.0) * ratio
    free = [i for i in state.alive if lam[i] <= _LAMBDA_TOL]
    if free:
        # diffusion matching determines the defaultless weights
        cols = [j for j in state.alive]
        rhs = Lam_masked[cols] - np.array([sum(pi[i] * s[i, j] for i in state.alive if i not in free)
                                           for j in cols])
        sub = np.array([[s[i, j] for j in cols] for i in free])
        sol, *_ = np.linalg.lstsq(sub.T, rhs, rcond=None)
        for m, i in enumerate(free):
            pi[i] = sol[m]
    residual = float(np.max(np.abs(pi @ s - Lam_masked))) if spec.n else 0.0
    if residual > _PI_CONSISTENCY_TOL:
        raise SolverError(
            f"feedback weights inconsistent with diffusion matching: residual {residual:.3e} "
            f"(jump loadings or gradient out of sync)")
    return pi


def consumption_rate(t: float, y: float, state: DefaultState, x_wealth: float,
                     fields, spec: ModelSpec) -> float:
    """Optimal consumption rate c = K2^{1-q} x / g(T-t, y, z)."""
    if x_wealth <= 0:
        raise ValueError("wealth must be positive")
    fields = _fields_of(fields)
    fld = fields[state.bitstring]
    u = max(spec.pref.T - t, 0.0)
    g_val = float(fld.f_at(u, y)) ** spec.beta
    return spec.pref.K2 ** (1.0 - spec.q) * x_wealth / g_val


def value_function(x: float, y: float, state: DefaultState, fields, spec: ModelSpec) -> float:
    """Primal value V(x, y, z) = (x^p / p) g(T, y, z)^{1-p}."""
    if x <= 0:
        raise ValueError("wealth must be positive")
    fields = _fields_of(fields)
    fld = fields[state.bitstring]
    g_val = float(fld.f_at(spec.pref.T, y)) ** spec.beta
    p = spec.pref.p
    return (x**p / p) * g_val ** (1.0 - p)
