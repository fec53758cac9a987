"""Grid containers shared by the PDE solver, the strategy extractor and the simulator.

Time index convention: ``t`` is remaining investment horizon.  Slice ``k = 0``
holds the initial condition (zero horizon, value pinned by the terminal
utility weight) and slice ``k = n_t`` the full horizon ``T``.  A trading clock
time ``tau`` therefore reads the fields at horizon ``T - tau``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import DefaultState

__all__ = ["GridSpec", "SolutionField", "PolicyField", "TruncationBounds", "SolveResult"]


@dataclass(frozen=True)
class GridSpec:
    """Uniform time-space grid for the 1-D factor solver."""

    y_lo: float
    y_hi: float
    n_y: int = 401
    n_t: int = 400
    clamp_enabled: bool = True

    def __post_init__(self):
        if self.n_y < 3 or self.n_y % 2 == 0:
            raise ValueError("n_y must be odd and >= 3 so a center node exists")
        if self.n_t < 1:
            raise ValueError("n_t must be >= 1")
        if not self.y_lo < self.y_hi:
            raise ValueError("empty spatial domain")

    def y_nodes(self) -> np.ndarray:
        return np.linspace(self.y_lo, self.y_hi, self.n_y)

    def t_nodes(self, T: float) -> np.ndarray:
        return np.linspace(0.0, T, self.n_t + 1)

    @property
    def dy(self) -> float:
        return (self.y_hi - self.y_lo) / (self.n_y - 1)


def _bilinear(values: np.ndarray, t_nodes: np.ndarray, y_nodes: np.ndarray, t, y) -> np.ndarray:
    """Bilinear interpolation on a uniform (t, y) grid; extra trailing axes pass through."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    dt = t_nodes[1] - t_nodes[0] if len(t_nodes) > 1 else 1.0
    dy = y_nodes[1] - y_nodes[0] if len(y_nodes) > 1 else 1.0
    ft = np.clip((t - t_nodes[0]) / dt, 0.0, len(t_nodes) - 1.0)
    fy = np.clip((y - y_nodes[0]) / dy, 0.0, len(y_nodes) - 1.0)
    k0 = np.minimum(ft.astype(int), len(t_nodes) - 2) if len(t_nodes) > 1 else np.zeros_like(ft, dtype=int)
    j0 = np.minimum(fy.astype(int), len(y_nodes) - 2) if len(y_nodes) > 1 else np.zeros_like(fy, dtype=int)
    wt = ft - k0
    wy = fy - j0
    if values.ndim > 2:
        wt = wt[..., None]
        wy = wy[..., None]
    v00 = values[k0, j0]
    v01 = values[k0, np.minimum(j0 + 1, len(y_nodes) - 1)]
    v10 = values[np.minimum(k0 + 1, len(t_nodes) - 1), j0]
    v11 = values[np.minimum(k0 + 1, len(t_nodes) - 1), np.minimum(j0 + 1, len(y_nodes) - 1)]
    return ((1 - wt) * (1 - wy) * v00 + (1 - wt) * wy * v01
            + wt * (1 - wy) * v10 + wt * wy * v11)


@dataclass
class SolutionField:
    """Transformed value function f on the grid for one default state.

    ``f[k, j] = f(t_k, y_j)`` with t the remaining horizon; ``df`` holds the
    central-difference spatial gradient (second-order one-sided at the two
    boundary nodes).  The dual value function is ``g = f**beta``.
    """

    state: DefaultState
    grid: GridSpec
    t_nodes: np.ndarray
    f: np.ndarray
    df: np.ndarray
    beta: float

    @property
    def g(self) -> np.ndarray:
        return self.f**self.beta

    def f_at(self, t, y):
        return _bilinear(self.f, self.t_nodes, self.grid.y_nodes(), t, y)

    def g_at(self, t, y):
        return self.f_at(t, y) ** self.beta

    def df_at(self, t, y):
        return _bilinear(self.df, self.t_nodes, self.grid.y_nodes(), t, y)


def spatial_gradient(f_slice: np.ndarray, dy: float) -> np.ndarray:
    """Second-order gradient of one spatial slice: central inside, one-sided at the edges."""
    df = np.empty_like(f_slice)
    df[1:-1] = (f_slice[2:] - f_slice[:-2]) / (2.0 * dy)
    df[0] = (-3.0 * f_slice[0] + 4.0 * f_slice[1] - f_slice[2]) / (2.0 * dy)
    df[-1] = (3.0 * f_slice[-1] - 4.0 * f_slice[-2] + f_slice[-3]) / (2.0 * dy)
    return df


@dataclass
class PolicyField:
    """Dual and primal feedback controls on the grid for one default state.

    Arrays are indexed ``[k, j, i]`` (horizon slice, space node, name) except
    the scalar consumption multiplier ``c_mult[k, j] = K2^{1-q} / g(t_k, y_j)``
    which converts wealth into the optimal consumption rate.

    ``hedge_gap`` is the worst unmatched diffusion loading on defaulted
    names' drivers: the dual-optimal wealth may load on those Brownians while
    no admissible portfolio can (dead stocks are untradable).  A material gap
    means the feedback strategy attains strictly less than the dual value,
    which then only bounds the primal from above; it vanishes when defaultable
    names carry no excess return and the factor is uncorrelated with prices.
    """

    state: DefaultState
    grid: GridSpec
    t_nodes: np.ndarray
    hhat: np.ndarray
    theta: np.ndarray
    ahat: np.ndarray
    pi: np.ndarray
    c_mult: np.ndarray
    residual_max: float = 0.0
    newton_iters_max: int = 0
    hedge_gap: float = 0.0

    def channels_at(self, t, y) -> dict[str, np.ndarray]:
        tn, yn = self.t_nodes, self.grid.y_nodes()
        return {
            "hhat": _bilinear(self.hhat, tn, yn, t, y),
            "theta": _bilinear(self.theta, tn, yn, t, y),
            "ahat": _bilinear(self.ahat, tn, yn, t, y),
            "pi": _bilinear(self.pi, tn, yn, t, y),
            "c_mult": _bilinear(self.c_mult, tn, yn, t, y),
        }


@dataclass
class TruncationBounds:
    """A-priori solution bounds used to clamp the nonlinear source.

    ``k_under <= f(t, y) <= k_bar(t)`` with ``k_under = f(0) exp(T (m_lo ^ 0)
    / beta)`` and ``k_bar(t) = f(0) exp((m_hi / beta + theta_rate) t)``.
    ``m_lo``/``m_hi`` envelope the reaction coefficient phi and
    ``theta_rate`` is the growth rate of the clamped contagion source at the
    lower bound.  ``m_lo_norms``/``m_hi_norms`` carry the coarser
    sup-norm-family envelope of phi (reported, always containing
    [m_lo, m_hi]).
    """

    state: DefaultState
    k_under: float
    m_lo: float
    m_hi: float
    theta_rate: float
    f0: float
    beta: float
    T: float
    m_lo_norms: float = float("-inf")
    m_hi_norms: float = float("inf")

    def k_bar(self, t):
        return self.f0 * np.exp((self.m_hi / self.beta + self.theta_rate) * np.asarray(t, dtype=float))

    @property
    def k_bar_final(self) -> float:
        return float(self.k_bar(self.T))

    def growth_factor(self, t):
        """exp(m_hi t / beta); identically 1 when the usable reaction bound m_hi is 0."""
        return np.exp(self.m_hi / self.beta * np.asarray(t, dtype=float))


@dataclass
class SolveResult:
    """Everything produced by one recursive solve, keyed by state bitstring."""

    fields: dict[str, SolutionField]
    policies: dict[str, PolicyField]
    bounds: dict[str, TruncationBounds]
    report: dict[str, dict] = field(default_factory=dict)

    def field(self, state: DefaultState) -> SolutionField:
        return self.fields[state.bitstring]

    def policy(self, state: DefaultState) -> PolicyField:
        return self.policies[state.bitstring]

    def bound(self, state: DefaultState) -> TruncationBounds:
        return self.bounds[state.bitstring]
