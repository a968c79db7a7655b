"""Joint sensing/communication configuration with digital SI cancellation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSet, dl_channel
from .codebook import AnalogBfMatrix, LorentzianCodebook, make_codebook, project_to_codebook
from .comm_opt import BdInfeasibleError, CommDesign, block_diagonalization, design_comm, sum_rate
from .crb_opt import SensingDesign, design_sensing, k_matrices
from .estimation import (EstimateSet, SearchGrid, association, estimate_targets,
                         probe_context)
from .fim import channel_partials, fim_fast, peb
from .scenario import Scenario, SystemConfig
from .signals import BfConfiguration, effective_si, scale_to_power

ISAC = "isac"
SENSING_ONLY = "sensing-only"
COMM_ONLY = "comm-only"
MODES = (ISAC, SENSING_ONLY, COMM_ONLY)


@dataclass
class GridPoint:
    xi: float
    rho: float
    sum_rate: float
    peb: float


@dataclass
class IsacSolution:
    bf: BfConfiguration
    sum_rate: float
    peb: float
    residual_si: np.ndarray
    feasible: bool
    grid_trace: list = field(default_factory=list)
    gamma_s: float = math.inf
    zeta_hat: np.ndarray | None = None
    active_columns: int = 0
    mode: str = ISAC
    peb_feasible: bool = True
    sensing: SensingDesign | None = None
    comm: CommDesign | None = None
    diagnostics: list = field(default_factory=list)


def combine_designs(sensing: SensingDesign, comm: CommDesign, xi: float, rho: float,
                    codebook: LorentzianCodebook, channels: ChannelSet,
                    config: SystemConfig) -> tuple[AnalogBfMatrix, np.ndarray]:
    """Convex blend of the two designs, projected back onto the codebook."""
    if not (0.0 <= xi <= 1.0 and 0.0 <= rho <= 1.0):
        raise ValueError("combiner weights must lie in [0, 1]")
    w = xi * comm.w_tx_c.weights + (1.0 - xi) * sensing.w_tx_s.weights
    w_tx = AnalogBfMatrix(comm.w_tx_c.side, project_to_codebook(w, codebook))
    v = rho * comm.v_c + (1.0 - rho) * sensing.v_s
    return w_tx, scale_to_power(w_tx, v, channels, config.p_max)


def si_canceller(bf: BfConfiguration, channels: ChannelSet,
                 h_si_hat: np.ndarray | None = None) -> np.ndarray:
    """``D = -W_RX^H P_RX^H H_SI P_TX W_TX`` from the node's SI knowledge."""
    return -effective_si(bf, channels, h_si_hat)


def residual_si(bf: BfConfiguration, channels: ChannelSet) -> np.ndarray:
    """Row-wise squared norms of ``(W^H P^H H_SI P W + D) V``."""
    m = (effective_si(bf, channels) + bf.d) @ bf.v
    return np.sum(np.abs(m) ** 2, axis=1)


def gamma_si_feasibility(bf: BfConfiguration, channels: ChannelSet) -> float:
    """Smallest ``gamma_SI`` that every residual row is guaranteed to meet.

    Uses ``max_i |[M V]_i|^2 <= s_max(M)^2 |V|_2^2`` for the residual SI
    matrix ``M``.
    """
    m = effective_si(bf, channels) + bf.d
    if not np.any(m):
        return 0.0
    s = np.linalg.svd(m, compute_uv=False)[0]
    vn = np.linalg.norm(bf.v, 2) if bf.v.size else 0.0
    return float((s * vn) ** 2)


def si_basis(d: np.ndarray) -> np.ndarray:
    """Right singular vectors of ``-D`` ordered by ascending singular value.

    Truncating trailing columns therefore removes the strongest SI
    directions first.
    """
    _, _, vh = np.linalg.svd(-d)
    return vh.conj().T[:, ::-1]


def design_peb(w_tx: AnalogBfMatrix, w_rx: AnalogBfMatrix, v: np.ndarray, zeta_users,
               channels: ChannelSet, config: SystemConfig) -> float:
    bf = BfConfiguration(w_tx, w_rx, v)
    if not np.any(v):
        return math.inf
    return peb(fim_fast(bf, zeta_users, channels, config)).peb_full


def _grid(step: float) -> np.ndarray:
    n = int(round(1.0 / step))
    pts = np.linspace(0.0, 1.0, n + 1)
    if not math.isclose(pts[1] - pts[0], step, rel_tol=1e-9):
        pts = np.unique(np.append(np.arange(0.0, 1.0, step), 1.0))
    return pts


def _mode_points(mode: str, step: float) -> list[tuple[float, float]]:
    if mode == COMM_ONLY:
        return [(1.0, 1.0)]
    if mode == SENSING_ONLY:
        return [(0.0, 0.0)]
    if mode != ISAC:
        raise ValueError(f"unknown mode {mode!r}")
    g = _grid(step)
    return [(float(x), float(r)) for x in g for r in g]


def user_estimates(est: EstimateSet, scenario: Scenario) -> np.ndarray:
    """Estimated positions matched to the DL users.

    The node learns which reflections are its UEs out of band; here the
    estimate associated with each true user plays that role.
    """
    truth = scenario.zeta(users_only=False)
    perm, _ = association(est.estimates, truth)
    return est.estimates[perm[list(scenario.user_indices)]]


def default_search(config: SystemConfig, r_range: tuple[float, float]) -> SearchGrid:
    return SearchGrid(r_min=r_range[0], r_max=r_range[1])


def prepare_designs(zeta_hat, channels: ChannelSet, config: SystemConfig,
                    codebook: LorentzianCodebook) -> tuple[SensingDesign, CommDesign]:
    """Sensing and communication designs for the estimated user positions."""
    zeta_hat = np.atleast_2d(np.asarray(zeta_hat, dtype=float))
    h_hat = np.atleast_2d(dl_channel(zeta_hat, config))
    kmat = k_matrices(channel_partials(zeta_hat, config), channels.p_tx, channels.p_rx)
    sensing = design_sensing(kmat, codebook, channels.p_tx, channels.p_rx, config, len(zeta_hat))
    comm = design_comm(h_hat, channels.p_tx, codebook, config)
    return sensing, comm


def algorithm1(scenario: Scenario, channels: ChannelSet, config: SystemConfig,
               zeta_hat: np.ndarray | None = None, rng: np.random.Generator | None = None,
               mode: str = ISAC, codebook: LorentzianCodebook | None = None,
               h_si_hat: np.ndarray | None = None,
               search: SearchGrid | None = None,
               designs: tuple[SensingDesign, CommDesign] | None = None) -> IsacSolution:
    """Estimate, design, blend, cancel SI and truncate until the constraints hold.

    ``zeta_hat`` holds the estimated user positions (U x 3). When omitted
    the targets are localized from probing blocks drawn with ``rng``.
    ``designs`` may carry the sensing and communication designs for
    ``zeta_hat`` from :func:`prepare_designs` to skip recomputing them.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    cb = make_codebook(config.codebook_bits) if codebook is None else codebook
    u = scenario.u
    if u > config.n_rf:
        raise ValueError(f"U={u} users exceed N_RF={config.n_rf} RF chains")
    h_si_hat = channels.h_si if h_si_hat is None else h_si_hat

    if zeta_hat is None:
        rng = np.random.default_rng(config.rng_seed) if rng is None else rng
        if search is None:
            raise ValueError("a search grid is needed to localize the targets")
        ctx = probe_context(channels, config, cb, rng, h_si_hat=h_si_hat)
        est = estimate_targets(None, ctx, search, scenario.k)
        zeta_hat = user_estimates(est, scenario)
    zeta_hat = np.atleast_2d(np.asarray(zeta_hat, dtype=float))

    h_hat = np.atleast_2d(dl_channel(zeta_hat, config))
    if designs is None:
        designs = prepare_designs(zeta_hat, channels, config, cb)
    sensing, comm = designs
    w_rx = sensing.w_rx

    trace: list[GridPoint] = []
    cache = {}
    for xi, rho in _mode_points(mode, config.grid_resolution_xi_rho):
        w_tx, v = combine_designs(sensing, comm, xi, rho, cb, channels, config)
        p = design_peb(w_tx, w_rx, v, zeta_hat, channels, config)
        rate = sum_rate(w_tx, v, h_hat, channels.p_tx, config, interference=True)
        trace.append(GridPoint(xi, rho, rate, p))
        cache[(xi, rho)] = (w_tx, v)

    gamma_s = _gamma_s(mode, trace, config)
    best = select_grid_point(trace, gamma_s)
    w_tx, v_comb = cache[(best.xi, best.rho)]

    base = BfConfiguration(w_tx, w_rx, v_comb, xi=best.xi, rho=best.rho)
    d = si_canceller(base, channels, h_si_hat)
    f = si_basis(d)
    tried, diagnostics = [], []
    for a in range(config.n_rf, u - 1, -1):
        fa = f.copy()
        fa[:, a:] = 0.0
        if a == config.n_rf:
            v = v_comb
        else:
            # streams restricted to the surviving basis, re-diagonalized
            try:
                v = block_diagonalization(w_tx, h_hat, channels.p_tx, config, basis=f[:, :a])
            except BdInfeasibleError as exc:
                diagnostics.append(f"a={a}: {exc}")
                continue
        bf = BfConfiguration(w_tx, w_rx, v, d=d, f_basis=fa, xi=best.xi, rho=best.rho)
        res = residual_si(bf, channels)
        p = design_peb(w_tx, w_rx, v, zeta_hat, channels, config)
        si_ok = bool(np.all(res <= config.gamma_si))
        peb_ok = p <= gamma_s
        tried.append((bf, res, p, a, si_ok, peb_ok))
        if si_ok and peb_ok:
            break
    bf, res, p, a, si_ok, peb_ok = next(
        (t for t in tried if t[4] and t[5]),
        min(tried, key=lambda t: (float(np.max(t[1])), t[2])))
    rate = sum_rate(w_tx, bf.v, h_hat, channels.p_tx, config, interference=True)
    return IsacSolution(
        bf=bf, sum_rate=rate, peb=p, residual_si=res, feasible=si_ok and peb_ok,
        grid_trace=trace, gamma_s=gamma_s, zeta_hat=zeta_hat, active_columns=a, mode=mode,
        peb_feasible=peb_ok, sensing=sensing, comm=comm, diagnostics=diagnostics)


def _gamma_s(mode: str, trace: list[GridPoint], config: SystemConfig) -> float:
    """PEB threshold of the hybrid mode.

    A ``gamma_s_fraction`` interpolates geometrically between the smallest
    PEB on the grid and the PEB of the communication endpoint; without it
    the configured ``gamma_s`` is used.
    """
    if mode != ISAC:
        return math.inf
    frac = config.gamma_s_fraction
    if frac is None:
        return config.gamma_s
    p_s = min(g.peb for g in trace)
    p_c = next(g.peb for g in trace if g.xi == 1.0 and g.rho == 1.0)
    if not (math.isfinite(p_s) and math.isfinite(p_c)):
        return config.gamma_s
    return float(p_s ** (1 - frac) * p_c ** frac)


def select_grid_point(trace: list[GridPoint], gamma_s: float) -> GridPoint:
    """Highest rate among PEB-feasible points, ties toward smaller PEB.

    With no feasible point the minimum-PEB point is returned.
    """
    feasible = [g for g in trace if g.peb <= gamma_s]
    if feasible:
        return max(feasible, key=lambda g: (g.sum_rate, -g.peb))
    return min(trace, key=lambda g: (g.peb, -g.sum_rate))


def check_solution(sol: IsacSolution, channels: ChannelSet, config: SystemConfig) -> bool:
    """Independent re-check of the feasibility flag."""
    res = residual_si(sol.bf, channels)
    p = design_peb(sol.bf.w_tx, sol.bf.w_rx, sol.bf.v, sol.zeta_hat, channels, config)
    ok = bool(np.all(res <= config.gamma_si)) and p <= sol.gamma_s * (1 + 1e-12)
    return ok == sol.feasible
