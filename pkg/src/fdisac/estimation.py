"""Maximum-likelihood localization of the reflecting targets.

The node transmits a few known probing blocks, each with its own random
codebook configuration, and correlates every RX output with the known
symbols. After noise whitening the stacked correlations form

    z = sum_k beta_k g_k(r_k, theta_k, phi_k) + CN(0, I)

with unknown complex gains ``beta_k``. Concentrating the gains out of the
likelihood leaves the projection objective ``Tr{Q_G R}`` with ``R = z z^H``,
which is maximized target by target through cyclic 1-D searches.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from .channel import ChannelSet, response_derivatives, response_vectors
from .codebook import LorentzianCodebook, random_codebook_matrix
from .fim import cartesian_bound, noise_covariance_diag, nuisance_fim
from .scenario import (RX, TX, Scenario, SystemConfig, fraunhofer_distance,
                       spherical_to_cartesian)
from .signals import (BfConfiguration, effective_si, rx_front, symbol_block,
                      synthesize_received, tx_front)


_UNIT_CACHE: dict = {}


@dataclass(frozen=True)
class SampleCovariance:
    matrix: np.ndarray
    t_slots: int


def sample_covariance(y: np.ndarray) -> SampleCovariance:
    """``(1/T) Y Y^H``, Hermitian-symmetrized."""
    y = np.atleast_2d(np.asarray(y, dtype=complex))
    t = y.shape[1]
    if t < 1:
        raise ValueError("need at least one snapshot")
    r = y @ y.conj().T / t
    return SampleCovariance(0.5 * (r + r.conj().T), t)


def reconstruct_virtual_channel(zeta, bf: BfConfiguration, channels: ChannelSet,
                                config: SystemConfig) -> np.ndarray:
    """``W_RX^H P_RX^H H_R(zeta) P_TX W_TX V`` with unit reflection gains."""
    pts = np.atleast_2d(np.asarray(zeta, dtype=float))
    a_rx = response_vectors(pts, config, RX)
    a_tx = response_vectors(pts, config, TX)
    h = a_rx.T @ a_tx.conj()
    return rx_front(bf.w_rx, channels) @ h @ tx_front(bf.w_tx, channels) @ bf.v


@dataclass(frozen=True)
class ObjectiveValue:
    value: float
    regularized: bool = False

    def __float__(self) -> float:
        return self.value


def projection_objective(h: np.ndarray, r: np.ndarray, ridge: float = 1e-10) -> ObjectiveValue:
    """``Tr{H (H^H H)^{-1} H^H R}``; rank-deficient Grams get a relative ridge."""
    h = np.atleast_2d(h)
    gram = h.conj().T @ h
    regularized = False
    tr = np.trace(gram).real
    if tr <= 0:
        return ObjectiveValue(0.0, True)
    if np.linalg.matrix_rank(gram, tol=1e-12 * tr) < gram.shape[0]:
        gram = gram + ridge * tr * np.eye(gram.shape[0])
        regularized = True
    val = np.trace(np.linalg.solve(gram, h.conj().T @ r @ h)).real
    return ObjectiveValue(float(val), regularized)


def projector(h: np.ndarray) -> np.ndarray:
    h = np.atleast_2d(h)
    return h @ np.linalg.pinv(h)


@dataclass(frozen=True)
class ProbeLook:
    """One known probing block: combiner, precoded transmitter and noise level."""

    front: np.ndarray    # W_RX^H P_RX^H, (N_RF, N)
    back: np.ndarray     # P_TX W_TX V, (N, X)
    rn_diag: np.ndarray  # noise covariance diagonal, (N_RF,)
    t_slots: int


@dataclass(frozen=True)
class SearchGrid:
    r_min: float
    r_max: float
    n_r: int = 60
    n_theta: int = 60
    n_phi: int = 180
    theta_range: tuple[float, float] = (0.0, math.pi)
    phi_range: tuple[float, float] = (0.0, math.pi)
    sweeps: int = 3
    refine: bool = False
    polish: bool = True
    coarse_shape: tuple[int, int, int] = (16, 20, 60)

    def __post_init__(self) -> None:
        if min(self.n_r, self.n_theta, self.n_phi) < 2:
            raise ValueError("every search axis needs at least two points")
        if not 0 < self.r_min < self.r_max:
            raise ValueError("range search interval must satisfy 0 < r_min < r_max")

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (np.linspace(self.r_min, self.r_max, self.n_r),
                np.linspace(*self.theta_range, self.n_theta),
                np.linspace(*self.phi_range, self.n_phi))

    def bounds(self) -> np.ndarray:
        return np.array([[self.r_min, self.r_max], list(self.theta_range), list(self.phi_range)])


@dataclass
class EstimationContext:
    """Probing looks and the whitened correlation statistic they produced."""

    config: SystemConfig
    looks: list
    z: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def design_key(self) -> bytes:
        """Digest of the probing design with the transmit power divided out."""
        if "digest" not in self._cache:
            front, back, _ = self._stacked()
            unit = back / np.sqrt(self.config.p_max)
            h = hashlib.sha1(np.ascontiguousarray(front).tobytes())
            h.update(np.round(unit, 12).tobytes())
            h.update(repr(self.config).encode())
            self._cache["digest"] = h.digest()
        return self._cache["digest"]

    def unit_signatures(self, key, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Power-normalized signatures of ``points`` and their squared norms.

        Memoized across contexts that share a probing design, since the
        transmit power only scales every signature by the same factor.
        """
        full = (self.design_key(), key)
        if full not in _UNIT_CACHE:
            chunks = np.array_split(points, max(1, len(points) // 4096))
            sig = np.concatenate([self.signatures(c) for c in chunks])
            sig /= np.sqrt(self.config.p_max)
            norms = np.einsum("gi,gi->g", sig.conj(), sig).real
            if len(_UNIT_CACHE) >= 4:
                _UNIT_CACHE.pop(next(iter(_UNIT_CACHE)))
            _UNIT_CACHE[full] = (sig, norms)
        return _UNIT_CACHE[full]

    def _stacked(self):
        if "stack" not in self._cache:
            front = np.concatenate([lk.front / np.sqrt(lk.rn_diag)[:, None] * np.sqrt(lk.t_slots)
                                    for lk in self.looks])
            back = np.concatenate([lk.back for lk in self.looks], axis=1)
            self._cache["stack"] = (front, back, len(self.looks))
        return self._cache["stack"]

    def signatures(self, points) -> np.ndarray:
        """Noise-free statistic per unit-gain target, shape (G, L)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        front, back, m = self._stacked()
        b = (response_vectors(pts, self.config, RX) @ front.T).reshape(len(pts), m, -1)
        c = (response_vectors(pts, self.config, TX) @ back.conj()).conj().reshape(len(pts), m, -1)
        return (b[..., :, None] * c[..., None, :]).reshape(len(pts), -1)

    def signature_derivatives(self, points) -> tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        g = len(pts)
        front, back, m = self._stacked()
        a_rx, da_rx = response_derivatives(pts, self.config, RX)
        a_tx, da_tx = response_derivatives(pts, self.config, TX)
        b = (a_rx @ front.T).reshape(g, m, -1)
        db = (da_rx @ front.T).reshape(g, 3, m, -1)
        c = (a_tx.conj() @ back).reshape(g, m, -1)
        dc = (da_tx.conj() @ back).reshape(g, 3, m, -1)
        sig = (b[..., :, None] * c[..., None, :]).reshape(g, -1)
        d = (db[..., :, None] * c[:, None, :, None, :]
             + b[:, None, :, :, None] * dc[..., None, :])
        return sig, d.reshape(g, 3, -1)

    def covariance(self) -> SampleCovariance:
        return SampleCovariance(np.outer(self.z, self.z.conj()), 1)


def mle_objective(zeta, r_sample: SampleCovariance, context: EstimationContext) -> ObjectiveValue:
    """Concentrated likelihood ``Tr{Q R}`` for candidate target positions."""
    g = context.signatures(zeta).T
    return projection_objective(g, r_sample.matrix)


@dataclass
class EstimateSet:
    estimates: np.ndarray          # (K, 3)
    objective_trace: list = field(default_factory=list)
    gains: np.ndarray | None = None
    sweep_trace: list = field(default_factory=list)
    refined: np.ndarray | None = None

    @property
    def k(self) -> int:
        return len(self.estimates)


def default_probe_count(config: SystemConfig) -> int:
    return 8


def probe_context(channels: ChannelSet, config: SystemConfig, codebook: LorentzianCodebook,
                  rng: np.random.Generator | None, n_looks: int | None = None,
                  design_rng: np.random.Generator | None = None,
                  h_si_hat: np.ndarray | None = None) -> EstimationContext:
    """Transmit ``n_looks`` probing blocks and build the whitened statistic.

    ``design_rng`` draws the random codebook configurations and symbols;
    ``rng`` draws the receiver noise (``None`` for a noiseless statistic).
    """
    m = default_probe_count(config) if n_looks is None else n_looks
    design_rng = np.random.default_rng(config.rng_seed) if design_rng is None else design_rng
    looks, parts = [], []
    n_rf = config.n_rf
    for _ in range(m):
        w_tx = random_codebook_matrix(TX, config, codebook, design_rng)
        w_rx = random_codebook_matrix(RX, config, codebook, design_rng)
        front_tx = tx_front(w_tx, channels)
        scale = np.sqrt(config.p_max / max(np.linalg.norm(front_tx) ** 2, 1e-300))
        v = scale * np.eye(n_rf, dtype=complex)
        bf = BfConfiguration(w_tx, w_rx, v)
        d = -effective_si(bf, channels, h_si_hat)
        bf = BfConfiguration(w_tx, w_rx, v, d=d)
        sym = symbol_block(n_rf, config.t_slots, design_rng)
        y = synthesize_received(bf, channels, sym, rng, config)
        rn = noise_covariance_diag(w_rx, channels.p_rx, config)
        stat = (y @ sym.s.conj().T) / np.sqrt(rn)[:, None] / np.sqrt(config.t_slots)
        parts.append(stat.ravel())
        looks.append(ProbeLook(rx_front(w_rx, channels), front_tx @ v, rn, config.t_slots))
    return EstimationContext(config, looks, np.concatenate(parts))


class _Deflated:
    """Objective ``Tr{P_[G_L, g] R}`` for a candidate ``g`` given locked columns.

    Uses ``R = z z^H`` unless an explicit ``r`` is supplied.
    """

    def __init__(self, context: EstimationContext, locked: np.ndarray, r: np.ndarray | None = None):
        self.context = context
        self.z = context.z
        self.r = r
        self.q = None
        self.base = 0.0
        if locked.size:
            q, _ = np.linalg.qr(context.signatures(locked).T)
            self.q = q
            if r is None:
                self.base = float(np.linalg.norm(q.conj().T @ self.z) ** 2)
            else:
                self.base = float(np.trace(q.conj().T @ r @ q).real)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.evaluate(self.context.signatures(points))

    def evaluate(self, g: np.ndarray, norms: np.ndarray | None = None) -> np.ndarray:
        """Objective for signature rows ``g``; ``norms`` may carry ``|g|^2`` precomputed."""
        full = np.einsum("gi,gi->g", g.conj(), g).real if norms is None else norms
        if self.r is not None:
            if self.q is not None:
                g = g - (g @ self.q.conj()) @ self.q.T
            num = np.einsum("gi,ij,gj->g", g.conj(), self.r, g).real
            den = np.einsum("gi,gi->g", g.conj(), g).real
        elif self.q is None:
            num = np.abs(g @ self.z.conj()) ** 2
            den = full
        else:
            # project out the locked span without forming the residual rows
            p = (g @ np.column_stack([self.z, self.q]).conj()).conj()
            qz = self.q.conj().T @ self.z
            num = np.abs(p[:, 0] - p[:, 1:] @ qz) ** 2
            den = full - np.sum(np.abs(p[:, 1:]) ** 2, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.where(den > 1e-10 * full, num / den, 0.0)
        return self.base + val


def _line_search(obj: _Deflated, point: np.ndarray, axis: int, grid: np.ndarray,
                 lo: float, hi: float, refine: bool, current: float) -> tuple[np.ndarray, float]:
    cand = np.repeat(point[None, :], len(grid), axis=0)
    cand[:, axis] = grid
    vals = obj(cand)
    k = int(np.argmax(vals))
    if vals[k] >= current:
        point = cand[k].copy()
        current = float(vals[k])
    if refine:
        step = grid[1] - grid[0]
        a = max(lo, point[axis] - step)
        b = min(hi, point[axis] + step)
        if b > a:
            def f(x):
                p = point.copy()
                p[axis] = x
                return -float(obj(p[None, :])[0])
            res = minimize_scalar(f, bounds=(a, b), method="bounded",
                                  options={"xatol": step * 1e-6})
            if -res.fun > current * (1 + 1e-12):
                point = point.copy()
                point[axis] = res.x
                current = -float(res.fun)
    return point, current


def _search_one(obj: _Deflated, start: np.ndarray, grid: SearchGrid,
                trace: list) -> tuple[np.ndarray, float]:
    r_ax, th_ax, ph_ax = grid.axes()
    bounds = grid.bounds()
    axes = {0: r_ax, 1: th_ax, 2: ph_ax}
    point = start.copy()
    current = float(obj(point[None, :])[0])
    for _ in range(grid.sweeps):
        before = point.copy()
        for axis in (2, 1, 0):
            point, current = _line_search(obj, point, axis, axes[axis], *bounds[axis],
                                          grid.refine, current)
        trace.append(current)
        if np.array_equal(point, before):
            break
    return point, current


def _coarse_start(obj: _Deflated, grid: SearchGrid, r0: float, n_th: int = 30,
                  n_ph: int = 90) -> np.ndarray:
    """Best (theta, phi) pair on a coarse grid with the range pinned at ``r0``."""
    th = np.linspace(*grid.theta_range, n_th)
    ph = np.linspace(*grid.phi_range, n_ph)
    tt, pp = np.meshgrid(th, ph, indexing="ij")
    pts = np.stack([np.full(tt.size, r0), tt.ravel(), pp.ravel()], axis=-1)
    vals = obj(pts)
    return pts[int(np.argmax(vals))].copy()


def _coarse_candidates(obj: _Deflated, grid: SearchGrid, n_starts: int) -> list[np.ndarray]:
    """Local maxima of a coarse 3-D scan, strongest first."""
    shape = grid.coarse_shape
    r = np.linspace(grid.r_min, grid.r_max, shape[0])
    th = np.linspace(*grid.theta_range, shape[1])
    ph = np.linspace(*grid.phi_range, shape[2])
    rr, tt, pp = np.meshgrid(r, th, ph, indexing="ij")
    pts = np.stack([rr.ravel(), tt.ravel(), pp.ravel()], axis=-1)
    # the objective is invariant to a common scaling of the signatures
    sig, norms = obj.context.unit_signatures(("coarse", grid), pts)
    cube = obj.evaluate(sig, norms).reshape(shape)
    padded = np.pad(cube, 1, mode="constant", constant_values=-np.inf)
    peak = np.ones(shape, bool)
    for off in itertools.product((-1, 0, 1), repeat=3):
        if off == (0, 0, 0):
            continue
        sl = tuple(slice(1 + o, 1 + o + n) for o, n in zip(off, shape))
        peak &= cube >= padded[sl]
    order = np.argsort(-np.where(peak, cube, -np.inf).ravel(), kind="stable")
    n = max(1, min(n_starts, int(peak.sum())))
    return [pts[i].copy() for i in order[:n]]


def _multi_start(obj: _Deflated, grid: SearchGrid, starts: list[np.ndarray],
                 trace: list) -> np.ndarray:
    best, best_val, best_trace = None, -np.inf, []
    for s in starts:
        t: list[float] = []
        p, v = _search_one(obj, s, grid, t)
        if v > best_val:
            best, best_val, best_trace = p, v, t
    trace.extend(best_trace)
    return best


def _snap(point: np.ndarray, grid: SearchGrid) -> np.ndarray:
    out = point.copy()
    for axis, ax in enumerate(grid.axes()):
        out[axis] = ax[int(np.argmin(np.abs(ax - point[axis])))]
    return out


def estimate_targets(r_sample: SampleCovariance | None, context: EstimationContext,
                     search: SearchGrid, k: int, joint_rounds: int = 4,
                     init: str = "coarse", n_starts: int = 4) -> EstimateSet:
    """Grid estimates of ``k`` targets from cyclic 1-D searches.

    Targets are found one after another, each new search keeping the
    earlier ones in the projector. ``init="coarse"`` starts the cyclic
    search from the strongest local maxima of a coarse 3-D scan;
    ``init="fraunhofer"`` pins the starting range at the Fraunhofer distance
    of one microstrip (clipped to the search interval) with a coarse
    angular scan. Joint rounds then re-place each target given the others,
    scoring candidates after a continuous joint refinement. A last set of
    sweeps moves every coordinate back onto the search grid.

    ``objective_trace`` holds the joint objective after every final sweep
    and never decreases. ``refined`` keeps the continuous estimates.
    ``r_sample`` may be ``None`` (use the context statistic).
    """
    if init not in ("coarse", "fraunhofer"):
        raise ValueError(f"unknown initialization {init!r}")
    r_mat = None
    if r_sample is not None:
        evals, evecs = np.linalg.eigh(r_sample.matrix)
        lead = max(evals[-1], 0.0)
        if lead > 0 and (len(evals) == 1 or evals[-2] <= 1e-12 * lead):
            context = EstimationContext(context.config, context.looks,
                                        evecs[:, -1] * np.sqrt(lead))
        else:
            r_mat = r_sample.matrix
    polish = search.polish and r_mat is None
    cfg = context.config
    r0 = float(np.clip(fraunhofer_distance(cfg.aperture, cfg), search.r_min, search.r_max))
    est = np.zeros((k, 3))
    sweep_trace: list[float] = []

    def deflated(locked):
        return _Deflated(context, locked, r_mat)

    def starts(obj):
        if init == "fraunhofer":
            return [_coarse_start(obj, search, r0)]
        return _coarse_candidates(obj, search, n_starts)

    def joint_value(e):
        return float(deflated(e[:-1])(e[-1:])[0])

    for i in range(k):
        est[i] = _multi_start(deflated(est[:i]), search, starts(deflated(est[:i])), sweep_trace)
    if polish:
        est = polish_estimates(context, est, search)
    for _ in range(joint_rounds if k > 1 else 0):
        before = joint_value(est)
        for i in range(k):
            obj = deflated(np.delete(est, i, axis=0))
            best, best_val = est, joint_value(est)
            for s0 in starts(obj):
                cand = est.copy()
                cand[i], _ = _search_one(obj, s0, search, sweep_trace)
                if polish:
                    cand = polish_estimates(context, cand, search)
                val = joint_value(cand)
                if val > best_val:
                    best, best_val = cand, val
            est = best
        if joint_value(est) <= before * (1 + 1e-9):
            break
    refined = est.copy()

    # final joint sweeps on the grid
    axes = search.axes()
    grid_est = np.array([_snap(p, search) for p in est])
    current = joint_value(grid_est)
    trace = [current]
    for _ in range(search.sweeps):
        for i in range(k):
            obj = deflated(np.delete(grid_est, i, axis=0))
            for axis in (2, 1, 0):
                grid_est[i], current = _line_search(obj, grid_est[i], axis, axes[axis],
                                                    0.0, 0.0, False, current)
        trace.append(current)
    g = context.signatures(grid_est).T
    gains = np.linalg.lstsq(g, context.z, rcond=None)[0]
    return EstimateSet(grid_est, trace, gains, sweep_trace, refined)


def polish_estimates(context: EstimationContext, est: np.ndarray, search: SearchGrid,
                     max_nfev: int = 20) -> np.ndarray:
    """Joint local refinement of all positions, kept only if the fit improves.

    The gains are projected out (variable projection) and the remaining
    positions are fitted by bounded nonlinear least squares.
    """
    k = len(est)
    bounds = search.bounds()
    lo, hi = np.tile(bounds[:, 0], k), np.tile(bounds[:, 1], k)
    z = context.z

    def fit(x):
        pts = x.reshape(k, 3)
        g, dg = context.signature_derivatives(pts)
        q, _ = np.linalg.qr(g.T)
        b = np.linalg.lstsq(g.T, z, rcond=None)[0]
        r = z - q @ (q.conj().T @ z)
        return r, dg, b, q

    def resid(x):
        g = context.signatures(x.reshape(k, 3)).T
        q, _ = np.linalg.qr(g)
        r = z - q @ (q.conj().T @ z)
        return np.concatenate([r.real, r.imag])

    def jac(x):
        _, dg, b, q = fit(x)
        cols = (b[:, None, None] * dg).reshape(3 * k, -1).T
        cols = -(cols - q @ (q.conj().T @ cols))
        return np.concatenate([cols.real, cols.imag])

    x0 = np.clip(est.ravel(), lo, hi)
    c0 = float(np.sum(resid(x0) ** 2))
    try:
        res = least_squares(resid, x0, jac=jac, bounds=(lo, hi), method="trf",
                            x_scale="jac", max_nfev=max_nfev)
    except (ValueError, np.linalg.LinAlgError):
        return est
    if 2 * res.cost < c0:
        return res.x.reshape(k, 3).copy()
    return est


def association(estimates: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Match estimates to true targets by Cartesian error.

    Exhaustive over permutations for K <= 4, greedy otherwise. Returns
    ``(perm, errors)`` with ``estimates[perm[k]]`` assigned to ``truth[k]``.
    """
    e = spherical_to_cartesian(estimates[:, 0], estimates[:, 1], estimates[:, 2])
    t = spherical_to_cartesian(truth[:, 0], truth[:, 1], truth[:, 2])
    cost = np.linalg.norm(t[:, None, :] - e[None, :, :], axis=-1)
    k = len(t)
    if k <= 4:
        best = min(itertools.permutations(range(k)),
                   key=lambda p: sum(cost[i, p[i]] ** 2 for i in range(k)))
        perm = np.array(best)
    else:
        perm = -np.ones(k, int)
        free_t, free_e = set(range(k)), set(range(k))
        for _ in range(k):
            i, j = min(((i, j) for i in free_t for j in free_e), key=lambda ij: cost[ij])
            perm[i] = j
            free_t.discard(i)
            free_e.discard(j)
    return perm, cost[np.arange(k), perm]


def rmse(estimates, truth) -> float:
    """Cartesian position RMSE over targets after association."""
    est = estimates.estimates if isinstance(estimates, EstimateSet) else np.asarray(estimates, float)
    tru = truth.zeta(users_only=False) if isinstance(truth, Scenario) else np.asarray(truth, float)
    est, tru = np.atleast_2d(est), np.atleast_2d(tru)
    if est.shape != tru.shape:
        raise ValueError(f"estimate count {len(est)} does not match target count {len(tru)}")
    _, err = association(est, tru)
    return float(np.sqrt(np.mean(err ** 2)))


def probe_bound(context: EstimationContext, scenario: Scenario) -> float:
    """Cartesian position bound for the probing statistic, gains as nuisance."""
    pts = scenario.zeta(users_only=False)
    sig, dsig = context.signature_derivatives(pts)
    fim = nuisance_fim(sig, dsig, np.array(scenario.reflection_coeffs))
    return cartesian_bound(fim, pts)
