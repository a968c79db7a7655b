"""Channel partial derivatives, Fisher information and position error bounds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelSet, PropagationMatrix, response_derivatives
from .codebook import AnalogBfMatrix
from .scenario import RX, TX, SystemConfig, spherical_to_cartesian
from .signals import rx_front, tx_front


class SingularCovarianceError(ValueError):
    """An RX chain with all-zero weights has no noise and no signal."""


@dataclass(frozen=True)
class Fim:
    """Fisher information ordered ``(r_1, theta_1, phi_1, ..., r_U, theta_U, phi_U)``."""

    matrix: np.ndarray

    @property
    def u(self) -> int:
        return self.matrix.shape[0] // 3


@dataclass(frozen=True)
class PebResult:
    peb_full: float
    peb_diag: float
    trace_bound: float
    singular: bool = False
    null_space: np.ndarray | None = None

    @property
    def identifiable(self) -> bool:
        return not self.singular


def channel_partials(zeta, config: SystemConfig) -> np.ndarray:
    """``dH_R / dzeta_i`` with unit reflection gains, shape ``(3U, N, N)``."""
    pts = np.atleast_2d(np.asarray(zeta, dtype=float))
    a_rx, da_rx = response_derivatives(pts, config, RX)
    a_tx, da_tx = response_derivatives(pts, config, TX)
    # product rule on a_rx a_tx^H
    out = (np.einsum("kpm,kq->kpmq", da_rx, a_tx.conj())
           + np.einsum("km,kpq->kpmq", a_rx, da_tx.conj()))
    n = a_rx.shape[-1]
    return out.reshape(3 * len(pts), n, n)


def partial_factors(zeta, config: SystemConfig):
    """Rank-two factors of every partial: ``dH = da_rx a_tx^H + a_rx da_tx^H``."""
    pts = np.atleast_2d(np.asarray(zeta, dtype=float))
    a_rx, da_rx = response_derivatives(pts, config, RX)
    a_tx, da_tx = response_derivatives(pts, config, TX)
    return a_rx, da_rx, a_tx, da_tx


def noise_covariance_diag(w_rx: AnalogBfMatrix, p_rx: PropagationMatrix,
                          config: SystemConfig) -> np.ndarray:
    """Diagonal of ``sigma^2 W^H P^H P W`` via per-microstrip Hadamard products."""
    n_e = w_rx.n_e
    pw = np.stack([p_rx.block(i, n_e) * w_rx.weights[i] for i in range(w_rx.n_rf)])
    diag = config.noise_power * np.sum(np.abs(pw) ** 2, axis=1)
    if np.any(diag <= 0):
        raise SingularCovarianceError("an RX microstrip has all-zero weights")
    return diag


def noise_covariance(w_rx: AnalogBfMatrix, p_rx: PropagationMatrix,
                     config: SystemConfig) -> np.ndarray:
    return np.diag(noise_covariance_diag(w_rx, p_rx, config)).astype(complex)


def noise_covariance_direct(w_rx: AnalogBfMatrix, p_rx: PropagationMatrix,
                            config: SystemConfig) -> np.ndarray:
    pw = p_rx.matrix @ w_rx.materialized
    return config.noise_power * pw.conj().T @ pw


def _fim_from_mean_partials(b: np.ndarray, rn_diag: np.ndarray, t_slots: int) -> np.ndarray:
    """``2 T Re tr(B_i^H R_n^{-1} B_j)`` for ``b`` of shape (P, N_RF, X)."""
    white = b / np.sqrt(rn_diag)[None, :, None]
    g = white.reshape(b.shape[0], -1)
    fim = 2.0 * t_slots * (g.conj() @ g.T).real
    return 0.5 * (fim + fim.T)


def fim_assemble(bf, partials: np.ndarray, channels: ChannelSet, config: SystemConfig,
                 t_slots: int | None = None) -> Fim:
    """Full FIM from the mean derivatives ``W_RX^H P_RX^H dH P_TX W_TX V S``.

    Symbols are unit power, ``S S^H = T I``; the precoder carries the
    transmit power.
    """
    t = config.t_slots if t_slots is None else t_slots
    front = rx_front(bf.w_rx, channels)
    back = tx_front(bf.w_tx, channels) @ bf.v
    b = np.einsum("rm,imq,qu->iru", front, partials, back)
    rn = noise_covariance_diag(bf.w_rx, channels.p_rx, config)
    return Fim(_fim_from_mean_partials(b, rn, t))


def fim_fast(bf, zeta, channels: ChannelSet, config: SystemConfig,
             t_slots: int | None = None) -> Fim:
    """Same as :func:`fim_assemble` without forming the N x N partials."""
    t = config.t_slots if t_slots is None else t_slots
    a_rx, da_rx, a_tx, da_tx = partial_factors(zeta, config)
    front = rx_front(bf.w_rx, channels)
    back = tx_front(bf.w_tx, channels) @ bf.v
    fa, fda = a_rx @ front.T, da_rx @ front.T                  # (U, N_RF), (U, 3, N_RF)
    ba, bda = a_tx.conj() @ back, da_tx.conj() @ back          # (U, X), (U, 3, X)
    b = fda[..., :, None] * ba[:, None, None, :] + fa[:, None, :, None] * bda[..., None, :]
    b = b.reshape(-1, front.shape[0], back.shape[1])
    rn = noise_covariance_diag(bf.w_rx, channels.p_rx, config)
    return Fim(_fim_from_mean_partials(b, rn, t))


def peb(fim: Fim, rcond: float = 1e-12) -> PebResult:
    """Full-inverse and diagonal-only bounds plus ``9U^2 / Tr I``."""
    m = 0.5 * (fim.matrix + fim.matrix.T)
    u = fim.u
    tr = float(np.trace(m))
    trace_bound = 9.0 * u * u / tr if tr > 0 else np.inf
    diag = np.diag(m)
    peb_diag = float(np.sqrt(np.sum(1.0 / diag))) if np.all(diag > 0) else np.inf
    evals, evecs = np.linalg.eigh(m)
    lmax = evals[-1]
    if lmax <= 0 or evals[0] <= rcond * lmax:
        null = evecs[:, evals <= rcond * max(lmax, 0.0)]
        return PebResult(np.inf, peb_diag, trace_bound, True, null)
    inv_trace = float(np.sum(1.0 / evals))
    return PebResult(float(np.sqrt(inv_trace)), peb_diag, trace_bound)


def spherical_jacobian(zeta) -> np.ndarray:
    """``d(x, y, z) / d(r, theta, phi)`` per point, shape (K, 3, 3)."""
    pts = np.atleast_2d(np.asarray(zeta, dtype=float))
    r, th, ph = pts[:, 0], pts[:, 1], pts[:, 2]
    st, ct, sp, cp = np.sin(th), np.cos(th), np.sin(ph), np.cos(ph)
    z = np.zeros_like(r)
    return np.stack([
        np.stack([st * cp, r * ct * cp, -r * st * sp], axis=-1),
        np.stack([st * sp, r * ct * sp, r * st * cp], axis=-1),
        np.stack([ct, -r * st, z], axis=-1),
    ], axis=-2)


def cartesian_bound(fim_geom: np.ndarray, zeta) -> float:
    """Root mean squared Cartesian position bound per target from a spherical FIM."""
    pts = np.atleast_2d(np.asarray(zeta, dtype=float))
    k = len(pts)
    try:
        crb = np.linalg.inv(fim_geom)
    except np.linalg.LinAlgError:
        return np.inf
    jac = spherical_jacobian(pts)
    total = 0.0
    for i in range(k):
        blk = crb[3 * i:3 * i + 3, 3 * i:3 * i + 3]
        total += np.trace(jac[i] @ blk @ jac[i].T)
    if not total > 0:
        return np.inf
    return float(np.sqrt(total / k))


def nuisance_fim(signatures: np.ndarray, d_signatures: np.ndarray,
                 betas: np.ndarray) -> np.ndarray:
    """FIM of ``z = sum_k beta_k g_k(zeta_k) + CN(0, I)`` with complex gains as nuisance.

    ``signatures`` has shape (K, L) and ``d_signatures`` (K, 3, L). Returns
    the Schur complement for the 3K geometric parameters.
    """
    k, length = signatures.shape
    cols = [betas[i] * d_signatures[i, p] for i in range(k) for p in range(3)]
    cols += [signatures[i] for i in range(k)]
    cols += [1j * signatures[i] for i in range(k)]
    d = np.array(cols)
    full = 2.0 * (d.conj() @ d.T).real
    full = 0.5 * (full + full.T)
    g = 3 * k
    a, b, c = full[:g, :g], full[:g, g:], full[g:, g:]
    return a - b @ np.linalg.solve(c, b.T)
