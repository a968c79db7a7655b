"""Downlink design: codebook search for the TX weights and block diagonalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import PropagationMatrix
from .codebook import AnalogBfMatrix, LorentzianCodebook, codebook_matrix
from .scenario import TX, SystemConfig


class BdInfeasibleError(ValueError):
    """Block diagonalization has no null space for some user."""


@dataclass(frozen=True)
class CommDesign:
    w_tx_c: AnalogBfMatrix
    v_c: np.ndarray
    sum_rate: float


def effective_dl(w_tx: AnalogBfMatrix, h_dl: np.ndarray, p_tx: PropagationMatrix) -> np.ndarray:
    """Rows ``h_u P_TX W_TX``, shape (U, N_RF)."""
    h = np.atleast_2d(h_dl)
    return (h * p_tx.diag[None, :]) @ w_tx.materialized


def sum_rate(w_tx: AnalogBfMatrix, v: np.ndarray, h_dl: np.ndarray, p_tx: PropagationMatrix,
             config: SystemConfig, interference: bool = False) -> float:
    """``sum_u log2(1 + |h_u P W v_u|^2 / sigma^2)`` in bits/s/Hz.

    With ``interference`` the other users' streams are added to the noise
    (SINR). Both agree for block-diagonalized precoders.
    """
    g = effective_dl(w_tx, h_dl, p_tx) @ v
    p = np.abs(g) ** 2
    gains = np.diag(p)
    den = config.noise_power
    if interference:
        den = den + np.sum(p, axis=1) - gains
    return float(np.sum(np.log2(1.0 + gains / den)))


def _aligned_indices(g: np.ndarray, cw: np.ndarray, n_phase: int) -> np.ndarray:
    """Best per-element codewords for ``|sum_n g_n w_n|`` via a common-phase scan."""
    best, best_val = None, -1.0
    for psi in 2 * np.pi * np.arange(n_phase) / n_phase:
        score = np.real(np.exp(-1j * psi) * g[:, None] * cw[None, :])
        idx = np.argmax(score, axis=1)
        val = abs(np.sum(g * cw[idx]))
        if val > best_val + 1e-300:
            best, best_val = idx, val
    return best


def _coordinate_ascent(gm: np.ndarray, idx: np.ndarray, cw: np.ndarray, sweeps: int) -> np.ndarray:
    """Greedy per-element ascent of ``||G w||^2``."""
    idx = idx.copy()
    w = cw[idx]
    y = gm @ w
    for _ in range(sweeps):
        changed = False
        for n in range(len(idx)):
            rest = y - gm[:, n] * w[n]
            vals = np.sum(np.abs(rest[:, None] + gm[:, n:n + 1] * cw[None, :]) ** 2, axis=0)
            k = int(np.argmax(vals))
            if vals[k] > vals[idx[n]] * (1 + 1e-12):
                idx[n] = k
                w[n] = cw[k]
                y = rest + gm[:, n] * cw[k]
                changed = True
        if not changed:
            break
    return idx


def select_tx_codewords(h_dl: np.ndarray, p_tx: PropagationMatrix, codebook: LorentzianCodebook,
                        config: SystemConfig, n_phase: int = 64, sweeps: int = 3) -> AnalogBfMatrix:
    """One search per microstrip for the weights maximizing ``sum_u |h_u,i (p_i o w_i)|^2``."""
    h = np.atleast_2d(h_dl)
    n_rf, n_e = config.n_rf, config.n_e
    cw = codebook.weights
    idx = np.zeros((n_rf, n_e), int)
    for i in range(n_rf):
        gm = h[:, i * n_e:(i + 1) * n_e] * p_tx.block(i, n_e)[None, :]
        if not np.any(np.abs(gm) > 0):
            continue
        # collapse users onto the dominant direction of the per-microstrip channel
        lead = np.linalg.svd(gm, full_matrices=False)[0][:, 0]
        g = lead.conj() @ gm
        start = _aligned_indices(g, cw, n_phase)
        idx[i] = _coordinate_ascent(gm, start, cw, sweeps)
    return codebook_matrix(idx, TX, codebook)


def block_diagonalization(w_tx: AnalogBfMatrix, h_dl: np.ndarray, p_tx: PropagationMatrix,
                          config: SystemConfig, basis: np.ndarray | None = None,
                          rtol: float = 1e-9) -> np.ndarray:
    """Zero-forcing-by-nullspace precoder with an equal per-user power split.

    With ``basis`` (N_RF x L) the precoder is constrained to its column
    span and the returned matrix is ``basis @ V_tilde``.
    """
    g = effective_dl(w_tx, h_dl, p_tx)
    u, n_rf = g.shape
    f = np.eye(n_rf, dtype=complex) if basis is None else np.asarray(basis, complex)
    gf = g @ f
    dim = gf.shape[1]
    if u > dim:
        raise BdInfeasibleError(f"{u} users need at least {u} precoding dimensions, got {dim}")
    front = p_tx.diag[:, None] * w_tx.materialized
    v = np.zeros((n_rf, u), complex)
    scale = max(np.linalg.norm(gf), 1e-300)
    for k in range(u):
        others = np.delete(gf, k, axis=0)
        if others.size:
            proj = np.eye(dim) - np.linalg.pinv(others) @ others
        else:
            proj = np.eye(dim)
        t = proj @ gf[k].conj()
        if np.linalg.norm(t) <= rtol * scale:
            raise BdInfeasibleError(f"user {k} lies in the span of the other users")
        vk = f @ t
        pk = np.linalg.norm(front @ vk) ** 2
        if pk <= 0:
            raise BdInfeasibleError(f"user {k} precoder radiates no power")
        v[:, k] = vk * np.sqrt(config.p_max / u / pk)
    return v


def design_comm(h_dl: np.ndarray, p_tx: PropagationMatrix, codebook: LorentzianCodebook,
                config: SystemConfig) -> CommDesign:
    w = select_tx_codewords(h_dl, p_tx, codebook, config)
    v = block_diagonalization(w, h_dl, p_tx, config)
    return CommDesign(w, v, sum_rate(w, v, h_dl, p_tx, config))
