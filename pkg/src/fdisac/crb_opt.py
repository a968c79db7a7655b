"""Sensing-oriented beamformer design.

The relaxed problem alternates between the RX Gram blocks and the TX Gram
``F_TX = W V V^H W^H``. Both half-steps have closed forms: a principal
eigenvector per RX microstrip and the normalized PSD part for the TX Gram.
The RX blocks are then mapped to codebook weights and the TX Gram is
factorized back into codebook weights and a digital precoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import PropagationMatrix
from .codebook import (AnalogBfMatrix, LorentzianCodebook, codebook_matrix,
                       fit_direction)
from .scenario import RX, TX, SystemConfig


@dataclass(frozen=True)
class KMatrices:
    mats: np.ndarray  # (3U, N, N)

    def __len__(self) -> int:
        return self.mats.shape[0]


@dataclass
class SensingDesign:
    f_tx: np.ndarray
    f_rx_blocks: np.ndarray  # (N_RF, N_E, N_E)
    objective_history: list = field(default_factory=list)
    converged: bool = False
    degenerate: bool = False
    w_rx: AnalogBfMatrix | None = None
    w_tx_s: AnalogBfMatrix | None = None
    v_s: np.ndarray | None = None
    fact_history: list = field(default_factory=list)


def k_matrices(partials: np.ndarray, p_tx: PropagationMatrix, p_rx: PropagationMatrix) -> KMatrices:
    """``P_RX^H dH P_TX`` for every partial."""
    mats = p_rx.diag.conj()[None, :, None] * partials * p_tx.diag[None, None, :]
    return KMatrices(mats)


def _hermitian(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.conj().T)


def principal_vector(a: np.ndarray) -> tuple[np.ndarray, float]:
    """Unit principal eigenvector with the largest-magnitude entry made real-positive."""
    evals, evecs = np.linalg.eigh(_hermitian(a))
    v = evecs[:, -1]
    k = int(np.argmax(np.abs(v)))
    v = v * np.exp(-1j * np.angle(v[k]))
    return v, float(evals[-1])


def blocks_to_matrix(blocks: np.ndarray) -> np.ndarray:
    n_rf, n_e, _ = blocks.shape
    out = np.zeros((n_rf * n_e, n_rf * n_e), complex)
    for i in range(n_rf):
        out[i * n_e:(i + 1) * n_e, i * n_e:(i + 1) * n_e] = blocks[i]
    return out


def crb_objective(f_tx: np.ndarray, f_rx: np.ndarray, k: KMatrices) -> float:
    """``sum_i Re tr(K_i F_TX K_i^H F_RX)``."""
    total = 0.0
    for km in k.mats:
        total += np.real(np.trace(km @ f_tx @ km.conj().T @ f_rx))
    return float(total)


def optimize_rx_blocks(f_tx: np.ndarray, k: KMatrices, n_rf: int) -> tuple[np.ndarray, bool]:
    """Rank-one RX blocks maximizing the relaxed objective for a fixed ``F_TX``.

    Every block gets Frobenius norm ``1/sqrt(N_RF)`` so that the stacked
    Gram has unit norm. Returns ``(blocks, degenerate)``.
    """
    n = f_tx.shape[0]
    n_e = n // n_rf
    a = np.zeros((n, n), complex)
    for km in k.mats:
        a += km @ f_tx @ km.conj().T
    blocks = np.zeros((n_rf, n_e, n_e), complex)
    degenerate = False
    scale = 1.0 / np.sqrt(n_rf)
    for i in range(n_rf):
        ak = a[i * n_e:(i + 1) * n_e, i * n_e:(i + 1) * n_e]
        if np.linalg.norm(ak) <= 1e-300:
            v = np.zeros(n_e, complex)
            v[0] = 1.0
            degenerate = True
        else:
            v, _ = principal_vector(ak)
        blocks[i] = scale * np.outer(v, v.conj())
    return blocks, degenerate


def optimize_tx_gram(f_rx_blocks: np.ndarray, k: KMatrices) -> tuple[np.ndarray, bool]:
    """PSD part of ``sum_i K_i^H F_RX K_i`` normalized to unit Frobenius norm."""
    f_rx = blocks_to_matrix(f_rx_blocks) if f_rx_blocks.ndim == 3 else f_rx_blocks
    m = np.zeros_like(f_rx)
    for km in k.mats:
        m += km.conj().T @ f_rx @ km
    return psd_normalized(m)


def psd_normalized(m: np.ndarray) -> tuple[np.ndarray, bool]:
    evals, evecs = np.linalg.eigh(_hermitian(m))
    pos = np.clip(evals, 0.0, None)
    mp = (evecs * pos) @ evecs.conj().T
    nrm = np.linalg.norm(mp)
    if nrm <= 0:
        return np.zeros_like(m), True
    return _hermitian(mp) / nrm, False


def alternate_crb(k: KMatrices, config: SystemConfig) -> SensingDesign:
    n = k.mats.shape[1]
    f_tx = np.eye(n, dtype=complex) / np.sqrt(n)
    history: list[float] = []
    converged = False
    degenerate = False
    blocks = None
    for _ in range(config.crb_max_iter):
        blocks, deg_rx = optimize_rx_blocks(f_tx, k, config.n_rf)
        f_tx, deg_tx = optimize_tx_gram(blocks, k)
        degenerate = deg_rx or deg_tx
        history.append(crb_objective(f_tx, blocks_to_matrix(blocks), k))
        if len(history) > 1:
            prev = history[-2]
            if abs(history[-1] - prev) <= config.crb_tol * max(abs(prev), 1e-300):
                converged = True
                break
    return SensingDesign(f_tx, blocks, history, converged, degenerate)


def project_rx_to_codebook(blocks: np.ndarray, codebook: LorentzianCodebook,
                           p_rx: PropagationMatrix | None = None,
                           config: SystemConfig | None = None) -> AnalogBfMatrix:
    """Codebook weights whose rank-one blocks are closest to the relaxed ones.

    The distance is taken between unit-norm blocks, which reduces to the
    normalized alignment of the principal eigenvector with the codeword
    vector. The relaxed blocks already live in the weight domain, so the
    propagation matrix does not enter.
    """
    idx = []
    for blk in blocks:
        if np.linalg.norm(blk) <= 1e-300:
            idx.append(np.full(blk.shape[0], codebook.zero_phase_index))
            continue
        v, _ = principal_vector(blk)
        idx.append(fit_direction(v, codebook))
    return codebook_matrix(np.array(idx), RX, codebook)


def block_distance(block: np.ndarray, w: np.ndarray) -> float:
    """Frobenius distance between the unit-norm versions of ``block`` and ``w w^H``."""
    b = block / np.linalg.norm(block)
    nw = np.vdot(w, w).real
    if nw <= 0:
        return float(np.linalg.norm(b))
    return float(np.linalg.norm(b - np.outer(w, w.conj()) / nw))


def _fact_objective(f: np.ndarray, w: np.ndarray, c: np.ndarray, owner: np.ndarray) -> float:
    z = (w[:, None] * c[owner][:, owner]) * w.conj()[None, :]
    return float(np.linalg.norm(f - z) ** 2)


def _solve_v(f: np.ndarray, w_flat: np.ndarray, n_rf: int, n_e: int, u: int) -> np.ndarray:
    """Best ``V`` for fixed weights: rank-U PSD fit in the orthogonal-column basis."""
    blocks = w_flat.reshape(n_rf, n_e)
    norms = np.linalg.norm(blocks, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    w_hat = np.zeros((n_rf * n_e, n_rf), complex)
    for i in range(n_rf):
        if norms[i] > 0:
            w_hat[i * n_e:(i + 1) * n_e, i] = blocks[i] / norms[i]
    g = _hermitian(w_hat.conj().T @ f @ w_hat)
    evals, evecs = np.linalg.eigh(g)
    top = np.argsort(evals)[::-1][:u]
    lam = np.clip(evals[top], 0.0, None)
    v = evecs[:, top] * np.sqrt(lam)
    v = v / safe[:, None]
    v[norms == 0] = 0.0
    return v


def factorize_tx(f_tx: np.ndarray, codebook: LorentzianCodebook, p_tx: PropagationMatrix,
                 config: SystemConfig, u: int) -> tuple[AnalogBfMatrix, np.ndarray, list]:
    """Codebook weights ``W`` and precoder ``V`` with ``W V V^H W^H`` close to ``F_TX``.

    Alternates a greedy per-element codebook pass on ``W`` with the exact
    least-squares update of ``V``. The precoder is rescaled to the power
    budget on exit. Returns ``(W, V, history)`` where ``history`` holds the
    relative squared residual after each round.
    """
    n_rf, n_e = config.n_rf, config.n_e
    if u > n_rf:
        raise ValueError("more streams than RF chains")
    f = _hermitian(np.asarray(f_tx, complex))
    fnorm2 = max(np.linalg.norm(f) ** 2, 1e-300)
    owner = np.repeat(np.arange(n_rf), n_e)
    cw = codebook.weights

    evals, evecs = np.linalg.eigh(f)
    top = np.argsort(evals)[::-1][:u]
    x = evecs[:, top] * np.sqrt(np.clip(evals[top], 0.0, None))
    idx = np.zeros((n_rf, n_e), int)
    for i in range(n_rf):
        xi = x[i * n_e:(i + 1) * n_e]
        if np.linalg.norm(xi) <= 1e-300:
            idx[i] = codebook.zero_phase_index
            continue
        lsv = np.linalg.svd(xi, full_matrices=False)[0][:, 0]
        idx[i] = fit_direction(lsv, codebook)
    idx = idx.ravel()
    w = cw[idx].copy()
    v = _solve_v(f, w, n_rf, n_e, u)
    c = v @ v.conj().T
    history = [_fact_objective(f, w, c, owner) / fnorm2]

    for _ in range(config.fact_max_iter):
        # greedy per-element codeword update, V fixed
        for a in range(w.size):
            i = owner[a]
            q = w.conj() * c[i, owner]
            q[a] = 0.0
            lin = np.sum(f[a].conj() * q)
            quad = np.sum(np.abs(q) ** 2)
            mag2 = np.abs(cw) ** 2
            vals = ((f[a, a].real - mag2 * c[i, i].real) ** 2
                    + 2.0 * (mag2 * quad - 2.0 * np.real(cw * lin)))
            k = int(np.argmin(vals))
            if vals[k] < vals[idx[a]] - 1e-15 * fnorm2:
                idx[a] = k
                w[a] = cw[k]
        v = _solve_v(f, w, n_rf, n_e, u)
        c = v @ v.conj().T
        history.append(_fact_objective(f, w, c, owner) / fnorm2)
        prev = history[-2]
        if prev - history[-1] <= config.fact_tol * max(prev, 1e-300):
            break

    w_tx = codebook_matrix(idx.reshape(n_rf, n_e), TX, codebook)
    x = (p_tx.diag[:, None] * w_tx.materialized) @ v
    p = np.vdot(x, x).real
    if p > 0:
        v = v * np.sqrt(config.p_max / p)
    return w_tx, v, history


def design_sensing(k: KMatrices, codebook: LorentzianCodebook, p_tx: PropagationMatrix,
                   p_rx: PropagationMatrix, config: SystemConfig, u: int) -> SensingDesign:
    """Relaxed alternation, RX codebook projection and TX factorization."""
    design = alternate_crb(k, config)
    design.w_rx = project_rx_to_codebook(design.f_rx_blocks, codebook, p_rx, config)
    design.w_tx_s, design.v_s, design.fact_history = factorize_tx(
        design.f_tx, codebook, p_tx, config, u)
    return design
