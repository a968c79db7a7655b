"""Lorentzian-constrained DMA weights and the block-sparse analog BF matrix.

Every realisable metamaterial weight lies on the circle ``|w - j/2| = 1/2``
restricted to ``w = 0.5 (j + e^{j phi})`` with ``phi`` in ``[-pi/2, pi/2]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .scenario import SIDES, SystemConfig

CENTER = 0.5j
RADIUS = 0.5


def lorentzian_weight(phi: float) -> complex:
    if not -math.pi / 2 - 1e-12 <= phi <= math.pi / 2 + 1e-12:
        raise ValueError(f"phase {phi} outside [-pi/2, pi/2]")
    return 0.5 * (1j + complex(math.cos(phi), math.sin(phi)))


@dataclass(frozen=True)
class LorentzianCodebook:
    """Uniform half-open phase grid ``-pi/2 + pi k / 2^bits``, k = 0..2^bits-1."""

    phases: np.ndarray
    weights: np.ndarray

    @property
    def size(self) -> int:
        return len(self.phases)

    def __len__(self) -> int:
        return self.size

    @property
    def zero_phase_index(self) -> int:
        return int(np.argmin(np.abs(self.phases)))

    def nearest_indices(self, w) -> np.ndarray:
        """Index of the nearest codeword for every entry of ``w``.

        Ties go to the lower index.
        """
        w = np.asarray(w, dtype=complex)
        flat = w.ravel()
        m = self.size
        ang = np.angle(flat - CENTER)
        step = math.pi / m
        # clamp onto the arc, then examine the neighbouring grid points
        clamped = np.clip(ang, -math.pi / 2, math.pi / 2)
        guess = np.clip(np.floor((clamped + math.pi / 2) / step).astype(int), 0, m - 1)
        cand = np.stack([guess - 1, guess, guess + 1, np.zeros_like(guess),
                         np.full_like(guess, m - 1)], axis=-1)
        cand = np.clip(cand, 0, m - 1)
        dist = np.abs(flat[:, None] - self.weights[cand])
        best = dist.min(axis=1, keepdims=True)
        # lowest index among (near-)exact ties
        tied = np.where(dist <= best * (1 + 1e-12) + 1e-15, cand, m)
        out = tied.min(axis=1)
        # points at the circle center are equidistant from every codeword
        out[np.abs(flat - CENTER) < 1e-15] = 0
        return out.reshape(w.shape)

    def project(self, w) -> np.ndarray:
        return self.weights[self.nearest_indices(w)]


@lru_cache(maxsize=16)
def _codebook(bits: int) -> LorentzianCodebook:
    m = 2 ** bits
    phases = -math.pi / 2 + math.pi * np.arange(m) / m
    weights = 0.5 * (1j + np.exp(1j * phases))
    phases.setflags(write=False)
    weights.setflags(write=False)
    return LorentzianCodebook(phases, weights)


def make_codebook(bits: int) -> LorentzianCodebook:
    if bits < 1:
        raise ValueError("codebook needs at least one bit")
    return _codebook(int(bits))


def project_to_codebook(w, codebook: LorentzianCodebook) -> np.ndarray:
    """Entrywise nearest codeword (Euclidean), ties toward the smaller phase."""
    if codebook.size == 0:
        raise ValueError("empty codebook")
    return codebook.project(w)


def on_circle(w, tol: float = 1e-12) -> bool:
    return bool(np.all(np.abs(np.abs(np.asarray(w) - CENTER) - RADIUS) <= tol))


def compose_dma_weight(tilde_w: complex, i: int, n: int, config: SystemConfig) -> complex:
    """Final weight ``0.5 (j + tilde_w e^{j rho beta})`` for element ``n`` of microstrip ``i``.

    ``rho = (n-1) d_e`` is the in-guide path length, so the guide phase is
    pre-compensated. ``i`` is accepted for symmetry; every microstrip uses the
    same wavenumber.
    """
    if abs(abs(tilde_w) - 1.0) > 1e-9:
        raise ValueError("tilde_w must have unit modulus")
    if not 1 <= n <= config.n_e or not 1 <= i <= config.n_rf:
        raise IndexError("element index out of range")
    rho = (n - 1) * config.d_e
    return 0.5 * (1j + tilde_w * np.exp(1j * rho * config.waveguide_beta))


@dataclass(frozen=True)
class AnalogBfMatrix:
    """Per-microstrip weights ``w_{i,n}`` and their ``N x N_RF`` embedding."""

    side: str
    weights: np.ndarray  # (N_RF, N_E)

    def __post_init__(self) -> None:
        if self.side not in SIDES:
            raise ValueError(f"side must be 'tx' or 'rx', got {self.side!r}")
        w = np.array(self.weights, dtype=complex)
        if w.ndim != 2:
            raise ValueError("weights must be an N_RF x N_E array")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_rf(self) -> int:
        return self.weights.shape[0]

    @property
    def n_e(self) -> int:
        return self.weights.shape[1]

    @property
    def materialized(self) -> np.ndarray:
        n_rf, n_e = self.weights.shape
        out = np.zeros((n_rf * n_e, n_rf), dtype=complex)
        for i in range(n_rf):
            out[i * n_e:(i + 1) * n_e, i] = self.weights[i]
        return out

    def in_codebook(self, tol: float = 1e-12) -> bool:
        return on_circle(self.weights, tol) and bool(np.all(self.weights.real >= -tol))


def assemble_analog_matrix(weights, side: str, config: SystemConfig | None = None) -> AnalogBfMatrix:
    w = np.asarray(weights, dtype=complex)
    if config is not None and w.shape != (config.n_rf, config.n_e):
        raise ValueError(f"expected weights of shape {(config.n_rf, config.n_e)}, got {w.shape}")
    return AnalogBfMatrix(side, w)


def extract_weights(materialized: np.ndarray, n_rf: int) -> np.ndarray:
    """Inverse of :attr:`AnalogBfMatrix.materialized`."""
    m = np.asarray(materialized)
    n_e = m.shape[0] // n_rf
    if m.shape != (n_rf * n_e, n_rf):
        raise ValueError("materialized matrix has the wrong shape")
    return np.stack([m[i * n_e:(i + 1) * n_e, i] for i in range(n_rf)])


def codebook_matrix(indices, side: str, codebook: LorentzianCodebook) -> AnalogBfMatrix:
    return AnalogBfMatrix(side, codebook.weights[np.asarray(indices)])


def random_codebook_matrix(side: str, config: SystemConfig, codebook: LorentzianCodebook,
                           rng: np.random.Generator) -> AnalogBfMatrix:
    idx = rng.integers(0, codebook.size, size=(config.n_rf, config.n_e))
    return codebook_matrix(idx, side, codebook)


def direction_similarity(u: np.ndarray, w: np.ndarray) -> float:
    """``|u^H w|^2 / (|u|^2 |w|^2)``, 0 for a zero ``w``."""
    nw = np.vdot(w, w).real
    nu = np.vdot(u, u).real
    if nw <= 0 or nu <= 0:
        return 0.0
    return float(abs(np.vdot(u, w)) ** 2 / (nu * nw))


def fit_direction(u, codebook: LorentzianCodebook, n_phase: int = 64, n_mag: int = 17,
                  span: float = 8.0, starts: int = 8, sweeps: int = 3) -> np.ndarray:
    """Codeword vector whose direction best matches ``u`` up to a complex scale.

    Candidate scales ``c`` are scanned over ``n_phase`` phases and ``n_mag``
    magnitudes around the least-squares fit of ``|c u|`` onto the weight
    circle; every ``c u`` is projected entrywise. The best ``starts``
    distinct projections are refined by greedy per-entry ascent. Returns
    the codeword indices.
    """
    u = np.asarray(u, dtype=complex).ravel()
    if not np.any(np.abs(u) > 0):
        return np.full(u.shape, codebook.zero_phase_index)
    mag2 = np.abs(u) ** 2
    rot = np.exp(2j * np.pi * np.arange(n_phase) / n_phase)[:, None] * u[None, :]
    # |c u_n|^2 = Im(c u_n) on the circle -> least-squares |c| per phase
    c = np.abs(rot.imag @ mag2) / np.sum(mag2 ** 2)
    c = np.where(c > 0, c, 1.0 / np.sqrt(mag2.max()))
    scales = c[:, None] * np.geomspace(1.0 / span, span, n_mag)[None, :]
    cand = (scales[:, :, None] * rot[:, None, :]).reshape(-1, u.size)
    idx = codebook.nearest_indices(cand)
    w = codebook.weights[idx]
    energy = np.sum(np.abs(w) ** 2, axis=1)
    sim = np.abs(w @ u.conj()) ** 2 / np.where(energy > 0, energy, np.inf)
    seen: set = set()
    best_idx, best_val = None, -1.0
    for o in np.argsort(-sim, kind="stable"):
        key = idx[o].tobytes()
        if key in seen:
            continue
        seen.add(key)
        cur = improve_direction(u, idx[o], codebook, sweeps)
        val = direction_similarity(u, codebook.weights[cur])
        if val > best_val + 1e-15:
            best_idx, best_val = cur, val
        if len(seen) >= starts:
            break
    return best_idx


def improve_direction(u: np.ndarray, idx: np.ndarray, codebook: LorentzianCodebook,
                      sweeps: int = 3) -> np.ndarray:
    """Greedy per-entry ascent of ``|u^H w|^2 / |w|^2`` over the codebook."""
    idx = np.array(idx, dtype=int)
    cw = codebook.weights
    w = cw[idx]
    for _ in range(sweeps):
        changed = False
        for n in range(len(u)):
            inner = np.vdot(u, w) - np.conj(u[n]) * w[n]
            energy = np.vdot(w, w).real - abs(w[n]) ** 2
            num = np.abs(inner + np.conj(u[n]) * cw) ** 2
            den = energy + np.abs(cw) ** 2
            with np.errstate(divide="ignore", invalid="ignore"):
                vals = np.where(den > 0, num / den, 0.0)
            k = int(np.argmax(vals))
            if vals[k] > vals[idx[n]] * (1 + 1e-12) + 1e-300:
                idx[n] = k
                w[n] = cw[k]
                changed = True
        if not changed:
            break
    return idx
