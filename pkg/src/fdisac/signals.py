"""Beamformer container, symbol blocks and received-signal synthesis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import ChannelSet
from .codebook import AnalogBfMatrix
from .scenario import SystemConfig


@dataclass(frozen=True)
class BfConfiguration:
    """Analog TX/RX matrices, digital precoder, SI canceller and truncated basis."""

    w_tx: AnalogBfMatrix
    w_rx: AnalogBfMatrix
    v: np.ndarray
    d: np.ndarray | None = None
    f_basis: np.ndarray | None = None
    xi: float = 0.0
    rho: float = 0.0

    def __post_init__(self) -> None:
        n_rf = self.w_tx.n_rf
        if self.d is None:
            object.__setattr__(self, "d", np.zeros((n_rf, n_rf), complex))
        if self.f_basis is None:
            object.__setattr__(self, "f_basis", np.eye(n_rf, dtype=complex))
        if not (0.0 <= self.xi <= 1.0 and 0.0 <= self.rho <= 1.0):
            raise ValueError("combiner weights must lie in [0, 1]")

    @property
    def n_streams(self) -> int:
        return self.v.shape[1]


def rx_front(w_rx: AnalogBfMatrix, channels: ChannelSet) -> np.ndarray:
    """``W_RX^H P_RX^H`` as an ``N_RF x N`` matrix."""
    return (w_rx.materialized * channels.p_rx.diag[:, None]).conj().T


def tx_front(w_tx: AnalogBfMatrix, channels: ChannelSet) -> np.ndarray:
    """``P_TX W_TX`` as an ``N x N_RF`` matrix."""
    return channels.p_tx.diag[:, None] * w_tx.materialized


def transmit_power(w_tx: AnalogBfMatrix, v: np.ndarray, channels: ChannelSet) -> float:
    """``sum_u |P_TX W_TX v_u|^2``."""
    x = tx_front(w_tx, channels) @ v
    return float(np.vdot(x, x).real)


def scale_to_power(w_tx: AnalogBfMatrix, v: np.ndarray, channels: ChannelSet,
                   p_max: float) -> np.ndarray:
    p = transmit_power(w_tx, v, channels)
    if p <= 0:
        return np.zeros_like(v)
    return v * np.sqrt(p_max / p)


def effective_si(bf: BfConfiguration, channels: ChannelSet, h_si: np.ndarray | None = None) -> np.ndarray:
    """``W_RX^H P_RX^H H_SI P_TX W_TX``, N_RF x N_RF."""
    h = channels.h_si if h_si is None else h_si
    return rx_front(bf.w_rx, channels) @ h @ tx_front(bf.w_tx, channels)


@dataclass(frozen=True)
class SymbolBlock:
    """``U x T`` symbols with ``(1/T) S S^H = power * I``."""

    s: np.ndarray
    power: float = 1.0

    @property
    def t_slots(self) -> int:
        return self.s.shape[1]


def symbol_block(n_streams: int, t_slots: int, rng: np.random.Generator,
                 power: float = 1.0) -> SymbolBlock:
    """Scaled partial unitary from the QR factor of a seeded Gaussian matrix."""
    if n_streams > t_slots:
        raise ValueError("need at least as many slots as streams")
    g = rng.standard_normal((t_slots, n_streams)) + 1j * rng.standard_normal((t_slots, n_streams))
    q, _ = np.linalg.qr(g)
    return SymbolBlock(np.sqrt(power * t_slots) * q.T.conj(), power)


def complex_noise(shape, variance: float, rng: np.random.Generator) -> np.ndarray:
    return np.sqrt(variance / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def synthesize_received(bf: BfConfiguration, channels: ChannelSet, symbols: SymbolBlock,
                        rng: np.random.Generator | None, config: SystemConfig,
                        h_r: np.ndarray | None = None) -> np.ndarray:
    """RX-DMA outputs: reflected signal, residual SI after ``D`` and filtered noise."""
    front = rx_front(bf.w_rx, channels)
    back = tx_front(bf.w_tx, channels) @ bf.v
    h = channels.h_r if h_r is None else h_r
    x = bf.v.shape[1]
    s = symbols.s
    if s.shape[0] != x:
        raise ValueError(f"symbol block carries {s.shape[0]} streams, precoder {x}")
    y = front @ h @ back @ s
    si = (effective_si(bf, channels) + bf.d) @ bf.v
    y = y + si @ s
    if rng is not None and config.noise_power > 0:
        n = complex_noise((channels.p_rx.diag.size, s.shape[1]), config.noise_power, rng)
        y = y + front @ n
    return y
