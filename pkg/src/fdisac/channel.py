"""Near-field THz channel synthesis for the TX/RX DMA panels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import (RX, SIDES, TX, Scenario, SphericalPosition, SystemConfig,
                       element_coordinates, spherical_to_cartesian, wavelength)


@dataclass(frozen=True)
class PropagationMatrix:
    """Diagonal in-microstrip propagation model ``exp(-rho (alpha + j beta))``."""

    side: str
    diag: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.diag)

    def block(self, i: int, n_e: int) -> np.ndarray:
        """Diagonal entries of microstrip ``i`` (0-based)."""
        return self.diag[i * n_e:(i + 1) * n_e]


@dataclass(frozen=True)
class ChannelSet:
    h_r: np.ndarray
    h_dl: np.ndarray  # (U, N), one row per user
    h_si: np.ndarray
    p_tx: PropagationMatrix
    p_rx: PropagationMatrix


def attenuation(r, config: SystemConfig):
    """Free-space spreading times molecular absorption, ``lambda/(4 pi r) e^{-k r/2}``."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("attenuation is defined for positive distances only")
    lam = wavelength(config)
    out = lam / (4 * np.pi * r) * np.exp(-config.absorption_coeff * r / 2)
    return out if out.ndim else float(out)


def _as_points(pos) -> np.ndarray:
    if isinstance(pos, SphericalPosition):
        return np.array(pos.as_tuple(), dtype=float)
    return np.asarray(pos, dtype=float)


def response_vectors(points, config: SystemConfig, side: str) -> np.ndarray:
    """Near-field response ``alpha(d) exp(j 2 pi d / lambda)`` for (..., 3) points.

    Returns shape ``(..., N)``.
    """
    if side not in SIDES:
        raise ValueError(f"side must be 'tx' or 'rx', got {side!r}")
    pts = _as_points(points)
    cart = spherical_to_cartesian(pts[..., 0], pts[..., 1], pts[..., 2])
    diff = cart[..., None, :] - element_coordinates(config, side)
    d = np.sqrt(np.einsum("...k,...k->...", diff, diff))
    if np.any(d <= 0):
        raise ValueError("a target coincides with an array element")
    lam = wavelength(config)
    expo = (-config.absorption_coeff / 2 + 2j * np.pi / lam) * d
    return (lam / (4 * np.pi)) * np.exp(expo) / d


def response_vector(pos, side: str, config: SystemConfig) -> np.ndarray:
    return response_vectors(pos, config, side)


def response_derivatives(points, config: SystemConfig, side: str) -> tuple[np.ndarray, np.ndarray]:
    """Response vectors and their partials w.r.t. ``(r, theta, phi)``.

    Returns ``(a, da)`` with ``a`` of shape ``(..., N)`` and ``da`` of shape
    ``(..., 3, N)``.
    """
    pts = _as_points(points)
    r, th, ph = pts[..., 0], pts[..., 1], pts[..., 2]
    cart = spherical_to_cartesian(r, th, ph)
    st, ct, sp, cp = np.sin(th), np.cos(th), np.sin(ph), np.cos(ph)
    # d(cartesian)/d(r, theta, phi), shape (..., 3 params, 3 coords)
    jac = np.stack([
        np.stack([st * cp, st * sp, ct], axis=-1),
        np.stack([r * ct * cp, r * ct * sp, -r * st], axis=-1),
        np.stack([-r * st * sp, r * st * cp, np.zeros_like(r)], axis=-1),
    ], axis=-2)
    diff = cart[..., None, :] - element_coordinates(config, side)
    d = np.sqrt(np.einsum("...k,...k->...", diff, diff))
    dd = np.einsum("...pk,...nk->...pn", jac, diff) / d[..., None, :]
    k0 = 2 * np.pi / wavelength(config)
    a = attenuation(d, config) * np.exp(1j * k0 * d)
    # d/dd of alpha(d) e^{j k0 d} = (-1/d - kappa/2 + j k0) * a
    slope = (-1.0 / d - config.absorption_coeff / 2 + 1j * k0) * a
    return a, slope[..., None, :] * dd


def dl_channel(pos, config: SystemConfig) -> np.ndarray:
    """Row vector of the DL channel towards a single-antenna user."""
    return response_vectors(pos, config, TX)


def reflection_channel(scenario: Scenario, config: SystemConfig,
                       betas=None) -> np.ndarray:
    """``sum_k beta_k a_RX(k) a_TX(k)^H``."""
    pts = scenario.zeta(users_only=False)
    if betas is None:
        betas = np.array(scenario.reflection_coeffs)
    return reflection_from_points(pts, config, betas)


def reflection_from_points(points, config: SystemConfig, betas=None) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    a_rx = response_vectors(pts, config, RX)
    a_tx = response_vectors(pts, config, TX)
    b = np.ones(len(pts), complex) if betas is None else np.asarray(betas, complex)
    return np.einsum("k,km,kq->mq", b, a_rx, a_tx.conj())


def si_channel(config: SystemConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Line-of-sight SI between every RX element (row) and TX element (column).

    The model is deterministic; ``rng`` is accepted for interface symmetry
    with stochastic SI models and is not consumed.
    """
    rx = element_coordinates(config, RX)
    tx = element_coordinates(config, TX)
    d = np.linalg.norm(rx[:, None, :] - tx[None, :, :], axis=-1)
    k0 = 2 * np.pi / wavelength(config)
    return config.si_gain * attenuation(d, config) * np.exp(1j * k0 * d)


def propagation_matrix(side: str, config: SystemConfig) -> PropagationMatrix:
    if side not in SIDES:
        raise ValueError(f"side must be 'tx' or 'rx', got {side!r}")
    rho = np.tile(np.arange(config.n_e) * config.d_e, config.n_rf)
    diag = np.exp(-rho * (config.waveguide_alpha + 1j * config.waveguide_beta))
    return PropagationMatrix(side, diag)


def build_channels(scenario: Scenario, config: SystemConfig) -> ChannelSet:
    return ChannelSet(
        h_r=reflection_channel(scenario, config),
        h_dl=np.atleast_2d(dl_channel(scenario.zeta(users_only=True), config)),
        h_si=si_channel(config),
        p_tx=propagation_matrix(TX, config),
        p_rx=propagation_matrix(RX, config),
    )


def perturbed_si(h_si: np.ndarray, relative_error: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Node-side SI estimate with elementwise relative complex Gaussian error."""
    if relative_error == 0:
        return h_si.copy()
    g = (rng.standard_normal(h_si.shape) + 1j * rng.standard_normal(h_si.shape)) / np.sqrt(2)
    return h_si * (1 + relative_error * g)
