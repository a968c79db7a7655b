"""System configuration, target geometry and element-to-target distances.

Panel convention
----------------
Both DMA panels lie in the ``y = 0`` plane. Microstrip ``i`` of the TX panel
sits at ``x = -(d_p/2 + (i-1) d_rf)`` and the RX panel mirrors it at
``x = +(d_p/2 + (i-1) d_rf)``. Element ``n`` of every microstrip sits at
``z = (n-1) d_e``. Targets are given in spherical coordinates about the
origin (range, elevation from +z, azimuth from +x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

TX = "tx"
RX = "rx"
SIDES = (TX, RX)


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def watts_to_dbm(watts: float) -> float:
    return 10.0 * math.log10(watts) + 30.0


def thermal_noise_dbm(bandwidth: float) -> float:
    """Noise floor -174 dBm/Hz integrated over ``bandwidth``."""
    return -174.0 + 10.0 * math.log10(bandwidth)


@dataclass(frozen=True)
class SystemConfig:
    """Physical and algorithmic constants of the full-duplex node.

    Powers are in watts, lengths in meters and angles in radians. Spacings
    left as ``None`` default to half a wavelength.
    """

    carrier_frequency: float = 120e9
    bandwidth: float = 150e3
    n_rf: int = 4
    n_e: int = 16
    d_e: float | None = None
    d_rf: float | None = None
    d_p: float = 0.1
    p_max: float = dbm_to_watts(0.0)
    t_slots: int = 200
    noise_power: float | None = None
    codebook_bits: int = 10
    absorption_coeff: float = 0.0033
    waveguide_alpha: float = 0.0
    waveguide_beta: float | None = None
    gamma_si: float | None = None
    gamma_s: float = math.inf
    gamma_s_fraction: float | None = 0.5
    si_gain: float = 1.0
    si_estimation_error: float = 0.0
    rng_seed: int = 0
    grid_resolution_xi_rho: float = 0.1
    # sensing-design solver knobs
    crb_tol: float = 1e-6
    crb_max_iter: int = 50
    fact_tol: float = 1e-4
    fact_max_iter: int = 30

    def __post_init__(self) -> None:
        lam = SPEED_OF_LIGHT / self.carrier_frequency if self.carrier_frequency > 0 else None
        if lam is not None:
            if self.d_e is None:
                object.__setattr__(self, "d_e", lam / 2)
            if self.d_rf is None:
                object.__setattr__(self, "d_rf", lam / 2)
            if self.waveguide_beta is None:
                object.__setattr__(self, "waveguide_beta", 2 * math.pi / lam)
        if self.noise_power is None and self.bandwidth > 0:
            object.__setattr__(self, "noise_power",
                               dbm_to_watts(thermal_noise_dbm(self.bandwidth)))
        if self.gamma_si is None and self.noise_power is not None:
            object.__setattr__(self, "gamma_si", self.noise_power)
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.carrier_frequency > 0, "carrier_frequency must be > 0"),
            (self.bandwidth > 0, "bandwidth must be > 0"),
            (self.n_rf >= 1, "n_rf must be >= 1"),
            (self.n_e >= 1, "n_e must be >= 1"),
            (self.d_e is not None and self.d_e > 0, "d_e must be > 0"),
            (self.d_rf is not None and self.d_rf > 0, "d_rf must be > 0"),
            (self.d_p > 0, "d_p must be > 0"),
            (self.p_max > 0, "p_max must be > 0"),
            (self.t_slots >= 1, "t_slots must be >= 1"),
            (self.noise_power is not None and self.noise_power > 0,
             "noise_power must be > 0"),
            (self.codebook_bits >= 1, "codebook_bits must be >= 1"),
            (self.absorption_coeff >= 0, "absorption_coeff must be >= 0"),
            (self.waveguide_alpha >= 0, "waveguide_alpha must be >= 0"),
            (self.gamma_si is not None and self.gamma_si >= 0, "gamma_si must be >= 0"),
            (self.gamma_s > 0, "gamma_s must be > 0"),
            (self.gamma_s_fraction is None or 0.0 <= self.gamma_s_fraction <= 1.0,
             "gamma_s_fraction must lie in [0, 1]"),
            (self.si_gain >= 0, "si_gain must be >= 0"),
            (self.si_estimation_error >= 0, "si_estimation_error must be >= 0"),
            (0 < self.grid_resolution_xi_rho <= 1, "grid step must lie in (0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def n(self) -> int:
        return self.n_rf * self.n_e

    @property
    def wavelength(self) -> float:
        return wavelength(self)

    @property
    def aperture(self) -> float:
        """Length of one microstrip, the aperture used for near-field limits."""
        return max(self.n_e - 1, 1) * self.d_e

    def with_(self, **changes) -> "SystemConfig":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class SphericalPosition:
    r: float
    theta: float
    phi: float

    def __post_init__(self) -> None:
        if not self.r > 0:
            raise ValueError(f"range must be positive, got {self.r}")
        if not 0.0 <= self.theta <= math.pi:
            raise ValueError(f"elevation must lie in [0, pi], got {self.theta}")

    def cartesian(self) -> np.ndarray:
        return spherical_to_cartesian(self.r, self.theta, self.phi)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.r, self.theta, self.phi)


@dataclass(frozen=True)
class Scenario:
    """K point targets, their reflection coefficients and the DL users."""

    targets: tuple[SphericalPosition, ...]
    reflection_coeffs: tuple[complex, ...]
    user_indices: tuple[int, ...] = field(default=(0,))

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "reflection_coeffs",
                           tuple(complex(b) for b in self.reflection_coeffs))
        object.__setattr__(self, "user_indices", tuple(int(u) for u in self.user_indices))
        k = len(self.targets)
        if k < 1:
            raise ValueError("scenario needs at least one target")
        if len(self.reflection_coeffs) != k:
            raise ValueError("one reflection coefficient per target is required")
        for b in self.reflection_coeffs:
            if abs(abs(b) - 1.0) > 1e-9:
                raise ValueError(f"reflection coefficients must have unit modulus, got {b}")
        u = self.user_indices
        if len(u) < 1:
            raise ValueError("at least one DL user is required")
        if len(u) > k:
            raise ValueError(f"U={len(u)} users exceed K={k} targets")
        if len(set(u)) != len(u):
            raise ValueError("duplicate user indices")
        if any(i < 0 or i >= k for i in u):
            raise ValueError("user index out of range")

    @property
    def k(self) -> int:
        return len(self.targets)

    @property
    def u(self) -> int:
        return len(self.user_indices)

    @property
    def users(self) -> tuple[SphericalPosition, ...]:
        return tuple(self.targets[i] for i in self.user_indices)

    def zeta(self, users_only: bool = True) -> np.ndarray:
        """Stacked ``(r, theta, phi)`` rows, users only by default."""
        pts = self.users if users_only else self.targets
        return np.array([p.as_tuple() for p in pts], dtype=float)


def wavelength(config: SystemConfig) -> float:
    return SPEED_OF_LIGHT / config.carrier_frequency


def spherical_to_cartesian(r, theta, phi) -> np.ndarray:
    r, theta, phi = np.broadcast_arrays(np.asarray(r, float), np.asarray(theta, float),
                                        np.asarray(phi, float))
    st = np.sin(theta)
    return np.stack([r * st * np.cos(phi), r * st * np.sin(phi), r * np.cos(theta)], axis=-1)


def panel_x_offsets(config: SystemConfig, side: str) -> np.ndarray:
    """Signed x coordinate of every microstrip of one panel."""
    if side not in SIDES:
        raise ValueError(f"side must be 'tx' or 'rx', got {side!r}")
    off = config.d_p / 2 + np.arange(config.n_rf) * config.d_rf
    return -off if side == TX else off


def element_coordinates(config: SystemConfig, side: str) -> np.ndarray:
    """(N, 3) element positions ordered as ``(i-1) N_E + n``.

    The result is cached per configuration and returned read-only.
    """
    key = (config, side)
    if key not in _COORD_CACHE:
        coords = _element_coordinates(config, side)
        coords.flags.writeable = False
        _COORD_CACHE[key] = coords
    return _COORD_CACHE[key]


_COORD_CACHE: dict = {}


def _element_coordinates(config: SystemConfig, side: str) -> np.ndarray:
    xs = panel_x_offsets(config, side)
    zs = np.arange(config.n_e) * config.d_e
    xx, zz = np.meshgrid(xs, zs, indexing="ij")
    return np.stack([xx.ravel(), np.zeros(xx.size), zz.ravel()], axis=-1)


def element_distance(pos: SphericalPosition, i: int, n: int, config: SystemConfig,
                     side: str = TX) -> float:
    """Distance from target ``pos`` to element ``n`` of microstrip ``i`` (1-based)."""
    if not 1 <= i <= config.n_rf or not 1 <= n <= config.n_e:
        raise IndexError(f"element ({i}, {n}) outside a {config.n_rf}x{config.n_e} panel")
    sign = 1.0 if side == TX else -1.0
    r, th, ph = pos.r, pos.theta, pos.phi
    dx = r * math.sin(th) * math.cos(ph) + sign * (config.d_p / 2 + (i - 1) * config.d_rf)
    dy = r * math.sin(th) * math.sin(ph)
    dz = r * math.cos(th) - (n - 1) * config.d_e
    return math.sqrt(dx * dx + dy * dy + dz * dz)


def distances(points: np.ndarray, config: SystemConfig, side: str) -> np.ndarray:
    """Vectorised distances between (..., 3) spherical rows and all panel elements.

    Returns an array of shape ``(..., N)``.
    """
    pts = np.asarray(points, dtype=float)
    cart = spherical_to_cartesian(pts[..., 0], pts[..., 1], pts[..., 2])
    diff = cart[..., None, :] - element_coordinates(config, side)
    return np.sqrt(np.einsum("...k,...k->...", diff, diff))


def fraunhofer_distance(aperture: float, config: SystemConfig) -> float:
    if aperture <= 0:
        raise ValueError("aperture must be positive")
    return 2.0 * aperture ** 2 / wavelength(config)


def fresnel_inner_distance(aperture: float, config: SystemConfig) -> float:
    """Inner boundary 0.62 sqrt(D^3/lambda) of the radiating near field."""
    return 0.62 * math.sqrt(aperture ** 3 / wavelength(config))


def make_scenario(positions: Sequence[Sequence[float]], betas: Sequence[complex] | None = None,
                  user_indices: Sequence[int] | None = None) -> Scenario:
    """Convenience constructor from ``(r, theta, phi)`` triples."""
    targets = tuple(SphericalPosition(*map(float, p)) for p in positions)
    if betas is None:
        betas = [1.0 + 0j] * len(targets)
    if user_indices is None:
        user_indices = [0]
    return Scenario(targets, tuple(betas), tuple(user_indices))
