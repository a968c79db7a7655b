import math

import numpy as np
import pytest

from fdisac import (Fim, SystemConfig, build_channels, channel_partials, fim_assemble,
                    make_codebook, make_scenario, noise_covariance, peb, symbol_block)
from fdisac.channel import reflection_from_points
from fdisac.codebook import AnalogBfMatrix, random_codebook_matrix
from fdisac.fim import fim_fast, noise_covariance_direct
from fdisac.harness import range_interval
from fdisac.signals import BfConfiguration, scale_to_power


def random_points(rng, cfg, k):
    lo, hi = range_interval(cfg)
    return np.column_stack([rng.uniform(lo, hi, k), rng.uniform(0.2, math.pi - 0.2, k),
                            rng.uniform(0.1, math.pi - 0.1, k)])


def fd_partials(pts, cfg):
    """Central differences of the unit-gain reflection channel."""
    out = []
    for k in range(len(pts)):
        for p in range(3):
            h = 1e-6 * max(1.0, abs(pts[k, p]))
            up, dn = pts.copy(), pts.copy()
            up[k, p] += h
            dn[k, p] -= h
            out.append((reflection_from_points(up, cfg) - reflection_from_points(dn, cfg)) / (2 * h))
    return np.array(out)


def test_partials_finite_difference(rng):
    cfg = SystemConfig()
    pts = random_points(rng, cfg, 2)
    ana = channel_partials(pts, cfg)
    num = fd_partials(pts, cfg)
    for a, b in zip(ana, num):
        assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(b)


def test_partials_only_owner_target(rng):
    cfg = SystemConfig(n_rf=2, n_e=4)
    pts = random_points(rng, cfg, 2)
    both = channel_partials(pts, cfg)
    np.testing.assert_allclose(both[:3], channel_partials(pts[:1], cfg))
    np.testing.assert_allclose(both[3:], channel_partials(pts[1:], cfg))


def test_partial_single_element_range():
    cfg = SystemConfig(n_rf=1, n_e=1, d_p=1e-12, absorption_coeff=0.0)
    r = 0.3
    lam = cfg.wavelength
    alpha = lam / (4 * math.pi * r)
    phase = np.exp(2j * math.pi * r / lam)
    # H = a_rx a_tx^H collapses to alpha^2 with the phases cancelling
    d = channel_partials([(r, 1.0, 1.0)], cfg)[0, 0, 0]
    a = alpha * phase
    da = (-1 / r + 2j * math.pi / lam) * a
    assert d == pytest.approx(da * np.conj(a) + a * np.conj(da), rel=1e-8)
    assert d == pytest.approx(-2 * alpha ** 2 / r, rel=1e-8)


def test_partial_azimuth_vanishes_at_pole():
    cfg = SystemConfig(n_rf=2, n_e=3)
    d = channel_partials([(0.2, 0.0, 1.1)], cfg)
    assert np.max(np.abs(d[2])) <= 1e-15 * np.max(np.abs(d[0]))


def _design(rng, cfg, pts):
    sc = make_scenario(pts, np.ones(len(pts)), list(range(len(pts))))
    ch = build_channels(sc, cfg)
    cb = make_codebook(4)
    w_tx = random_codebook_matrix("tx", cfg, cb, rng)
    w_rx = random_codebook_matrix("rx", cfg, cb, rng)
    u = len(pts)
    v = rng.standard_normal((cfg.n_rf, u)) + 1j * rng.standard_normal((cfg.n_rf, u))
    return ch, BfConfiguration(w_tx, w_rx, scale_to_power(w_tx, v, ch, cfg.p_max))


def test_noise_covariance_paths(rng):
    cfg = SystemConfig(n_rf=3, n_e=5)
    ch, bf = _design(rng, cfg, random_points(rng, cfg, 1))
    a = noise_covariance(bf.w_rx, ch.p_rx, cfg)
    b = noise_covariance_direct(bf.w_rx, ch.p_rx, cfg)
    assert np.max(np.abs(a - b)) <= 1e-13 * np.max(np.abs(b))


def test_noise_covariance_examples():
    cfg = SystemConfig(n_rf=2, n_e=3, waveguide_alpha=0.0, waveguide_beta=0.0)
    ch = build_channels(make_scenario([(0.1, 1, 1)]), cfg)
    w = np.full((2, 3), 1 / math.sqrt(3), complex)
    np.testing.assert_allclose(noise_covariance(AnalogBfMatrix("rx", w), ch.p_rx, cfg),
                               cfg.noise_power * np.eye(2), rtol=1e-13)
    w2 = w.copy()
    w2[1] *= 2
    r2 = noise_covariance(AnalogBfMatrix("rx", w2), ch.p_rx, cfg)
    assert r2[1, 1].real == pytest.approx(4 * cfg.noise_power, rel=1e-13)
    assert r2[0, 0].real == pytest.approx(cfg.noise_power, rel=1e-13)
    with pytest.raises(ValueError):
        noise_covariance(AnalogBfMatrix("rx", np.zeros((2, 3))), ch.p_rx, cfg)


def test_fim_scaling(rng):
    cfg = SystemConfig(n_rf=2, n_e=4)
    pts = random_points(rng, cfg, 2)
    ch, bf = _design(rng, cfg, pts)
    parts = channel_partials(pts, cfg)
    base = fim_assemble(bf, parts, ch, cfg).matrix
    np.testing.assert_allclose(fim_assemble(bf, parts, ch, cfg.with_(t_slots=2 * cfg.t_slots)).matrix,
                               2 * base, rtol=1e-12)
    np.testing.assert_allclose(fim_assemble(bf, parts, ch, cfg.with_(noise_power=2 * cfg.noise_power)).matrix,
                               base / 2, rtol=1e-12)
    np.testing.assert_allclose(fim_fast(bf, pts, ch, cfg).matrix, base, rtol=1e-10,
                               atol=1e-12 * np.abs(base).max())


def test_fim_explicit_mean_oracle(rng):
    cfg = SystemConfig(n_rf=2, n_e=4, t_slots=8)
    pts = random_points(rng, cfg, 1)
    ch, bf = _design(rng, cfg, pts)
    s = symbol_block(1, 8, rng).s
    front = bf.w_rx.materialized.conj().T @ ch.p_rx.matrix.conj().T
    back = ch.p_tx.matrix @ bf.w_tx.materialized @ bf.v @ s
    rn = cfg.noise_power * np.sum(np.abs(ch.p_rx.matrix @ bf.w_rx.materialized) ** 2, axis=0)

    def mu(p):
        return (front @ reflection_from_points(p, cfg) @ back).ravel()

    grads = []
    for q in range(3):
        h = 1e-6 * max(1.0, abs(pts[0, q]))
        up, dn = pts.copy(), pts.copy()
        up[0, q] += h
        dn[0, q] -= h
        grads.append((mu(up) - mu(dn)) / (2 * h))
    w = np.repeat(1 / rn, 8)
    oracle = np.array([[2 * np.real(np.sum(gi.conj() * w * gj)) for gj in grads] for gi in grads])
    got = fim_assemble(bf, channel_partials(pts, cfg), ch, cfg).matrix
    np.testing.assert_allclose(got, oracle, rtol=1e-5, atol=1e-6 * np.abs(oracle).max())


def test_peb_examples(rng):
    for u in (1, 2):
        res = peb(Fim(np.eye(3 * u)))
        assert res.peb_full == pytest.approx(math.sqrt(3 * u))
    d = np.diag(rng.uniform(0.5, 3.0, 6))
    res = peb(Fim(d))
    assert res.peb_full == pytest.approx(res.peb_diag, rel=1e-12)
    a = rng.standard_normal((6, 6))
    spd = a @ a.T + 0.1 * np.eye(6)
    res = peb(Fim(spd))
    assert res.peb_full ** 2 == pytest.approx(np.trace(np.linalg.inv(spd)), rel=1e-9)
    assert res.peb_full ** 2 >= 9 * 4 / np.trace(spd)
    assert res.trace_bound == pytest.approx(36 / np.trace(spd))
    assert res.peb_full >= res.peb_diag


def test_peb_singular():
    m = np.diag([1.0, 1.0, 0.0])
    res = peb(Fim(m))
    assert res.singular and not res.identifiable and math.isinf(res.peb_full)
    assert res.null_space.shape == (3, 1)
    assert abs(res.null_space[2, 0]) == pytest.approx(1.0)


def test_peb_power_scaling(rng):
    cfg = SystemConfig(n_rf=2, n_e=4)
    pts = random_points(rng, cfg, 2)
    ch, bf = _design(rng, cfg, pts)
    p1 = peb(fim_fast(bf, pts, ch, cfg)).peb_full
    bf4 = BfConfiguration(bf.w_tx, bf.w_rx, 2 * bf.v)
    p4 = peb(fim_fast(bf4, pts, ch, cfg)).peb_full
    assert p4 == pytest.approx(p1 / 2, rel=1e-9)
