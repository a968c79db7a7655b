import itertools
import math

import numpy as np
import pytest

from fdisac import (SystemConfig, block_diagonalization, dl_channel, make_codebook,
                    select_tx_codewords, sum_rate)
from fdisac.channel import propagation_matrix
from fdisac.codebook import AnalogBfMatrix, random_codebook_matrix
from fdisac.comm_opt import BdInfeasibleError, design_comm, effective_dl
from fdisac.harness import range_interval
from fdisac.scenario import TX


def users(rng, cfg, u):
    lo, hi = range_interval(cfg)
    pts = np.column_stack([rng.uniform(lo, hi, u), np.full(u, math.radians(30)),
                           rng.uniform(0.2, math.pi - 0.2, u)])
    return np.atleast_2d(dl_channel(pts, cfg))


def rand_c(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def test_sum_rate_examples(rng):
    cfg = SystemConfig(n_rf=2, n_e=3)
    ptx = propagation_matrix(TX, cfg)
    w = random_codebook_matrix(TX, cfg, make_codebook(4), rng)
    h = rand_c(rng, 2, 6)
    assert sum_rate(w, np.zeros((2, 2)), h, ptx, cfg) == 0.0
    g = effective_dl(w, h[:1], ptx)[0]
    v = g.conj()[:, None] / np.linalg.norm(g) ** 2 * math.sqrt(cfg.noise_power)
    assert sum_rate(w, v, h[:1], ptx, cfg) == pytest.approx(1.0, rel=1e-12)


def test_sum_rate_scalar_oracle(rng):
    cfg = SystemConfig(n_rf=3, n_e=2)
    ptx = propagation_matrix(TX, cfg)
    w = random_codebook_matrix(TX, cfg, make_codebook(4), rng)
    h = rand_c(rng, 2, 6) * 1e-5
    v = rand_c(rng, 3, 2)
    pw = ptx.matrix @ w.materialized
    plain, sinr = 0.0, 0.0
    for u in range(2):
        s = abs(h[u] @ pw @ v[:, u]) ** 2
        i = sum(abs(h[u] @ pw @ v[:, q]) ** 2 for q in range(2) if q != u)
        plain += math.log2(1 + s / cfg.noise_power)
        sinr += math.log2(1 + s / (cfg.noise_power + i))
    assert sum_rate(w, v, h, ptx, cfg) == pytest.approx(plain, rel=1e-12)
    assert sum_rate(w, v, h, ptx, cfg, interference=True) == pytest.approx(sinr, rel=1e-12)


def test_sum_rate_increasing_in_power(rng):
    cfg = SystemConfig()
    ptx = propagation_matrix(TX, cfg)
    h = users(rng, cfg, 2)
    w = select_tx_codewords(h, ptx, make_codebook(cfg.codebook_bits), cfg)
    rates = [sum_rate(w, block_diagonalization(w, h, ptx, cfg.with_(p_max=p)), h, ptx, cfg)
             for p in (1e-5, 1e-4, 1e-3, 1e-2)]
    assert np.all(np.diff(rates) > 0)


def test_select_codewords_exhaustive_small():
    cfg = SystemConfig(n_rf=1, n_e=3, codebook_bits=3)
    cb = make_codebook(3)
    ptx = propagation_matrix(TX, cfg)
    rng = np.random.default_rng(21)
    all_w = np.array(list(itertools.product(cb.weights, repeat=3)))
    for _ in range(20):
        h = rand_c(rng, 1, 3)
        g = h[0] * ptx.diag
        w = select_tx_codewords(h, ptx, cb, cfg)
        got = abs(g @ w.weights[0]) ** 2
        best = np.max(np.abs(all_w @ g) ** 2)
        assert got >= 0.98 * best


def test_select_codewords_gain_bounds(rng):
    cfg = SystemConfig(n_rf=1, n_e=4)
    cb = make_codebook(cfg.codebook_bits)
    ptx = propagation_matrix(TX, cfg)
    for _ in range(10):
        h = rand_c(rng, 1, 4)
        g = h[0] * ptx.diag
        gain = abs(g @ select_tx_codewords(h, ptx, cb, cfg).weights[0])
        # |w| <= 1 caps the gain; a common half-circle rotation guarantees a quarter of it
        assert gain <= np.sum(np.abs(g)) + 1e-12
        assert gain >= 0.25 * np.sum(np.abs(g))


def test_select_codewords_zero_channel():
    cfg = SystemConfig(n_rf=2, n_e=3)
    cb = make_codebook(4)
    w = select_tx_codewords(np.zeros((1, 6)), propagation_matrix(TX, cfg), cb, cfg)
    np.testing.assert_array_equal(w.weights, np.full((2, 3), cb.weights[0]))


def test_bd_single_user(rng):
    cfg = SystemConfig(n_rf=3, n_e=2)
    ptx = propagation_matrix(TX, cfg)
    w = random_codebook_matrix(TX, cfg, make_codebook(4), rng)
    h = rand_c(rng, 1, 6)
    v = block_diagonalization(w, h, ptx, cfg)
    g = effective_dl(w, h, ptx)[0]
    cos = abs(np.vdot(g.conj(), v[:, 0])) / (np.linalg.norm(g) * np.linalg.norm(v))
    assert cos == pytest.approx(1.0, abs=1e-12)


def test_bd_orthogonal_users():
    cfg = SystemConfig(n_rf=2, n_e=1, waveguide_alpha=0.0, waveguide_beta=0.0)
    ptx = propagation_matrix(TX, cfg)
    w = AnalogBfMatrix(TX, np.ones((2, 1)))
    h = np.array([[1.0 + 1j, 0.0], [0.0, 2.0]])
    v = block_diagonalization(w, h, ptx, cfg)
    assert abs(v[1, 0]) < 1e-15 and abs(v[0, 1]) < 1e-15
    assert np.linalg.norm(v[:, 0]) ** 2 == pytest.approx(cfg.p_max / 2)


def test_bd_leakage_power_projector(rng):
    cfg = SystemConfig(n_rf=4, n_e=16)
    ptx = propagation_matrix(TX, cfg)
    h = users(rng, cfg, 2)
    w = select_tx_codewords(h, ptx, make_codebook(cfg.codebook_bits), cfg)
    v = block_diagonalization(w, h, ptx, cfg)
    g = effective_dl(w, h, ptx)
    m = np.abs(g @ v)
    assert max(m[0, 1], m[1, 0]) < 1e-10 * m.diagonal().max()
    x = ptx.diag[:, None] * w.materialized @ v
    assert np.vdot(x, x).real == pytest.approx(cfg.p_max, rel=1e-9)
    for u in range(2):
        other = np.delete(g, u, axis=0)
        proj = np.eye(4) - np.linalg.pinv(other) @ other
        assert m[u, u] / np.linalg.norm(v[:, u]) == pytest.approx(np.linalg.norm(g[u] @ proj), rel=1e-9)


def test_bd_infeasible(rng):
    cfg = SystemConfig(n_rf=2, n_e=2)
    ptx = propagation_matrix(TX, cfg)
    w = random_codebook_matrix(TX, cfg, make_codebook(4), rng)
    with pytest.raises(BdInfeasibleError):
        block_diagonalization(w, rand_c(rng, 3, 4), ptx, cfg)
    h = rand_c(rng, 1, 4)
    with pytest.raises(BdInfeasibleError):
        block_diagonalization(w, np.vstack([h, 2j * h]), ptx, cfg)


def test_design_comm(rng):
    cfg = SystemConfig()
    ptx = propagation_matrix(TX, cfg)
    h = users(rng, cfg, 2)
    d = design_comm(h, ptx, make_codebook(cfg.codebook_bits), cfg)
    assert d.w_tx_c.in_codebook()
    x = ptx.diag[:, None] * d.w_tx_c.materialized @ d.v_c
    assert np.vdot(x, x).real <= cfg.p_max * (1 + 1e-9)
    assert d.sum_rate == pytest.approx(sum_rate(d.w_tx_c, d.v_c, h, ptx, cfg))
