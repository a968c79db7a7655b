import math

import numpy as np
import pytest

from fdisac import (SearchGrid, SystemConfig, build_channels, estimate_targets, make_codebook,
                    make_scenario, mle_objective, reconstruct_virtual_channel, rmse,
                    sample_covariance, symbol_block, synthesize_received)
from fdisac.codebook import random_codebook_matrix
from fdisac.estimation import (SampleCovariance, association, probe_bound, probe_context,
                               projection_objective, projector)
from fdisac.harness import range_interval
from fdisac.signals import BfConfiguration, scale_to_power

SMALL = SystemConfig(n_rf=2, n_e=8, p_max=1e-2, si_gain=0.0)


def small_grid(cfg=SMALL, n_r=12, n_theta=12, n_phi=24):
    lo, hi = range_interval(cfg)
    return SearchGrid(lo, hi, n_r=n_r, n_theta=n_theta, n_phi=n_phi,
                      theta_range=(0.2, math.pi - 0.2), phi_range=(0.1, math.pi - 0.1),
                      coarse_shape=(n_r, n_theta, n_phi))


def grid_points(grid):
    r, th, ph = grid.axes()
    rr, tt, pp = np.meshgrid(r, th, ph, indexing="ij")
    return np.stack([rr.ravel(), tt.ravel(), pp.ravel()], axis=-1)


def test_sample_covariance_examples(rng):
    assert not np.any(sample_covariance(np.zeros((2, 5))).matrix)
    y = rng.standard_normal((3, 1)) + 1j * rng.standard_normal((3, 1))
    np.testing.assert_allclose(sample_covariance(y).matrix, y @ y.conj().T)
    y = rng.standard_normal((2, 50)) + 1j * rng.standard_normal((2, 50))
    ref = np.zeros((2, 2), complex)
    for i in range(2):
        for j in range(2):
            for t in range(50):
                ref[i, j] += y[i, t] * np.conj(y[j, t])
    got = sample_covariance(y)
    np.testing.assert_allclose(got.matrix, ref / 50, rtol=1e-13)
    assert got.t_slots == 50
    np.testing.assert_array_equal(got.matrix, got.matrix.conj().T)


def _bf(rng, cfg, ch, u=2):
    cb = make_codebook(4)
    w_tx = random_codebook_matrix("tx", cfg, cb, rng)
    w_rx = random_codebook_matrix("rx", cfg, cb, rng)
    v = rng.standard_normal((cfg.n_rf, u)) + 1j * rng.standard_normal((cfg.n_rf, u))
    return BfConfiguration(w_tx, w_rx, scale_to_power(w_tx, v, ch, cfg.p_max))


def test_reconstruct_matches_noiseless_mean(rng):
    cfg = SystemConfig(n_rf=2, n_e=4, si_gain=0.0)
    pts = [(0.05, 1.0, 1.3), (0.08, 1.2, 2.0)]
    ch = build_channels(make_scenario(pts, [1, 1], [0, 1]), cfg)
    bf = _bf(rng, cfg, ch)
    s = symbol_block(2, 8, rng)
    y = synthesize_received(bf, ch, s, None, cfg)
    np.testing.assert_allclose(reconstruct_virtual_channel(pts, bf, ch, cfg) @ s.s, y,
                               atol=1e-12 * np.abs(y).max())
    one = reconstruct_virtual_channel(pts[:1], bf, ch, cfg)
    sv = np.linalg.svd(one, compute_uv=False)
    assert sv[1] <= 1e-10 * sv[0]
    a = bf.w_rx.materialized.conj().T @ ch.p_rx.matrix.conj().T
    b = ch.p_tx.matrix @ bf.w_tx.materialized @ bf.v
    np.testing.assert_allclose(reconstruct_virtual_channel(pts, bf, ch, cfg), a @ ch.h_r @ b,
                               atol=1e-12 * np.abs(y).max())


def test_projection_objective_examples(rng):
    h = rng.standard_normal((6, 2)) + 1j * rng.standard_normal((6, 2))
    assert projection_objective(h, np.eye(6)).value == pytest.approx(2.0)
    r = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
    r = r @ r.conj().T
    assert projection_objective(h, 3 * r).value == pytest.approx(3 * projection_objective(h, r).value)
    q = projector(h)
    np.testing.assert_allclose(q @ q, q, atol=1e-10)
    np.testing.assert_allclose(q, q.conj().T, atol=1e-10)
    # invariant to invertible mixing of the columns
    m = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    assert projection_objective(h @ m, r).value == pytest.approx(projection_objective(h, r).value)
    res = projection_objective(np.column_stack([h[:, 0], h[:, 0]]), r)
    assert res.regularized


def test_mle_objective_peaks_at_truth():
    cfg = SMALL
    truth = np.array([[0.8 * range_interval(cfg)[1], 1.1, 1.4]])
    ch = build_channels(make_scenario(truth, [1.0]), cfg)
    ctx = probe_context(ch, cfg, make_codebook(cfg.codebook_bits), None)
    r = ctx.covariance()
    top = mle_objective(truth, r, ctx).value
    steps = np.array([0.01, 0.01, 0.01])
    for axis in range(3):
        for sgn in (-2, -1, 1, 2):
            p = truth.copy()
            p[0, axis] += sgn * steps[axis]
            assert mle_objective(p, r, ctx).value < top


def test_noiseless_single_target_exact():
    cfg = SMALL
    grid = small_grid()
    pts = grid_points(grid)
    truth = pts[[len(pts) // 3]]
    ch = build_channels(make_scenario(truth, [np.exp(0.4j)]), cfg)
    ctx = probe_context(ch, cfg, make_codebook(cfg.codebook_bits), None)
    est = estimate_targets(None, ctx, grid, 1)
    np.testing.assert_array_equal(est.estimates, truth)
    # exhaustive scan over the same grid agrees
    vals = np.abs(ctx.signatures(pts) @ ctx.z.conj()) ** 2 / np.sum(np.abs(ctx.signatures(pts)) ** 2, axis=1)
    np.testing.assert_array_equal(pts[np.argmax(vals)], truth[0])
    assert rmse(est, truth) == 0.0


def test_two_targets_high_snr_exhaustive_oracle():
    cfg = SMALL.with_(p_max=1.0)
    grid = small_grid(n_r=8, n_theta=8, n_phi=16)
    pts = grid_points(grid)
    truth = np.array([pts[5 * 8 * 16 + 3 * 16 + 4], pts[2 * 8 * 16 + 5 * 16 + 11]])
    ch = build_channels(make_scenario(truth, [1.0, np.exp(1.0j)], [0]), cfg)
    ctx = probe_context(ch, cfg, make_codebook(cfg.codebook_bits), np.random.default_rng(2))
    est = estimate_targets(None, ctx, grid, 2)

    g = ctx.signatures(pts)
    y = g.conj() @ ctx.z
    n = np.sum(np.abs(g) ** 2, axis=1)
    c = g.conj() @ g.T
    det = n[:, None] * n[None, :] - np.abs(c) ** 2
    num = (n[None, :] * np.abs(y[:, None]) ** 2 + n[:, None] * np.abs(y[None, :]) ** 2
           - 2 * np.real(np.conj(y[:, None]) * c * y[None, :]))
    with np.errstate(divide="ignore", invalid="ignore"):
        obj = np.where(det > 1e-9 * n[:, None] * n[None, :], num / det, -np.inf)
    a, b = np.unravel_index(np.argmax(obj), obj.shape)
    oracle = pts[[a, b]]

    step = np.array([np.diff(ax)[0] for ax in grid.axes()])
    perm, _ = association(est.estimates, truth)
    assert np.all(np.abs(est.estimates[perm] - truth) <= step + 1e-12)
    perm, _ = association(oracle, truth)
    np.testing.assert_allclose(oracle[perm], truth)


def test_zero_signal_returns_first_grid_point():
    cfg = SMALL
    grid = small_grid()
    ch = build_channels(make_scenario([(0.1, 1.0, 1.0)]), cfg)
    ctx = probe_context(ch, cfg, make_codebook(cfg.codebook_bits), None)
    zero = SampleCovariance(np.zeros((ctx.z.size, ctx.z.size), complex), 1)
    est = estimate_targets(zero, ctx, grid, 1)
    first = [ax[0] for ax in grid.axes()]
    np.testing.assert_array_equal(est.estimates[0], first)


def test_estimates_within_bounds_and_trace_monotone(rng):
    cfg = SMALL
    grid = small_grid()
    lo, hi = range_interval(cfg)
    truth = [(rng.uniform(lo, hi), math.radians(30), rng.uniform(0.3, 2.8)) for _ in range(2)]
    ch = build_channels(make_scenario(truth, [1, 1j], [0]), cfg)
    ctx = probe_context(ch, cfg, make_codebook(cfg.codebook_bits), rng)
    est = estimate_targets(None, ctx, grid, 2)
    b = grid.bounds()
    assert np.all(est.estimates >= b[:, 0] - 1e-12) and np.all(est.estimates <= b[:, 1] + 1e-12)
    assert np.all(np.diff(est.objective_trace) >= -1e-12 * abs(est.objective_trace[-1]))
    assert np.isfinite(probe_bound(ctx, make_scenario(truth, [1, 1j], [0])))


def test_rmse_examples():
    truth = np.array([[2.0, 1.0, 0.5], [3.0, 0.7, 2.0]])
    assert rmse(truth, truth) == 0.0
    assert rmse([[3.0, 1.0, 0.5]], truth[:1]) == pytest.approx(1.0)
    assert rmse(truth[::-1], truth) == pytest.approx(0.0, abs=1e-15)
    perm, err = association(truth[::-1], truth)
    np.testing.assert_array_equal(perm, [1, 0])
    with pytest.raises(ValueError):
        rmse(truth[:1], truth)


def test_search_grid_validation():
    with pytest.raises(ValueError):
        SearchGrid(1.0, 0.5)
    with pytest.raises(ValueError):
        SearchGrid(0.1, 0.5, n_r=1)
