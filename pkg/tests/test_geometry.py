import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqc import geometry as geo
from vqc.config import single_ris_layout, multi_ris_layout


@pytest.fixture
def layout():
    return single_ris_layout(N=16, C=4, M=3)


def test_ue_below_ris(layout):
    ris = layout.ris_positions[0]
    a = geo.compute_angles(layout, (ris.x, ris.y, ris.z - 10.0), 0)
    assert math.cos(a.gamma_ris) == pytest.approx(1.0)
    assert a.gamma_ris == pytest.approx(0.0)
    assert a.r_ur == pytest.approx(10.0)


def test_ris_bs_same_height(layout):
    a = geo.compute_angles(layout, (20.0, 0.0, -20.0), 0)
    assert math.sin(a.gamma_bs) == 0.0
    assert a.r_rb == pytest.approx(math.hypot(40.0, 40.0))


def test_degenerate_geometry(layout):
    with pytest.raises(geo.GeometryError):
        geo.compute_angles(layout, layout.ris_positions[0], 0)
    with pytest.raises(geo.GeometryError):
        geo.compute_angles(layout, layout.bs_position, 0)


def _roundtrip(layout, ue, k):
    a = geo.compute_angles(layout, ue, k)
    ris = layout.ris_positions[k].as_array()
    bs = layout.bs_position.as_array()
    d = (np.asarray(ue) - ris) / a.r_ur
    ue_side = np.array([math.sin(a.gamma_ris) * math.cos(a.mu_ris),
                        math.sin(a.gamma_ris) * math.sin(a.mu_ris),
                        math.cos(a.gamma_ris)])
    e = (ris - bs) / a.r_rb
    bs_side = np.array([math.cos(a.phi_ris) * math.sin(a.upsilon_ris),
                        math.sin(a.phi_ris) * math.sin(a.upsilon_ris),
                        math.sin(a.gamma_bs)])
    return ue_side - np.array([d[0], d[1], -d[2]]), bs_side - e


def test_angle_roundtrip_random_positions():
    lay = multi_ris_layout(K=3, N=4, C=2, M=2)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ue = rng.uniform(-80, 80, size=3)
        k = int(rng.integers(3))
        r1, r2 = _roundtrip(lay, ue, k)
        assert np.max(np.abs(r1)) < 1e-9 and np.max(np.abs(r2)) < 1e-9


def test_ris_steering_examples():
    u = geo.ris_steering(0.7, 0.3, 8, 4, 1.0)
    assert u[0] == 1.0
    assert u[4] == pytest.approx(cmath.exp(1j * math.sin(0.3)), abs=1e-15)


def test_ris_steering_against_scalar_loop():
    mu = gamma = math.pi / 6
    u = geo.ris_steering(mu, gamma, 4, 2, 1.0)
    for n in range(1, 5):
        v1, v2 = (n - 1) % 2, (n - 1) // 2
        expected = cmath.exp(1j * (v1 * math.sin(mu) * math.cos(gamma) + v2 * math.sin(gamma)))
        assert abs(u[n - 1] - expected) < 1e-12


def test_ris_steering_requires_divisible_columns():
    with pytest.raises(geo.GeometryError):
        geo.ris_steering(0.1, 0.2, 6, 4)


def test_bs_steering_examples():
    np.testing.assert_array_equal(geo.bs_steering(0.4, 1), [1.0])
    np.testing.assert_allclose(geo.bs_steering(math.pi / 2, 5), np.ones(5), atol=1e-15)
    u = geo.bs_steering(math.pi / 3, 8, 1.0)
    for m in range(8):
        assert abs(u[m] - cmath.exp(1j * m * math.cos(math.pi / 3))) < 1e-12
    assert u[0] == 1.0


@settings(max_examples=200, deadline=None)
@given(mu=st.floats(-math.pi, math.pi), gamma=st.floats(-math.pi, math.pi), C=st.sampled_from([1, 2, 4]),
       rows=st.integers(1, 4), spacing=st.floats(0.1, 3.0))
def test_steering_unit_modulus(mu, gamma, C, rows, spacing):
    u = geo.ris_steering(mu, gamma, C * rows, C, spacing)
    assert np.max(np.abs(np.abs(u) - 1.0)) < 1e-12
    b = geo.bs_steering(gamma, rows + 2, spacing)
    assert np.max(np.abs(np.abs(b) - 1.0)) < 1e-12


def test_path_loss():
    assert geo.path_loss_db("direct", 1.0) == pytest.approx(32.6)
    assert geo.path_loss_db("reflected", 10.0) == pytest.approx(52.0)
    d = 56.6
    assert geo.path_loss_amplitude("direct", d) == pytest.approx(
        10 ** (-(32.6 + 36.7 * math.log10(d)) / 20), rel=1e-14)
    with pytest.raises(geo.GeometryError):
        geo.path_loss_amplitude("direct", 0.0)


def test_rician_limit(layout):
    ue = (20.0, 5.0, -20.0)
    ch = geo.sample_channel(layout, ue, 1e12, np.random.default_rng(1))
    a = geo.compute_angles(layout, ue, 0)
    ref = ch.kappa[0] * geo.ris_steering(a.mu_ris, a.gamma_ris, layout.N, layout.C)
    assert np.max(np.abs(ch.h_r[0] - ref)) / np.max(np.abs(ref)) < 1e-5


def test_rician_weight_for_epsilon_10():
    w_los, w_nlos = geo.rician_weights(10.0)
    assert w_los == pytest.approx(0.95346, abs=1e-5)
    assert w_los ** 2 + w_nlos ** 2 == pytest.approx(1.0)


def test_nlos_variance_monte_carlo(layout):
    ue = (10.0, -3.0, -20.0)
    los = geo.los_channel(layout, ue)
    rng = np.random.default_rng(2)
    eps = 10.0
    draws = np.array([geo.sample_channel(layout, ue, eps, rng).h_d[0] for _ in range(100_000)])
    w_los, _ = geo.rician_weights(eps)
    nlos = draws - w_los * los.h_d[0]
    expected = los.rho ** 2 / (1 + eps)
    assert np.var(nlos) == pytest.approx(expected, rel=0.03)


def test_same_seed_bit_identical_and_pure_nlos(layout):
    ue = (30.0, 10.0, -20.0)
    a = geo.sample_channel(layout, ue, 10.0, np.random.default_rng(5))
    b = geo.sample_channel(layout, ue, 10.0, np.random.default_rng(5))
    assert np.array_equal(a.G_r[0], b.G_r[0]) and np.array_equal(a.h_d, b.h_d)
    c = geo.sample_channel(layout, ue, 0.0, np.random.default_rng(5))
    rng = np.random.default_rng(5)
    nlos = (rng.standard_normal(3) + 1j * rng.standard_normal(3)) / math.sqrt(2)
    np.testing.assert_allclose(c.h_d, c.rho * nlos, rtol=1e-14)


def test_cascade_examples():
    G = np.arange(6.0).reshape(2, 3) + 1j
    np.testing.assert_array_equal(geo.cascade_channel(np.ones(3), G), G.T)
    out = geo.cascade_channel(np.array([2j]), np.array([[3.0]]))
    assert out.shape == (1, 1) and out[0, 0] == 6j
    with pytest.raises(geo.GeometryError):
        geo.cascade_channel(np.ones(2), np.ones((2, 3)))


def _cascade_loop(h_r, G_r):
    N, M = len(h_r), G_r.shape[0]
    out = np.zeros((N, M), dtype=complex)
    for n in range(N):
        for m in range(M):
            out[n, m] = h_r[n] * G_r[m, n]
    return out


def _pilot_loop(ch, w, thetas, cfg, noise):
    M = len(w)
    total = 0j
    for m in range(M):
        acc = ch.h_d[m]
        for k, th in enumerate(thetas):
            for n in range(len(th)):
                acc += ch.h_r[k][n] * ch.G_r[k][m, n] * th[n]
        total += w[m] * acc
    return math.sqrt(cfg.p_u) * total * cfg.pilot_symbol + noise


def _crandn(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def test_cascade_and_pilot_against_loops():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        N, M = (int(v) for v in rng.integers(1, 9, size=2))
        K = int(rng.integers(1, 4))
        h_r = [_crandn(rng, N) for _ in range(K)]
        G_r = [_crandn(rng, M, N) for _ in range(K)]
        assert np.max(np.abs(geo.cascade_channel(h_r[0], G_r[0]) - _cascade_loop(h_r[0], G_r[0]))) < 1e-10
        ch = geo.ChannelRealization(_crandn(rng, M), h_r, G_r, 1.0, [1.0] * K, [1.0] * K, 10.0)
        w = np.exp(1j * rng.uniform(0, 2 * np.pi, M))
        th = [np.exp(1j * rng.uniform(0, 2 * np.pi, N)) for _ in range(K)]
        cfg = geo.PilotConfig(p_u=float(rng.uniform(0.5, 5)), sigma2=1.0, pilot_symbol=complex(*rng.normal(size=2)))
        noise = complex(*rng.normal(size=2))
        y = geo.measure_pilot(ch, w, th, cfg, noise)
        ref = _pilot_loop(ch, w, th, cfg, noise)
        assert abs(y - ref) <= 1e-10 * max(1.0, abs(ref))


def test_pilot_examples():
    ch = geo.ChannelRealization(np.zeros(1, complex), [np.ones(1, complex)], [np.ones((1, 1), complex)],
                                1.0, [1.0], [1.0], 10.0)
    cfg = geo.PilotConfig(p_u=1.0, sigma2=0.0, pilot_symbol=1.0)
    assert geo.measure_pilot(ch, np.ones(1), [np.ones(1)], cfg, 0.0) == 1.0
    rng = np.random.default_rng(4)
    ch = geo.sample_channel(single_ris_layout(N=4, C=2, M=2), (20, 0, -20), 10.0, rng)
    zero_x = geo.PilotConfig(p_u=3.0, pilot_symbol=0.0)
    assert geo.measure_pilot(ch, np.ones(2), [np.ones(4)], zero_x, 0.0) == 0.0
    y1 = geo.measure_pilot(ch, np.ones(2), [np.ones(4)], geo.PilotConfig(p_u=1.0), 0.0)
    y4 = geo.measure_pilot(ch, np.ones(2), [np.ones(4)], geo.PilotConfig(p_u=4.0), 0.0)
    assert abs(y4 - 2 * y1) < 1e-12 * abs(y1)


def test_pilot_superposition():
    rng = np.random.default_rng(5)
    lay = multi_ris_layout(K=2, N=4, C=2, M=3)
    ch = geo.sample_channel(lay, (-20, 30, -20), 10.0, rng)
    cfg = geo.PilotConfig(p_u=2.0)
    w = _crandn(rng, 3)
    t1, t1b, t2 = _crandn(rng, 4), _crandn(rng, 4), _crandn(rng, 4)
    zero = [np.zeros(4), np.zeros(4)]
    base = geo.measure_pilot(ch, w, zero, cfg)
    lhs = geo.measure_pilot(ch, w, [t1 + 2.0 * t1b, t2], cfg) - base
    rhs = (geo.measure_pilot(ch, w, [t1, t2], cfg) - base) + 2.0 * (geo.measure_pilot(ch, w, [t1b, zero[1]], cfg) - base)
    assert abs(lhs - rhs) <= 1e-10 * abs(lhs)
    x1 = geo.measure_pilot(ch, w, [t1, t2], geo.PilotConfig(p_u=2.0, pilot_symbol=1.5 - 0.5j))
    x2 = geo.measure_pilot(ch, w, [t1, t2], geo.PilotConfig(p_u=2.0, pilot_symbol=1.0))
    assert abs(x1 - (1.5 - 0.5j) * x2) <= 1e-10 * abs(x1)


def test_rss_map_shape_and_zero_pilot():
    lay = single_ris_layout(N=4, C=2, M=1)
    m = geo.rss_map(lay, np.ones(1), [np.ones(4)], geo.PilotConfig(p_u=1.0))
    assert m.shape == (30, 70)
    z = geo.rss_map(lay, np.ones(1), [np.ones(4)], geo.PilotConfig(p_u=1.0, pilot_symbol=0.0))
    assert np.all(z == 0.0)
    with pytest.raises(geo.GeometryError):
        geo.rss_map(lay, np.ones(1), [np.ones(4)], geo.PilotConfig(p_u=1.0),
                    area=geo.ServiceArea((0, 0, -20), (0.2, 0.2)))


def test_rss_cell_matches_measure_pilot():
    lay = multi_ris_layout(K=2, N=4, C=2, M=2)
    rng = np.random.default_rng(6)
    w = np.exp(1j * rng.uniform(0, 6, 2))
    th = [np.exp(1j * rng.uniform(0, 6, 4)) for _ in range(2)]
    cfg = geo.PilotConfig(p_u=10.0)
    m = geo.rss_map(lay, w, th, cfg)
    xs, ys = geo.grid_centers(lay.service_area)
    i, j = 7, 41
    ch = geo.los_channel(lay, (xs[i], ys[j], lay.service_area.z))
    y = geo.measure_pilot(ch, w, th, cfg, 0.0)
    assert m[i, j] == pytest.approx(abs(y) ** 2, rel=1e-12)


def test_field_superposition():
    lay = multi_ris_layout(K=2, N=4, C=2, M=2)
    rng = np.random.default_rng(7)
    w = np.exp(1j * rng.uniform(0, 6, 2))
    th = [np.exp(1j * rng.uniform(0, 6, 4)) for _ in range(2)]
    cfg = geo.PilotConfig(p_u=10.0)
    area = geo.ServiceArea((-20, 40, -20), (3, 4))
    full = geo.field_map(lay, w, th, cfg, area)
    direct = geo.field_map(lay, w, th, cfg, area, ris_subset=[])
    parts = [geo.field_map(lay, w, th, cfg, area, ris_subset=[k], include_direct=False) for k in range(2)]
    assert np.max(np.abs(full - direct - parts[0] - parts[1])) <= 1e-10 * np.max(np.abs(full))


def test_layout_validation():
    with pytest.raises(geo.GeometryError):
        single_ris_layout(N=6, C=4)
    with pytest.raises(geo.GeometryError):
        geo.SystemLayout(geo.Position(0, 0, 0), (), 1, 4, 2, geo.ServiceArea((0, 0, 0), (1, 1)))
    with pytest.raises(geo.GeometryError):
        geo.Position(float("nan"), 0.0, 0.0)


def test_default_noise_power():
    assert geo.default_noise_power() == pytest.approx(1e-13, rel=1e-12)
    assert geo.PilotConfig.from_snr_db(25.0).p_u == pytest.approx(10 ** 2.5)
