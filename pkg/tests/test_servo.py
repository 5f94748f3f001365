import numpy as np
import pytest

from errors import DegenerateDirection, NonPositiveDepth, SingularSystem, ValidationError
from geom3d import Twist
from perception import BBox, CameraIntrinsics, FeatureArity, FeatureUnit, FeatureVec, to_features8
from servo import (VsGains, classic_law, combined_law, damped_pinv, eta_rate, norm_law, norm_projector,
                   point_interaction, projector_rank, stack_interaction, switch_alpha)

INTR = CameraIntrinsics()


def well_conditioned(rng, rows=8, cols=6, lo=0.5, hi=1.5):
    U, _ = np.linalg.qr(rng.normal(size=(rows, rows)))
    V, _ = np.linalg.qr(rng.normal(size=(cols, cols)))
    return U[:, :cols] @ np.diag(rng.uniform(lo, hi, size=cols)) @ V.T


def square_features(cu, cv, side):
    return to_features8(BBox(cu - side / 2, cv - side / 2, cu + side / 2, cv + side / 2), INTR)


def test_point_interaction_at_principal_point():
    L = point_interaction(0.0, 0.0, 1.0)
    assert np.array_equal(L, [[-1, 0, 0, 0, -1, 0], [0, -1, 0, 1, 0, 0]])
    with pytest.raises(NonPositiveDepth):
        point_interaction(0.1, 0.1, 0.0)


def test_stack_interaction_shape_and_units():
    f8 = square_features(300, 250, 80)
    L = stack_interaction(f8, 0.3)
    assert L.shape == (8, 6)
    assert np.array_equal(L[2:4], point_interaction(*f8.values[2:4], 0.3))
    assert np.allclose(stack_interaction(f8, [0.3] * 4), L)
    pixel = FeatureVec(np.zeros(8), FeatureUnit.PIXEL, FeatureArity.CORNERS_8)
    with pytest.raises(ValidationError):
        stack_interaction(pixel, 0.3)


def test_projector_algebra_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        L = rng.normal(size=(8, 6))
        e = rng.normal(size=8)
        P_eta, L_eta = norm_projector(e, L)
        assert np.allclose(P_eta, P_eta.T, atol=1e-10)
        assert np.allclose(P_eta @ P_eta, P_eta, atol=1e-10)
        singular = np.linalg.svd(P_eta, compute_uv=False)
        assert np.sum(singular > 1e-6) == 5
        assert np.max(np.abs(L_eta @ P_eta)) < 1e-12

        P = np.eye(6) - damped_pinv(L, 0.0) @ L
        assert np.max(np.abs(P)) < 1e-10
        assert projector_rank(P) == 0


def test_norm_law_reports_rank_five():
    rng = np.random.default_rng(1)
    out = norm_law(rng.normal(size=8), rng.normal(size=(8, 6)), Twist.zero(), VsGains())
    assert out.projector_rank == 5
    assert out.alpha == 1.0
    assert isinstance(out.twist, Twist)


def test_damped_pinv_matches_numpy():
    rng = np.random.default_rng(2)
    for shape in [(8, 6), (8, 3), (2, 6), (1, 6)]:
        M = rng.normal(size=shape)
        assert np.allclose(damped_pinv(M, 0.0), np.linalg.pinv(M), atol=1e-9)
        assert np.allclose(damped_pinv(M, 1e-6), np.linalg.pinv(M), atol=1e-6)


def test_damped_pinv_singular_without_damping():
    rng = np.random.default_rng(3)
    L = rng.normal(size=(8, 6))
    L[:, 1] = L[:, 0]
    with pytest.raises(SingularSystem):
        damped_pinv(L, 0.0)
    assert np.all(np.isfinite(damped_pinv(L, 1e-3)))


def test_norm_law_enforces_eta_decay():
    rng = np.random.default_rng(4)
    gains = VsGains(lam=0.7)
    for _ in range(50):
        L = rng.normal(size=(8, 6))
        e = rng.normal(size=8)
        sigma = rng.uniform(-0.5, 0.5, size=6)
        ff = rng.normal(size=8)
        eta = np.linalg.norm(e)
        out = norm_law(e, L, sigma, gains)
        assert eta_rate(e, L, out.velocity) == pytest.approx(-0.7 * eta, rel=1e-9)
        out = norm_law(e, L, sigma, gains, feedforward=ff)
        assert eta_rate(e, L, out.velocity, feedforward=ff) == pytest.approx(-0.7 * eta, rel=1e-9)


def test_secondary_is_invisible_to_eta_rate():
    rng = np.random.default_rng(5)
    gains = VsGains()
    for _ in range(50):
        L = rng.normal(size=(8, 6))
        e = rng.normal(size=8)
        with_sigma = norm_law(e, L, rng.uniform(-1, 1, size=6), gains).velocity
        without = norm_law(e, L, None, gains).velocity
        assert abs(eta_rate(e, L, with_sigma) - eta_rate(e, L, without)) < 1e-9


def test_norm_law_degenerate_direction():
    rng = np.random.default_rng(6)
    L = rng.normal(size=(8, 6))
    U, _, _ = np.linalg.svd(L)
    e = U[:, 7]  # 与 L 的列空间正交，Lᵀe = 0
    with pytest.raises(DegenerateDirection):
        norm_law(e, L, None, VsGains())


def test_classic_law_without_secondary_is_pinv():
    rng = np.random.default_rng(7)
    L = rng.normal(size=(8, 6))
    e = rng.normal(size=8)
    out = classic_law(e, L, None, VsGains(lam=2.0, mu=0.0))
    assert np.allclose(out.velocity, -2.0 * np.linalg.pinv(L) @ e, atol=1e-9)
    assert out.alpha == 0.0
    assert out.projector_rank == 0


def test_classic_law_keeps_secondary_in_null_space():
    rng = np.random.default_rng(8)
    L = rng.normal(size=(2, 6))
    e = rng.normal(size=2)
    sigma = rng.normal(size=6)
    gains = VsGains(mu=0.0)
    with_sigma = classic_law(e, L, sigma, gains)
    without = classic_law(e, L, None, gains)
    assert with_sigma.projector_rank == 4
    assert np.allclose(L @ with_sigma.velocity, L @ without.velocity, atol=1e-10)


def test_law_dimension_checks():
    L = np.zeros((8, 3))
    with pytest.raises(ValidationError):
        classic_law(np.ones(6), L, None, VsGains())
    with pytest.raises(ValidationError):
        classic_law(np.ones(8), L, np.ones(6), VsGains())
    with pytest.raises(ValidationError):
        classic_law(np.ones(8), L, None, VsGains(), feedforward=np.ones(3))


def test_switch_alpha_shape():
    gains = VsGains(eta0=0.01, eta1=0.05)
    assert switch_alpha(0.0, gains) == 0.0
    assert switch_alpha(0.01, gains) == 0.0
    assert switch_alpha(0.03, gains) == pytest.approx(0.5)
    assert switch_alpha(0.05, gains) == 1.0
    assert switch_alpha(10.0, gains) == 1.0
    grid = np.linspace(0.0, 0.06, 601)
    values = [switch_alpha(eta, gains) for eta in grid]
    assert np.all(np.diff(values) >= 0)
    # C¹：两端斜率为 0
    h = 1e-7
    assert (switch_alpha(0.01 + h, gains) - switch_alpha(0.01, gains)) / h < 1e-3
    assert (switch_alpha(0.05, gains) - switch_alpha(0.05 - h, gains)) / h < 1e-3
    with pytest.raises(ValidationError):
        switch_alpha(-1.0, gains)


def test_combined_law_blends():
    rng = np.random.default_rng(9)
    L = rng.normal(size=(8, 6))
    direction = rng.normal(size=8)
    direction /= np.linalg.norm(direction)
    sigma = rng.normal(size=6) * 0.01
    gains = VsGains()

    far = combined_law(direction * 0.2, L, sigma, gains)
    assert np.allclose(far.velocity, norm_law(direction * 0.2, L, sigma, gains).velocity)
    near = combined_law(direction * 0.005, L, sigma, gains)
    assert np.allclose(near.velocity, classic_law(direction * 0.005, L, sigma, gains).velocity)
    mid = combined_law(direction * 0.03, L, sigma, gains)
    expected = 0.5 * norm_law(direction * 0.03, L, sigma, gains).velocity \
        + 0.5 * classic_law(direction * 0.03, L, sigma, gains).velocity
    assert mid.alpha == pytest.approx(0.5)
    assert np.allclose(mid.velocity, expected)


def test_gains_validation():
    with pytest.raises(ValidationError):
        VsGains(lam=0.0)
    with pytest.raises(ValidationError):
        VsGains(eta0=0.05, eta1=0.01)
    with pytest.raises(ValidationError):
        VsGains(depth_mode="guess")


def test_square_boxes_command_no_rotation():
    # 两个正方形之间的误差可以只用平移实现，经典律给出的角速度为 0
    gains = VsGains()
    rng = np.random.default_rng(10)
    for _ in range(20):
        f = square_features(*rng.uniform(200, 440, size=2), rng.uniform(40, 160))
        f_star = square_features(*rng.uniform(200, 440, size=2), rng.uniform(40, 160))
        out = classic_law(f - f_star, stack_interaction(f, 0.3), None, gains)
        assert np.max(np.abs(out.velocity[3:])) < 1e-6
        assert np.linalg.norm(out.velocity[:3]) > 0


def test_exponential_decay_on_linearized_plant():
    """η 在离散线性化对象上单调下降，每步比值接近 1 - λ·dt；σ 只在 O(dt²) 上影响 η"""
    rng = np.random.default_rng(11)
    dt = 1.0 / 30.0
    gains = VsGains(lam=1.0)
    for _ in range(100):
        L = well_conditioned(rng)
        e = L @ rng.normal(size=6)
        e *= 2.0 / np.linalg.norm(e)
        e_zero = e.copy()
        sigma = rng.uniform(-0.01, 0.01, size=6)
        for _ in range(60):
            eta = np.linalg.norm(e)
            v = norm_law(e, L, sigma, gains).velocity
            e_next = e + dt * L @ v
            ratio = np.linalg.norm(e_next) / eta
            assert ratio < 1.0
            assert abs((1.0 - ratio) / (gains.lam * dt) - 1.0) < 0.2

            # 同一起点、σ = 0 的一步
            no_sigma = e + dt * L @ norm_law(e, L, None, gains).velocity
            assert abs(np.linalg.norm(e_next) - np.linalg.norm(no_sigma)) < 0.5 * dt * dt
            e = e_next
            e_zero = e_zero + dt * L @ norm_law(e_zero, L, None, gains).velocity
        assert np.linalg.norm(e_zero) < 2.0 * np.exp(-60 * dt) * 1.2
