"""
视觉伺服控制律：点特征交互矩阵、阻尼伪逆、带零空间投影的经典律、误差范数（大投影）律，
以及两者之间的平滑切换。

交互矩阵把相机坐标系下的相机速度映射为特征变化率；L 的列数 n 可以小于 6
（例如只用平移的 3 列），此时投影矩阵是 n x n。
"""
from dataclasses import dataclass

import numpy as np

from errors import DegenerateDirection, NonPositiveDepth, SingularSystem, ValidationError
from geom3d import Twist
from perception import FeatureArity, FeatureUnit

MAX_CONDITION = 1e12
RANK_TOL = 1e-6
DEPTH_MODES = ("desired", "true", "fixed")


@dataclass(frozen=True)
class VsGains:
    lam: float = 1.0
    eta0: float = 0.01
    eta1: float = 0.05
    mu: float = 1e-6
    z_hat: float = 0.3
    eta_den_guard: float = 1e-9
    depth_mode: str = "desired"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError(f"lambda must be > 0, got {self.lam}")
        if not 0 <= self.eta0 < self.eta1:
            raise ValidationError(f"need 0 <= eta0 < eta1, got eta0={self.eta0}, eta1={self.eta1}")
        if not self.mu >= 0:
            raise ValidationError(f"damping mu must be >= 0, got {self.mu}")
        if not self.z_hat > 0:
            raise ValidationError(f"z_hat must be > 0, got {self.z_hat}")
        if self.depth_mode not in DEPTH_MODES:
            raise ValidationError(f"depth_mode must be one of {DEPTH_MODES}, got '{self.depth_mode}'")


@dataclass(frozen=True, eq=False)
class PriorityLawOutput:
    velocity: np.ndarray
    eta: float
    alpha: float
    projector_rank: int

    @property
    def twist(self):
        if len(self.velocity) != 6:
            raise ValidationError(f"a twist needs 6 components, law produced {len(self.velocity)}")
        return Twist.from_vector(self.velocity)


def point_interaction(x, y, Z):
    """
    单个归一化图像点的 2 x 6 交互矩阵。

    参数:
    x, y (float): 归一化坐标。
    Z (float): 深度，米，必须 > 0。

    返回:
    L (np.ndarray): 2 x 6 矩阵，列顺序 (vx, vy, vz, wx, wy, wz)。
    """
    if not Z > 0:
        raise NonPositiveDepth(f"depth must be positive, got {Z}")
    return np.array([
        [-1.0 / Z, 0.0, x / Z, x * y, -(1.0 + x * x), y],
        [0.0, -1.0 / Z, y / Z, 1.0 + y * y, -x * y, -x],
    ])


def stack_interaction(f8, z_hat):
    """4 个角点（UL, UR, LR, LL）的交互矩阵竖直堆叠，8 x 6。z_hat 可为标量或 4 个角点各自的深度"""
    if f8.unit != FeatureUnit.NORMALIZED_METRIC or f8.arity != FeatureArity.CORNERS_8:
        raise ValidationError("interaction matrix needs corners_8 features in normalized_metric units")
    depths = np.broadcast_to(np.asarray(z_hat, dtype=float), (4,))
    xy = f8.values.reshape(4, 2)
    return np.vstack([point_interaction(x, y, Z) for (x, y), Z in zip(xy, depths)])


def damped_pinv(M, mu):
    """
    阻尼伪逆：f <= n 时 Mᵀ(MMᵀ + mu²I)⁻¹，否则 (MᵀM + mu²I)⁻¹Mᵀ。
    mu = 0 且 Gram 矩阵条件数 > 1e12 时抛出 SingularSystem。
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if mu < 0:
        raise ValidationError(f"damping mu must be >= 0, got {mu}")
    rows, cols = M.shape
    gram = M @ M.T if rows <= cols else M.T @ M
    if mu == 0 and np.linalg.cond(gram) > MAX_CONDITION:
        raise SingularSystem(f"Gram matrix of a {rows}x{cols} system is numerically singular")
    gram = gram + mu * mu * np.eye(len(gram))
    if rows <= cols:
        return np.linalg.solve(gram, M).T
    return np.linalg.solve(gram, M.T)


def projector_rank(P):
    return int(np.linalg.matrix_rank(P, tol=RANK_TOL))


def _secondary(sigma, n):
    if sigma is None:
        return np.zeros(n)
    if isinstance(sigma, Twist):
        sigma = sigma.as_vector()
    sigma = np.asarray(sigma, dtype=float).reshape(-1)
    if len(sigma) != n:
        raise ValidationError(f"secondary velocity has {len(sigma)} components, law has {n}")
    return sigma


def _check_dims(e, L, feedforward):
    e = np.asarray(e, dtype=float).reshape(-1)
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if L.shape[0] != len(e):
        raise ValidationError(f"feature error has {len(e)} entries but L has {L.shape[0]} rows")
    ff = np.zeros(len(e)) if feedforward is None else np.asarray(feedforward, dtype=float).reshape(-1)
    if len(ff) != len(e):
        raise ValidationError(f"feed-forward rate has {len(ff)} entries, expected {len(e)}")
    return e, L, ff


def classic_law(e, L, sigma, gains, feedforward=None):
    """
    经典律 v_e = -λ L⁺ e + P σ，P = I - L⁺L。

    参数:
    e (array-like): 特征误差，f 维。
    L (np.ndarray): f x n 交互矩阵。
    sigma (Twist | array-like | None): 次任务速度，n 维。
    gains (VsGains): 增益。
    feedforward (array-like | None): 已知运动引起的特征变化率，由主任务补偿。

    返回:
    (PriorityLawOutput): alpha 固定为 0。
    """
    e, L, ff = _check_dims(e, L, feedforward)
    n = L.shape[1]
    L_pinv = damped_pinv(L, gains.mu)
    P = np.eye(n) - L_pinv @ L
    v = -L_pinv @ (gains.lam * e + ff) + P @ _secondary(sigma, n)
    return PriorityLawOutput(v, float(np.linalg.norm(e)), 0.0, projector_rank(P))


def norm_law(e, L, sigma, gains, feedforward=None):
    """
    误差范数律 v_η = -λ η L̂η⁺ + Pη σ，闭式：
    L̂η⁺ = η Lᵀe / (eᵀLLᵀe)，Pη = I - Lᵀe eᵀL / (eᵀLLᵀe)。
    有前馈时主任务速率改为 λη + eᵀḟ_ff/η，仍保证 η̇ = -λη。
    """
    e, L, ff = _check_dims(e, L, feedforward)
    n = L.shape[1]
    eta = float(np.linalg.norm(e))
    a = L.T @ e
    den = float(a @ a)
    if eta <= gains.eta_den_guard or den <= gains.eta_den_guard ** 2:
        raise DegenerateDirection(f"feature error (eta={eta:.3g}) lies in the kernel of L^T")
    L_eta_pinv = eta * a / den
    P_eta = np.eye(n) - np.outer(a, a) / den
    rate = gains.lam * eta + float(e @ ff) / eta
    v = -rate * L_eta_pinv + P_eta @ _secondary(sigma, n)
    return PriorityLawOutput(v, eta, 1.0, projector_rank(P_eta))


def norm_projector(e, L):
    """Pη 与 Lη = eᵀL/η，供测试和诊断使用"""
    e = np.asarray(e, dtype=float)
    a = np.asarray(L, dtype=float).T @ e
    den = float(a @ a)
    return np.eye(len(a)) - np.outer(a, a) / den, a / np.linalg.norm(e)


def switch_alpha(eta, gains):
    """η <= eta0 时为 0，η >= eta1 时为 1，中间为 C¹ 平滑阶跃 3t² - 2t³"""
    if eta < 0:
        raise ValidationError(f"eta must be >= 0, got {eta}")
    if eta <= gains.eta0:
        return 0.0
    if eta >= gains.eta1:
        return 1.0
    t = (eta - gains.eta0) / (gains.eta1 - gains.eta0)
    return t * t * (3.0 - 2.0 * t)


def combined_law(e, L, sigma, gains, feedforward=None):
    """
    v = α(η) v_η + (1 - α(η)) v_e。α = 0 时不计算范数律，避开 η → 0 处的奇异。
    """
    eta = float(np.linalg.norm(e))
    alpha = switch_alpha(eta, gains)
    if alpha == 0.0:
        return classic_law(e, L, sigma, gains, feedforward)
    out_eta = norm_law(e, L, sigma, gains, feedforward)
    if alpha == 1.0:
        return out_eta
    out_e = classic_law(e, L, sigma, gains, feedforward)
    v = alpha * out_eta.velocity + (1.0 - alpha) * out_e.velocity
    return PriorityLawOutput(v, eta, alpha, out_eta.projector_rank)


def eta_rate(e, L, v, feedforward=None):
    """η 的瞬时变化率 eᵀ(Lv + ḟ_ff)/η"""
    e, L, ff = _check_dims(e, L, feedforward)
    return float(e @ (L @ np.asarray(v, dtype=float) + ff)) / float(np.linalg.norm(e))
