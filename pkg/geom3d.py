"""
旋转与位姿代数：单位四元数、对数/指数映射、以目标四元数为锚点的切空间坐标、速度积分。

约定:
    - 四元数按 (w, x, y, z) 存储，构造时归一化并取 w >= 0 的规范形式。
    - 旋转向量 r = u * theta（轴 * 角，弧度），规范分支 ||r|| <= pi。
    - Twist 的角速度为世界坐标系（基座坐标系）下的角速度：q' = exp(w * dt) ⊗ q。
"""
from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-8


def _canonical(w, x, y, z):
    norm = np.sqrt(w * w + x * x + y * y + z * z)
    if not np.isfinite(norm) or norm == 0.0:
        raise ValueError(f"cannot build a unit quaternion from ({w}, {x}, {y}, {z})")
    w, x, y, z = w / norm, x / norm, y / norm, z / norm
    # 双覆盖：q 与 -q 是同一旋转，w == 0 时取第一个非零分量为正
    flip = w < 0.0
    if w == 0.0:
        for c in (x, y, z):
            if c != 0.0:
                flip = c < 0.0
                break
    if flip:
        w, x, y, z = -w, -x, -y, -z
    return float(w), float(x), float(y), float(z)


@dataclass(frozen=True)
class UnitQuaternion:
    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        w, x, y, z = _canonical(self.w, self.x, self.y, self.z)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, values):
        w, x, y, z = (float(v) for v in values)
        return cls(w, x, y, z)

    def as_array(self):
        return np.array([self.w, self.x, self.y, self.z])

    @property
    def vec(self):
        return np.array([self.x, self.y, self.z])

    def conj(self):
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def to_matrix(self):
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def rotate(self, v):
        return self.to_matrix() @ np.asarray(v, dtype=float)


@dataclass(frozen=True, eq=False)
class Twist:
    """6D 速度：线速度 v (m/s) 与角速度 omega (rad/s)，均为 3 维。"""
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        v = np.array(self.v, dtype=float).reshape(3)
        omega = np.array(self.omega, dtype=float).reshape(3)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(omega))):
            raise ValueError("twist components must be finite")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "omega", omega)

    @classmethod
    def zero(cls):
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, vec6):
        vec6 = np.asarray(vec6, dtype=float).reshape(6)
        return cls(vec6[:3], vec6[3:])

    def as_vector(self):
        return np.concatenate([self.v, self.omega])


@dataclass(frozen=True, eq=False)
class Pose:
    """位姿：位置 p (m) 与姿态 q。"""
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: UnitQuaternion = field(default_factory=UnitQuaternion.identity)

    def __post_init__(self):
        object.__setattr__(self, "p", np.array(self.p, dtype=float).reshape(3))

    @property
    def rotation(self):
        return self.q.to_matrix()

    def transform_point(self, point):
        """局部坐标系中的点 -> 世界坐标"""
        return self.p + self.q.rotate(point)

    def inverse_transform(self, points):
        """世界坐标中的点（N x 3）-> 局部坐标"""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return (points - self.p) @ self.rotation

    def compose(self, other):
        """self ∘ other：other 为在 self 坐标系下给出的位姿"""
        return Pose(self.transform_point(other.p), quat_mul(self.q, other.q))

    def inverse(self):
        q_inv = self.q.conj()
        return Pose(-q_inv.rotate(self.p), q_inv)


def quat_mul(a, b):
    """
    Hamilton 积 a ⊗ b。

    参数:
    a (UnitQuaternion): 左乘因子。
    b (UnitQuaternion): 右乘因子。

    返回:
    (UnitQuaternion): 归一化且 w >= 0 的乘积。
    """
    w = a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z
    x = a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y
    y = a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x
    z = a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w
    return UnitQuaternion(w, x, y, z)


def quat_conj(q):
    return q.conj()


def quat_log(q):
    """
    对数映射，返回旋转向量 u * theta（不是半角形式）。

    参数:
    q (UnitQuaternion): 单位四元数。

    返回:
    r (np.ndarray): 3 维旋转向量，||r|| <= pi。
    """
    v = q.vec
    n = np.linalg.norm(v)
    theta = 2.0 * np.arctan2(n, q.w)
    if theta < SMALL_ANGLE:
        # atan2(n, w) / n 的两项展开
        return 2.0 * v / q.w * (1.0 - n * n / (3.0 * q.w * q.w))
    return v * (theta / n)


def quat_exp(r):
    """
    指数映射，quat_log 的逆（规范分支）。

    参数:
    r (array-like): 3 维旋转向量。

    返回:
    q (UnitQuaternion): 对应的单位四元数。
    """
    r = np.asarray(r, dtype=float).reshape(3)
    if not np.all(np.isfinite(r)):
        raise ValueError(f"rotation vector must be finite, got {r}")
    theta = np.linalg.norm(r)
    if theta < SMALL_ANGLE:
        w = 1.0 - theta * theta / 8.0
        v = 0.5 * r * (1.0 - theta * theta / 24.0)
    else:
        w = np.cos(0.5 * theta)
        v = r / theta * np.sin(0.5 * theta)
    return UnitQuaternion(w, v[0], v[1], v[2])


def quat_from_matrix(R):
    """旋转矩阵 -> 四元数（Shepperd 方法，选最大分量避免除以小数）"""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        w = (R[2, 1] - R[1, 2]) / s
        x = 0.25 * s
        y = (R[0, 1] + R[1, 0]) / s
        z = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        w = (R[0, 2] - R[2, 0]) / s
        x = (R[0, 1] + R[1, 0]) / s
        y = 0.25 * s
        z = (R[1, 2] + R[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        w = (R[1, 0] - R[0, 1]) / s
        x = (R[0, 2] + R[2, 0]) / s
        y = (R[1, 2] + R[2, 1]) / s
        z = 0.25 * s
    return UnitQuaternion(w, x, y, z)


def quat_from_frame(x_axis, y_axis, z_axis):
    """由三根正交坐标轴（世界坐标下）构造姿态"""
    return quat_from_matrix(np.column_stack([x_axis, y_axis, z_axis]))


def tangent_coords(q, q_anchor):
    """
    以 q_anchor 为锚点的切空间坐标 log(q ⊗ conj(q_anchor))。

    参数:
    q (UnitQuaternion): 待投影的姿态。
    q_anchor (UnitQuaternion): 锚点（目标姿态）。

    返回:
    r (np.ndarray): 3 维旋转向量，q = exp(r) ⊗ q_anchor。
    """
    return quat_log(quat_mul(q, q_anchor.conj()))


def from_tangent_coords(r, q_anchor):
    return quat_mul(quat_exp(r), q_anchor)


def geodesic_angle(q_a, q_b):
    return float(np.linalg.norm(tangent_coords(q_a, q_b)))


def slerp(q0, q1, s):
    """球面线性插值，s ∈ [0, 1]，走最短弧"""
    return from_tangent_coords(s * tangent_coords(q1, q0), q0)


def pose_integrate(pose, twist, dt):
    """
    一阶速度积分：p' = p + v dt，q' = exp(w dt) ⊗ q（世界坐标系角速度）。

    参数:
    pose (Pose): 当前位姿。
    twist (Twist): 速度指令。
    dt (float): 时间步长，秒，必须 > 0。

    返回:
    (Pose): 积分后的位姿。
    """
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    p = pose.p + twist.v * dt
    q = quat_mul(quat_exp(twist.omega * dt), pose.q)
    return Pose(p, q)


def twist_between(pose_a, pose_b, dt):
    """使 pose_integrate(pose_a, twist, dt) == pose_b 的恒定速度"""
    v = (pose_b.p - pose_a.p) / dt
    omega = quat_log(quat_mul(pose_b.q, pose_a.q.conj())) / dt
    return Twist(v, omega)
