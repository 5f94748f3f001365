"""
针孔相机投影、模拟的轴对齐包围盒检测器（代替 YOLO），以及检测结果的后处理：
正方形化、50 帧均值滤波、像素/归一化/[0,100] 单位换算和 4 维、8 维特征。

相机坐标系：x 向右，y 向下，z 沿光轴向前。
"""
import logging as log
import math
from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np

from errors import BehindCamera, LabelNotFound, NoDetection, UnitMismatch, ValidationError

Z_MIN = 1e-4


@dataclass(frozen=True)
class CameraIntrinsics:
    f_u: float = 500.0
    f_v: float = 500.0
    c_u: float = 320.0
    c_v: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.f_u > 0 and self.f_v > 0):
            raise ValidationError(f"focal lengths must be positive, got ({self.f_u}, {self.f_v})")
        if not (self.width > 0 and self.height > 0):
            raise ValidationError(f"image size must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True, eq=False)
class SceneObject:
    label: str
    model_points: np.ndarray
    pose: object  # geom3d.Pose

    def __post_init__(self):
        points = np.array(self.model_points, dtype=float).reshape(-1, 3)
        if len(points) < 4:
            raise ValidationError(f"object '{self.label}' needs at least 4 model points")
        object.__setattr__(self, "model_points", points)

    def world_points(self):
        return self.pose.p + self.model_points @ self.pose.rotation.T


@dataclass(frozen=True)
class BBox:
    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValidationError(f"degenerate bounding box {self}")

    @property
    def width(self):
        return self.u_max - self.u_min

    @property
    def height(self):
        return self.v_max - self.v_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return 0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max)

    def inside(self, intr):
        return (self.u_min >= 0.0 and self.v_min >= 0.0
                and self.u_max <= intr.width and self.v_max <= intr.height)


class FeatureUnit(Enum):
    PIXEL = "pixel"
    NORMALIZED_METRIC = "normalized_metric"
    SCALED_0_100 = "scaled_0_100"


class FeatureArity(Enum):
    UL_LR_4 = 4
    CORNERS_8 = 8


@dataclass(frozen=True, eq=False)
class FeatureVec:
    values: np.ndarray
    unit: FeatureUnit
    arity: FeatureArity

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if len(values) != self.arity.value:
            raise ValidationError(f"{self.arity.name} needs {self.arity.value} values, got {len(values)}")
        object.__setattr__(self, "values", values)

    def check_compatible(self, other):
        if self.unit != other.unit or self.arity != other.arity:
            raise UnitMismatch(
                f"cannot mix {self.unit.value}/{self.arity.name} with {other.unit.value}/{other.arity.name}")

    def __sub__(self, other):
        self.check_compatible(other)
        return self.values - other.values


def project(intr, cam_pose, point_w):
    """
    把世界坐标中的点投影到像素平面。

    参数:
    intr (CameraIntrinsics): 相机内参。
    cam_pose (Pose): 相机在世界坐标系下的位姿。
    point_w (array-like): 世界坐标 3D 点，米。

    返回:
    (u, v) (tuple): 像素坐标。
    """
    X, Y, Z = cam_pose.inverse_transform(point_w)[0]
    if Z <= Z_MIN:
        raise BehindCamera(f"point at camera depth {Z:.6g} m is behind the camera")
    return intr.f_u * X / Z + intr.c_u, intr.f_v * Y / Z + intr.c_v


def _project_visible(intr, cam_pose, points_w):
    cam_points = cam_pose.inverse_transform(points_w)
    visible = cam_points[cam_points[:, 2] > Z_MIN]
    if len(visible) == 0:
        return None
    u = intr.f_u * visible[:, 0] / visible[:, 2] + intr.c_u
    v = intr.f_v * visible[:, 1] / visible[:, 2] + intr.c_v
    return u, v


def detect(scene, cam_pose, intr, noise_px=1.0, rng=None):
    """
    模拟检测器：每个物体取可见模型点投影的最小外接轴对齐矩形，四条边各加
    [-noise_px, noise_px] 的均匀噪声。矩形不含任何姿态信息。

    参数:
    scene (list[SceneObject]): 场景物体。
    cam_pose (Pose): 相机位姿。
    intr (CameraIntrinsics): 相机内参。
    noise_px (float): 噪声幅度，像素。
    rng (np.random.Generator): 随机数发生器，noise_px > 0 时必须提供。

    返回:
    detections (list[tuple[str, BBox]]): 检测结果（完全在图像外的物体被丢弃）。
    """
    if not scene:
        raise NoDetection("empty scene")
    if noise_px > 0 and rng is None:
        raise ValidationError("an rng is required when noise_px > 0")

    detections = []
    for obj in scene:
        projected = _project_visible(intr, cam_pose, obj.world_points())
        if projected is None:
            continue
        u, v = projected
        sides = np.array([u.min(), v.min(), u.max(), v.max()])
        if noise_px > 0:
            sides = sides + rng.uniform(-noise_px, noise_px, size=4)
        u_min, v_min, u_max, v_max = sides
        # 完全在图像外
        if u_max <= 0.0 or v_max <= 0.0 or u_min >= intr.width or v_min >= intr.height:
            continue
        if u_min >= u_max or v_min >= v_max:
            log.debug(f"dropping collapsed box for '{obj.label}'")
            continue
        detections.append((obj.label, BBox(float(u_min), float(v_min), float(u_max), float(v_max))))

    if not detections:
        raise NoDetection("no object projects inside the image")
    return detections


def select_label(detections, target):
    """
    选出目标标签的包围盒；同名多个时取面积最大的，面积相同取 u_min 最小的。
    """
    candidates = [box for label, box in detections if label == target]
    if not candidates:
        raise LabelNotFound(f"label '{target}' not among {sorted({label for label, _ in detections})}")
    return min(candidates, key=lambda box: (-box.area, box.u_min))


def squarify(b):
    """边长取 max(宽, 高)，中心不变，不做裁剪（允许出现负坐标）"""
    cu, cv = b.center
    half = 0.5 * max(b.width, b.height)
    return BBox(cu - half, cv - half, cu + half, cv + half)


class FilterState:
    """最近 W 帧特征的环形缓冲区，单一所有者使用"""

    def __init__(self, window=50):
        if window < 1:
            raise ValidationError(f"filter window must be >= 1, got {window}")
        self.window = window
        self.buffer = deque(maxlen=window)

    def __len__(self):
        return len(self.buffer)

    def reset(self):
        self.buffer.clear()


def smooth(state, f):
    """
    压入 f 并返回缓冲区中所有特征的算术平均（缓冲区未满时对已有帧求平均）。
    """
    if state.buffer:
        state.buffer[0].check_compatible(f)
    state.buffer.append(f)
    mean = np.mean([entry.values for entry in state.buffer], axis=0)
    return FeatureVec(mean, f.unit, f.arity)


def bbox_corners(b):
    """四个角点，固定顺序 UL, UR, LR, LL"""
    return np.array([
        [b.u_min, b.v_min],
        [b.u_max, b.v_min],
        [b.u_max, b.v_max],
        [b.u_min, b.v_max],
    ])


def to_features8(b, intr):
    corners = bbox_corners(b)
    x = (corners[:, 0] - intr.c_u) / intr.f_u
    y = (corners[:, 1] - intr.c_v) / intr.f_v
    return FeatureVec(np.column_stack([x, y]).reshape(-1), FeatureUnit.NORMALIZED_METRIC, FeatureArity.CORNERS_8)


def features8_to_pixels(f8, intr):
    """to_features8 的逆映射，返回 4 x 2 的像素角点"""
    if f8.unit != FeatureUnit.NORMALIZED_METRIC or f8.arity != FeatureArity.CORNERS_8:
        raise UnitMismatch("expected corners_8 features in normalized_metric units")
    xy = f8.values.reshape(4, 2)
    return np.column_stack([xy[:, 0] * intr.f_u + intr.c_u, xy[:, 1] * intr.f_v + intr.c_v])


def to_features4(b, intr):
    """(u_UL/宽, v_UL/高, u_LR/宽, v_LR/高) * 100，先裁剪到图像范围"""
    u_min = min(max(b.u_min, 0.0), intr.width)
    u_max = min(max(b.u_max, 0.0), intr.width)
    v_min = min(max(b.v_min, 0.0), intr.height)
    v_max = min(max(b.v_max, 0.0), intr.height)
    values = 100.0 * np.array([u_min / intr.width, v_min / intr.height, u_max / intr.width, v_max / intr.height])
    return FeatureVec(np.clip(values, 0.0, 100.0), FeatureUnit.SCALED_0_100, FeatureArity.UL_LR_4)


def features8_to_features4(f8, intr):
    """由滤波后的 8 维归一化特征得到 4 维 [0,100] 特征（取 UL 与 LR）"""
    px = features8_to_pixels(f8, intr)
    return to_features4(BBox(px[0, 0], px[0, 1], px[2, 0], px[2, 1]), intr)


# ---- 检测器适配接口：每行一条检测 `frame_id label u_min v_min u_max v_max` ----

def format_detection_line(frame_id, label, box):
    return f"{frame_id} {label} {box.u_min!r} {box.v_min!r} {box.u_max!r} {box.v_max!r}"


def write_detections(stream, frame_id, detections):
    for label, box in detections:
        stream.write(format_detection_line(frame_id, label, box) + "\n")


def parse_detection_lines(lines):
    """
    解析检测记录流。

    返回:
    frames (dict[int, list[tuple[str, BBox]]]): 按帧号分组的检测结果。
    """
    frames = {}
    for line_number, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValidationError(f"detection record line {line_number}: expected 6 fields, got {len(parts)}")
        try:
            frame_id = int(parts[0])
            box = BBox(*(float(p) for p in parts[2:]))
        except ValueError as e:
            raise ValidationError(f"detection record line {line_number}: {e}") from e
        frames.setdefault(frame_id, []).append((parts[1], box))
    return frames


class EmulatedDetector:
    """几何检测器，按帧调用 detect"""

    def __init__(self, intr, noise_px, rng):
        self.intr = intr
        self.noise_px = noise_px
        self.rng = rng

    def __call__(self, frame_id, scene, cam_pose):
        return detect(scene, cam_pose, self.intr, self.noise_px, self.rng)


class RecordedDetector:
    """回放外部检测器记录的结果，代替模拟检测器"""

    def __init__(self, frames):
        self.frames = frames

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls(parse_detection_lines(f))

    def __call__(self, frame_id, scene, cam_pose):
        detections = self.frames.get(frame_id)
        if not detections:
            raise NoDetection(f"no recorded detection for frame {frame_id}")
        return detections


# ---- 物体模型 ----

def box_points(length, width, height):
    """长方体 8 个顶点，物体坐标系原点在底面中心"""
    hx, hy = 0.5 * length, 0.5 * width
    return np.array([[sx * hx, sy * hy, z] for z in (0.0, height) for sx in (-1, 1) for sy in (-1, 1)])


def cylinder_points(diameter, height, n=16):
    """圆柱：口沿和底面各 n 个采样点"""
    angles = 2.0 * math.pi * np.arange(n) / n
    ring = 0.5 * diameter * np.column_stack([np.cos(angles), np.sin(angles)])
    base = np.column_stack([ring, np.zeros(n)])
    rim = np.column_stack([ring, np.full(n, height)])
    return np.vstack([base, rim])
