"""
运动学仿真世界：桌面上的物体、手眼相机末端的速度积分、5 个评估位置，
以及代替人工示教的脚本专家（鼠标任务、杯子任务）和示教文件读写。

世界坐标系 z 轴向上，桌面高度 table_height。所有几何默认值都是仿真设定，不是实测值。
"""
import csv
import logging as log
import math
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from errors import DemoFormatError, NoDetection, ObjectOutOfView, ValidationError, WorkspaceViolation
from geom3d import (Pose, UnitQuaternion, pose_integrate, quat_exp, quat_from_frame, quat_mul, slerp,
                    twist_between)
from imitator import STATE_DIM, Demonstrations, pack_state
from perception import (CameraIntrinsics, FilterState, SceneObject, box_points, cylinder_points, detect,
                        features8_to_features4, select_label, smooth, squarify, to_features8)

TASKS = ("mouse", "cup")
TASK_LABELS = {"mouse": "mouse", "cup": "cup"}
POSITION_IDS = ("center", "N1", "N2", "N3", "N4")
TRAINED_POSITION = "center"

# 杂乱场景中的干扰物：标签 -> (相对网格中心的桌面偏移, 尺寸 长宽高)
CLUTTER = {
    "book": ((0.28, 0.22), (0.20, 0.14, 0.03)),
    "plate": ((-0.28, 0.24), (0.22, 0.22, 0.02)),
    "clamp": ((0.26, -0.26), (0.12, 0.04, 0.05)),
    "spatula": ((-0.27, -0.22), (0.28, 0.06, 0.015)),
    "game_controller": ((0.0, 0.32), (0.15, 0.10, 0.05)),
}


@dataclass(frozen=True)
class WorldConfig:
    table_height: float = 0.0
    workspace_min: tuple = (0.0, -0.6, 0.02)
    workspace_max: tuple = (1.0, 0.6, 1.0)
    camera_offset: tuple = (0.0, 0.0, 0.03)
    grid_center: tuple = (0.5, 0.0)
    grid_offset: float = 0.15
    mouse_size: tuple = (0.11, 0.06, 0.035)
    cup_diameter: float = 0.08
    cup_height: float = 0.10
    cup_samples: int = 16
    start_jitter_pos: float = 0.03
    start_jitter_rot_deg: float = 5.0
    move_steps: int = 400
    start_speed: float = 1.0
    clutter: bool = False

    def __post_init__(self):
        for name in ("workspace_min", "workspace_max", "camera_offset", "grid_center", "mouse_size"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if any(lo >= hi for lo, hi in zip(self.workspace_min, self.workspace_max)):
            raise ValidationError("workspace_min must be below workspace_max on every axis")
        if self.grid_offset <= 0 or self.move_steps < 1:
            raise ValidationError("grid_offset and move_steps must be positive")
        if not 0.0 <= self.start_speed <= 2.0:
            raise ValidationError(f"start_speed must be in [0, 2] to keep the profile monotone, got {self.start_speed}")


@dataclass(eq=False)
class World:
    objects: list
    active_label: str
    position_id: str = TRAINED_POSITION
    config: WorldConfig = field(default_factory=WorldConfig)

    def __post_init__(self):
        if self.active_label not in {obj.label for obj in self.objects}:
            raise ValidationError(f"active label '{self.active_label}' is not in the scene")

    @property
    def table_height(self):
        return self.config.table_height

    def get(self, label):
        for obj in self.objects:
            if obj.label == label:
                return obj
        raise ValidationError(f"no object labelled '{label}'")

    @property
    def active_object(self):
        return self.get(self.active_label)


@dataclass(frozen=True, eq=False)
class PositionGrid:
    center: np.ndarray
    positions: dict

    def __getitem__(self, position_id):
        return self.positions[position_id]

    def is_trained(self, position_id):
        return position_id == TRAINED_POSITION


@dataclass(frozen=True, eq=False)
class RobotState:
    ee_pose: Pose
    extrinsic: Pose
    time: float = 0.0

    @property
    def camera_pose(self):
        return self.ee_pose.compose(self.extrinsic)


def make_grid(center, offset=0.15):
    """训练位置在中心，4 个新位置沿 x、y 各偏移 ±offset，均在桌面高度"""
    center = np.asarray(center, dtype=float).reshape(3)
    shifts = {"center": (0, 0), "N1": (offset, 0), "N2": (-offset, 0), "N3": (0, offset), "N4": (0, -offset)}
    positions = {pid: center + np.array([dx, dy, 0.0]) for pid, (dx, dy) in shifts.items()}
    return PositionGrid(center, positions)


def grid_for(config):
    cx, cy = config.grid_center
    return make_grid((cx, cy, config.table_height), config.grid_offset)


def make_object(task, position, config):
    if task == "mouse":
        points = box_points(*config.mouse_size)
    elif task == "cup":
        points = cylinder_points(config.cup_diameter, config.cup_height, config.cup_samples)
    else:
        raise ValidationError(f"unknown task '{task}', expected one of {TASKS}")
    return SceneObject(TASK_LABELS[task], points, Pose(position, UnitQuaternion.identity()))


def clutter_objects(config):
    cx, cy = config.grid_center
    objects = []
    for label, ((dx, dy), size) in CLUTTER.items():
        position = (cx + dx, cy + dy, config.table_height)
        objects.append(SceneObject(label, box_points(*size), Pose(position, UnitQuaternion.identity())))
    return objects


def build_world(task, position_id=TRAINED_POSITION, config=None, clutter=None):
    config = config or WorldConfig()
    grid = grid_for(config)
    if position_id not in grid.positions:
        raise ValidationError(f"unknown position '{position_id}', expected one of {POSITION_IDS}")
    objects = [make_object(task, grid[position_id], config)]
    if config.clutter if clutter is None else clutter:
        objects.extend(clutter_objects(config))
    return World(objects, TASK_LABELS[task], position_id, config)


def make_robot(ee_pose, config, time=0.0):
    return RobotState(ee_pose, Pose(config.camera_offset, UnitQuaternion.identity()), time)


def step(world, robot, twist, dt):
    """
    末端速度积分一步（世界坐标系速度），相机位姿由外参重新推出。

    返回:
    (RobotState): 新状态；末端离开工作空间时抛出 WorkspaceViolation。
    """
    pose = pose_integrate(robot.ee_pose, twist, dt)
    cfg = world.config
    lower = np.array(cfg.workspace_min) + np.array([0.0, 0.0, cfg.table_height])
    upper = np.array(cfg.workspace_max) + np.array([0.0, 0.0, cfg.table_height])
    if np.any(pose.p < lower) or np.any(pose.p > upper):
        raise WorkspaceViolation(f"end effector at {np.round(pose.p, 4).tolist()} left the workspace")
    return RobotState(pose, robot.extrinsic, robot.time + dt)


# ---- 脚本专家 ----

# 相机朝下：末端 z 轴指向 -z，x 轴沿世界 x
Q_DOWN = quat_from_frame((1.0, 0.0, 0.0), (0.0, -1.0, 0.0), (0.0, 0.0, -1.0))
# 侧视：末端 z 轴沿世界 +x 水平看向物体，图像 y 轴（向下）对应世界 -z
Q_SIDE = quat_from_frame((0.0, -1.0, 0.0), (0.0, 0.0, -1.0), (1.0, 0.0, 0.0))


def min_jerk(tau, start_speed=0.0):
    """
    五次最小加加速度时间缩放 s(τ) 及 ds/dτ。

    参数:
    tau (float): 归一化时间，截断到 [0, 1]。
    start_speed (float): 起点速度 ds/dτ(0)，取 [0, 2] 时 s 单调；0 为两端静止的标准曲线。

    返回:
    (float, float): s ∈ [0, 1] 与 ds/dτ；终点速度和两端加速度为 0。
    """
    tau = min(max(tau, 0.0), 1.0)
    a = start_speed
    s = a * tau + tau ** 3 * ((10.0 - 6.0 * a) + (8.0 * a - 15.0) * tau + (6.0 - 3.0 * a) * tau * tau)
    ds = (1.0 - tau) ** 2 * (a * (1.0 + 2.0 * tau - 15.0 * tau * tau) + 30.0 * tau * tau)
    return s, ds


class ExpertTask:
    """
    专家轨迹：位置按最小加加速度曲线插值，姿态按 slerp 插值；起点在名义起点附近随机抖动。
    """
    task = None

    def __init__(self, object_position, config=None):
        self.config = config or WorldConfig()
        self.c = np.asarray(object_position, dtype=float).reshape(3)

    def goal_pose(self):
        raise NotImplementedError

    def nominal_start(self):
        raise NotImplementedError

    def sample_start(self, rng):
        cfg = self.config
        nominal = self.nominal_start()
        dp = rng.uniform(-cfg.start_jitter_pos, cfg.start_jitter_pos, size=3)
        dr = np.deg2rad(rng.uniform(-cfg.start_jitter_rot_deg, cfg.start_jitter_rot_deg, size=3))
        return Pose(nominal.p + dp, quat_mul(quat_exp(dr), nominal.q))

    def _position(self, start, s):
        raise NotImplementedError

    def _position_ds(self, start, s):
        raise NotImplementedError

    def pose_at(self, start, t, dt):
        """起点为 start 时 t 秒的末端位姿；运动耗时 move_steps 步，之后停在目标"""
        s, _ = min_jerk(t / (self.config.move_steps * dt), self.config.start_speed)
        return Pose(self._position(start, s), slerp(start.q, self.goal_pose().q, s))

    def velocity_at(self, start, t, dt):
        """末端线速度（解析）"""
        duration = self.config.move_steps * dt
        s, ds = min_jerk(t / duration, self.config.start_speed)
        return self._position_ds(start, s) * ds / duration


class MouseTask(ExpertTask):
    """俯视接近鼠标并绕竖直轴转 90°"""
    task = "mouse"
    start_offset = np.array([-0.04, 0.03, 0.50])
    goal_height = 0.30
    yaw = -0.5 * math.pi

    def goal_pose(self):
        return Pose(self.c + np.array([0.0, 0.0, self.goal_height]), quat_mul(quat_exp((0.0, 0.0, self.yaw)), Q_DOWN))

    def nominal_start(self):
        return Pose(self.c + self.start_offset, Q_DOWN)

    def _position(self, start, s):
        return start.p + s * (self.goal_pose().p - start.p)

    def _position_ds(self, start, s):
        return self.goal_pose().p - start.p


class CupTask(ExpertTask):
    """
    从斜上方的侧视沿圆弧升到杯子正上方俯视（俯仰约 80° 并靠近）。
    光轴在整段弧上都穿过杯子半高处的瞄准点，姿态与弧上的仰角同步。
    """
    task = "cup"
    start_radius = 0.40
    goal_radius = 0.25
    start_elevation = math.radians(10.0)

    @property
    def aim(self):
        return self.c + np.array([0.0, 0.0, 0.5 * self.config.cup_height])

    def _elevation(self, s):
        return self.start_elevation + (0.5 * math.pi - self.start_elevation) * s

    def _arc(self, s):
        phi = self._elevation(s)
        rho = self.start_radius + (self.goal_radius - self.start_radius) * s
        return self.aim + rho * np.array([-math.cos(phi), 0.0, math.sin(phi)])

    def goal_pose(self):
        q = quat_mul(quat_exp((0.0, 0.5 * math.pi, 0.0)), Q_SIDE)
        return Pose(self._arc(1.0), q)

    def nominal_start(self):
        return Pose(self._arc(0.0), quat_mul(quat_exp((0.0, self.start_elevation, 0.0)), Q_SIDE))

    def _position(self, start, s):
        # 起点抖动随进度线性消失
        return self._arc(s) + (1.0 - s) * (start.p - self._arc(0.0))

    def _position_ds(self, start, s):
        phi = self._elevation(s)
        rho = self.start_radius + (self.goal_radius - self.start_radius) * s
        d_arc = ((self.goal_radius - self.start_radius) * np.array([-math.cos(phi), 0.0, math.sin(phi)])
                 + rho * (0.5 * math.pi - self.start_elevation) * np.array([math.sin(phi), 0.0, math.cos(phi)]))
        return d_arc - (start.p - self._arc(0.0))


EXPERTS = {"mouse": MouseTask, "cup": CupTask}


def make_expert(task, object_position, config=None):
    if task not in EXPERTS:
        raise ValidationError(f"unknown task '{task}', expected one of {TASKS}")
    return EXPERTS[task](object_position, config)


def observe(world, robot, intr, noise_px, rng, require_inside=False):
    """检测 -> 选目标 -> 正方形化，返回包围盒"""
    detections = detect(world.objects, robot.camera_pose, intr, noise_px, rng)
    box = select_label(detections, world.active_label)
    if require_inside and not box.inside(intr):
        raise ObjectOutOfView(f"'{world.active_label}' box {box} leaves the {intr.width}x{intr.height} image")
    return squarify(box)


def expert_demo(world, task, steps=500, dt=1.0 / 30.0, rng=None, intr=None, noise_px=1.0, window=50, start=None):
    """
    生成一条示教。

    参数:
    world (World): 物体在训练位置的世界。
    task (ExpertTask): 专家任务。
    steps (int): 记录步数。
    dt (float): 采样周期，秒。
    rng (np.random.Generator): 起点抖动和检测噪声的随机源。
    intr (CameraIntrinsics): 相机内参。
    noise_px (float): 检测噪声幅度，像素。
    window (int): 均值滤波窗口。
    start (Pose | None): 指定起点，None 时随机采样。

    返回:
    records (np.ndarray): (steps, 10) 的 (f, p, r) 记录。
    start (Pose): 实际起点。
    """
    rng = rng if rng is not None else np.random.default_rng()
    intr = intr or CameraIntrinsics()
    start = start if start is not None else task.sample_start(rng)
    q_anchor = task.goal_pose().q
    robot = make_robot(start, world.config)
    filt = FilterState(window)

    records = np.empty((steps, STATE_DIM))
    for k in range(steps):
        try:
            box = observe(world, robot, intr, noise_px, rng, require_inside=True)
        except NoDetection as e:
            raise ObjectOutOfView(f"object lost at demo step {k}: {e}") from e
        f8 = smooth(filt, to_features8(box, intr))
        records[k] = pack_state(features8_to_features4(f8, intr), robot.ee_pose.p, robot.ee_pose.q, q_anchor)
        if k < steps - 1:
            target = task.pose_at(start, (k + 1) * dt, dt)
            robot = step(world, robot, twist_between(robot.ee_pose, target, dt), dt)
    return records, start


def generate_demonstrations(task_name, num=4, steps=500, dt=1.0 / 30.0, seed=0, config=None, intr=None,
                            noise_px=1.0, window=50, progress=True):
    """在训练位置生成 num 条示教，每条使用独立的子随机源"""
    config = config or WorldConfig()
    world = build_world(task_name, TRAINED_POSITION, config, clutter=False)
    expert = make_expert(task_name, grid_for(config)[TRAINED_POSITION], config)
    children = np.random.SeedSequence(seed).spawn(num)

    demos, starts = [], []
    for n in tqdm(range(num), disable=not progress, desc=f"demo {task_name}"):
        records, start = expert_demo(world, expert, steps, dt, np.random.default_rng(children[n]), intr,
                                     noise_px, window)
        log.info(f"demo {n}: start p={np.round(start.p, 4).tolist()} q={np.round(start.q.as_array(), 4).tolist()}")
        demos.append(records)
        starts.append(start)
    return Demonstrations(np.stack(demos), expert.goal_pose().q, dt, task_name), starts


# ---- 示教文件：一行表头注释 + CSV ----

DEMO_COLUMNS = ["demo", "t", "f1", "f2", "f3", "f4", "p1", "p2", "p3", "r1", "r2", "r3"]
DEMO_UNITS = "f:scaled_0_100,p:cm,r:rotvec_x100"


def save_demonstrations(path, demos):
    anchor = ",".join(repr(v) for v in demos.q_anchor.as_array().tolist())
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# task={demos.task} dt={demos.dt!r} anchor={anchor} units={DEMO_UNITS}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(DEMO_COLUMNS)
        for n in range(demos.num_demos):
            for t in range(demos.length):
                writer.writerow([n, t, *(repr(float(v)) for v in demos.states[n, t])])


def _parse_header(line):
    if not line.startswith("#"):
        raise DemoFormatError("missing '# task=... dt=... anchor=...' header", 1)
    fields = dict(item.split("=", 1) for item in line[1:].split() if "=" in item)
    try:
        task = fields["task"]
        dt = float(fields["dt"])
        anchor = UnitQuaternion.from_array([float(v) for v in fields["anchor"].split(",")])
    except (KeyError, ValueError) as e:
        raise DemoFormatError(f"bad header: {e}", 1) from e
    if task not in TASKS:
        raise DemoFormatError(f"unknown task '{task}'", 1)
    return task, dt, anchor


def load_demonstrations(path):
    """
    读取示教文件，格式错误时抛出带行号的 DemoFormatError。
    """
    rows = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        task, dt, anchor = _parse_header(f.readline().rstrip("\r\n"))
        reader = csv.reader(f)
        if next(reader, None) != DEMO_COLUMNS:
            raise DemoFormatError(f"expected column header {','.join(DEMO_COLUMNS)}", 2)
        for parts in reader:
            # 第一行注释不经过 reader
            line_number = reader.line_num + 1
            if not parts:
                continue
            if len(parts) != len(DEMO_COLUMNS):
                raise DemoFormatError(f"expected {len(DEMO_COLUMNS)} fields, got {len(parts)}", line_number)
            try:
                n, t = int(parts[0]), int(parts[1])
                values = [float(v) for v in parts[2:]]
            except ValueError as e:
                raise DemoFormatError(str(e), line_number) from e
            if not all(math.isfinite(v) for v in values):
                raise DemoFormatError("non-finite value", line_number)
            demo_rows = rows.setdefault(n, [])
            if t != len(demo_rows):
                raise DemoFormatError(f"demo {n} expected t={len(demo_rows)}, got t={t}", line_number)
            demo_rows.append(values)
        last_line = reader.line_num + 1

    if not rows:
        raise DemoFormatError(f"{path} has no demonstration rows", last_line)
    lengths = {len(r) for r in rows.values()}
    if sorted(rows) != list(range(len(rows))) or len(lengths) != 1:
        raise DemoFormatError("demonstrations must be numbered 0..N-1 and have equal length", last_line)
    states = np.array([rows[n] for n in range(len(rows))], dtype=np.float64)
    return Demonstrations(states, anchor, dt, task)
