"""
三种控制方案（DVS、IIL、ILDVS）在仿真世界上的闭环/开环驱动、评价指标 η、δ、ε、
杯子任务的几何投放判定，以及 5 个位置 x 3 次的评估流程和报告。
"""
import csv
import json
import logging as log
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from scipy import stats
from tqdm import tqdm

from errors import (LabelNotFound, NoDetection, NoGroundTruth, NonPositiveDepth, SimulationError, ValidationError,
                    WorkspaceViolation)
from geom3d import Pose, Twist, geodesic_angle
from imitator import NodeRollout, pack_state
from perception import (EmulatedDetector, FilterState, detect, features8_to_features4, select_label, smooth,
                        squarify, to_features8)
from servo import VsGains, classic_law, combined_law, stack_interaction
from simworld import (POSITION_IDS, TRAINED_POSITION, World, build_world, grid_for, make_expert, make_robot,
                      step)


class Scheme(Enum):
    DVS = "dvs"
    IIL = "iil"
    ILDVS = "ildvs"


SCHEME_ORDER = (Scheme.DVS, Scheme.IIL, Scheme.ILDVS)
RESULT_COLUMNS = ["task", "scheme", "position", "trial", "steps", "eta_final", "delta", "epsilon", "success",
                  "termination"]
TERMINATIONS = ("completed", "workspace_violation", "lost_target", "blowup")


def parse_scheme(value):
    try:
        return value if isinstance(value, Scheme) else Scheme(str(value).lower())
    except ValueError as e:
        raise ValidationError(f"unknown scheme '{value}', expected one of {[s.value for s in Scheme]}") from e


@dataclass(frozen=True, eq=False)
class TrialConfig:
    scheme: Scheme
    position_id: str = TRAINED_POSITION
    trial: int = 1
    horizon: int = 700
    gains: VsGains = field(default_factory=VsGains)
    model: object = None  # imitator.NodeModel
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", parse_scheme(self.scheme))
        if (self.model is None) != (self.scheme == Scheme.DVS):
            raise ValidationError(f"scheme {self.scheme.value} "
                                  + ("needs a trained model" if self.model is None else "takes no model"))
        if self.position_id not in POSITION_IDS:
            raise ValidationError(f"unknown position '{self.position_id}', expected one of {POSITION_IDS}")
        if self.trial < 1 or self.horizon < 1:
            raise ValidationError("trial index and horizon must be >= 1")


@dataclass(eq=False)
class TrialResult:
    task: str
    scheme: Scheme
    position_id: str
    trial: int
    eta_series: list
    delta: float = None
    epsilon: float = math.nan
    epsilon_start: float = math.nan
    success: float = None
    termination: str = "completed"
    final_pose: Pose = None
    max_omega: float = 0.0

    @property
    def steps(self):
        return len(self.eta_series) - 1

    @property
    def eta_final(self):
        return self.eta_series[-1] if self.eta_series else math.nan

    def as_row(self):
        return {
            "task": self.task,
            "scheme": self.scheme.value,
            "position": self.position_id,
            "trial": str(self.trial),
            "steps": str(self.steps),
            "eta_final": _fmt(self.eta_final),
            "delta": _fmt(self.delta),
            "epsilon": _fmt(self.epsilon),
            "success": _fmt(self.success),
            "termination": self.termination,
        }


def _fmt(value):
    return "" if value is None else f"{value:.10g}"


# ---- 指标 ----

def metric_eta(f, f_star):
    return float(np.linalg.norm(f - f_star))


def metric_delta(p_T, p_g):
    """末端最终位置与示教终点的欧氏距离，米；新位置没有真值（p_g 为 None）"""
    if p_g is None:
        raise NoGroundTruth("no demonstrated goal exists for a novel object position")
    return float(np.linalg.norm(np.asarray(p_T, dtype=float) - np.asarray(p_g, dtype=float)))


def metric_epsilon(q_T, q_g):
    return geodesic_angle(q_T, q_g)


def success_drop(final_ee, cup, r_inner, r_rim, eps_max, q_goal, drop_offset=0.10):
    """
    几何投放判定：投放点（末端 z 轴前方 drop_offset 处）到杯轴的水平距离 d。

    返回:
    (float): d <= r_inner 且 ε <= eps_max 为 1；r_inner < d <= r_rim 且 ε <= eps_max 为 0.5；否则 0。
    """
    if metric_epsilon(final_ee.q, q_goal) > eps_max:
        return 0.0
    drop = final_ee.transform_point((0.0, 0.0, drop_offset))
    d = float(np.linalg.norm(drop[:2] - cup.pose.p[:2]))
    if d <= r_inner:
        return 1.0
    if d <= r_rim:
        return 0.5
    return 0.0


# ---- 任务上下文：期望特征与目标 ----

@dataclass(frozen=True, eq=False)
class TaskContext:
    task: str
    config: object  # config.RunConfig
    goal_pose: Pose
    f_star: object  # FeatureVec，8 维归一化
    z_star: float
    expert: object

    @property
    def q_goal(self):
        return self.goal_pose.q

    def goal_position(self, position_id):
        if position_id != TRAINED_POSITION:
            raise NoGroundTruth(f"position {position_id} was never demonstrated")
        return self.goal_pose.p


def object_depth(world, cam_pose, label=None):
    obj = world.get(label or world.active_label)
    return float(np.mean(cam_pose.inverse_transform(obj.world_points())[:, 2]))


def prepare_task(task, run_config):
    """在训练位置、示教目标位姿处取一帧无噪声检测，正方形化后作为 f*"""
    world_cfg = run_config.simworld
    expert = make_expert(task, grid_for(world_cfg)[TRAINED_POSITION], world_cfg)
    goal = expert.goal_pose()
    world = build_world(task, TRAINED_POSITION, world_cfg, clutter=False)
    robot = make_robot(goal, world_cfg)
    intr = run_config.perception.intrinsics
    box = select_label(detect(world.objects, robot.camera_pose, intr, noise_px=0.0), world.active_label)
    f_star = to_features8(squarify(box), intr)
    z_star = object_depth(world, robot.camera_pose)
    log.debug(f"{task}: f*={np.round(f_star.values, 5).tolist()} z*={z_star:.4f}")
    return TaskContext(task, run_config, goal, f_star, z_star, expert)


# ---- 速度坐标变换 ----

def camera_to_ee_twist(robot, v_c, omega_c):
    """相机系下的相机速度 -> 世界系下的末端速度（含外参杠杆臂）"""
    cam = robot.camera_pose
    R_c = cam.rotation
    omega = R_c @ np.asarray(omega_c, dtype=float)
    arm = cam.p - robot.ee_pose.p
    return Twist(R_c @ np.asarray(v_c, dtype=float) - np.cross(omega, arm), omega)


def ee_to_camera_twist(robot, twist):
    """世界系末端速度 -> 相机系下的相机 (v, ω)"""
    cam = robot.camera_pose
    R_c = cam.rotation
    arm = cam.p - robot.ee_pose.p
    return R_c.T @ (twist.v + np.cross(twist.omega, arm)), R_c.T @ twist.omega


# ---- 单次试验 ----

def _trial_seed(seed, scheme, position_id, trial):
    return np.random.SeedSequence([seed, SCHEME_ORDER.index(scheme), POSITION_IDS.index(position_id), trial])


def run_trial(cfg, world, context, detector=None, rng=None):
    """
    运行一次试验。

    参数:
    cfg (TrialConfig): 方案、位置、次数、增益和模型。
    world (World): 物体放在 cfg.position_id 处的世界。
    context (TaskContext): 期望特征和示教目标。
    detector (callable | None): (frame_id, scene, cam_pose) -> detections，默认为模拟检测器。
    rng (np.random.Generator | None): 起点抖动和检测噪声，默认由 (seed, 方案, 位置, 次数) 派生。

    返回:
    (TrialResult): 仿真错误不会抛出，而是记录为终止原因。
    """
    run_config = context.config
    hcfg = run_config.harness
    pcfg = run_config.perception
    intr = pcfg.intrinsics
    gains = cfg.gains
    dt = hcfg.dt
    rng = rng if rng is not None else np.random.default_rng(
        _trial_seed(cfg.seed, cfg.scheme, cfg.position_id, cfg.trial))
    detector = detector or EmulatedDetector(intr, pcfg.noise_px, rng)

    if cfg.model is not None and cfg.model.task != context.task:
        raise ValidationError(f"model was trained for '{cfg.model.task}', trial task is '{context.task}'")

    nominal = context.expert.nominal_start()
    start = Pose(nominal.p + rng.uniform(-hcfg.start_jitter, hcfg.start_jitter, size=3), nominal.q)
    robot = make_robot(start, world.config)
    filt = FilterState(pcfg.window)
    uses_detector = cfg.scheme != Scheme.IIL

    result = TrialResult(context.task, cfg.scheme, cfg.position_id, cfg.trial, [],
                         epsilon_start=metric_epsilon(start.q, context.q_goal))
    rollout = None
    f8 = None
    lost = 0

    for k in range(cfg.horizon + 1):
        try:
            box = squarify(select_label(detector(k, world.objects, robot.camera_pose), world.active_label))
            f8 = smooth(filt, to_features8(box, intr))
            lost = 0
        except (NoDetection, LabelNotFound) as e:
            lost += 1
            log.debug(f"frame {k}: {e}")
            if f8 is None or (uses_detector and lost > hcfg.max_lost_frames):
                result.termination = "lost_target"
                break
        result.eta_series.append(metric_eta(f8, context.f_star))
        if k == cfg.horizon:
            break

        try:
            if cfg.model is not None and rollout is None:
                state = pack_state(features8_to_features4(f8, intr), robot.ee_pose.p, robot.ee_pose.q,
                                   cfg.model.q_anchor)
                rollout = NodeRollout(cfg.model, state)
            twist = _command(cfg.scheme, robot, world, f8, context, gains, rollout, dt)
            result.max_omega = max(result.max_omega, float(np.linalg.norm(twist.omega)))
            robot = step(world, robot, twist, dt)
        except WorkspaceViolation as e:
            log.info(f"{cfg.scheme.value}/{cfg.position_id}/{cfg.trial}: {e}")
            result.termination = "workspace_violation"
            break
        except (SimulationError, NonPositiveDepth, np.linalg.LinAlgError) as e:
            log.warning(f"{cfg.scheme.value}/{cfg.position_id}/{cfg.trial} step {k}: {e}")
            result.termination = "blowup"
            break

    if not result.eta_series:
        result.eta_series.append(math.nan)
    final = robot.ee_pose
    result.final_pose = final
    result.epsilon = metric_epsilon(final.q, context.q_goal)
    if cfg.position_id == TRAINED_POSITION:
        result.delta = metric_delta(final.p, context.goal_position(cfg.position_id))
    if context.task == "cup":
        result.success = success_drop(final, world.active_object, hcfg.r_inner, hcfg.r_rim, hcfg.eps_max,
                                      context.q_goal, hcfg.drop_offset)
    return result


def _command(scheme, robot, world, f8, context, gains, rollout, dt):
    """按方案计算世界系末端速度指令"""
    if scheme == Scheme.IIL:
        return rollout.step(dt)

    if gains.depth_mode == "true":
        z_hat = object_depth(world, robot.camera_pose)
    elif gains.depth_mode == "fixed":
        z_hat = gains.z_hat
    else:
        z_hat = context.z_star
    e = f8 - context.f_star
    L = stack_interaction(f8, z_hat)

    if scheme == Scheme.DVS:
        out = classic_law(e, L, None, gains)
        return camera_to_ee_twist(robot, out.velocity[:3], out.velocity[3:])

    # ILDVS：NODE 角速度直接下发，其图像效应作为前馈；平移由主任务和 NODE 线速度（次任务）决定
    sigma = rollout.step(dt)
    sigma_v_c, omega_c = ee_to_camera_twist(robot, sigma)
    L_v, L_w = L[:, :3], L[:, 3:]
    out = combined_law(e, L_v, sigma_v_c, gains, feedforward=L_w @ omega_c)
    return camera_to_ee_twist(robot, out.velocity, omega_c)


# ---- 评估流程 ----

def read_results(csv_path):
    if not Path(csv_path).exists():
        return []
    with open(csv_path, "r", newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _row_key(row):
    return row["task"], row["scheme"], row["position"], str(row["trial"])


def write_eta_series(path, eta_series):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "eta"])
        writer.writeheader()
        for k, eta in enumerate(eta_series):
            writer.writerow({"step": k, "eta": f"{eta:.10g}"})


def run_protocol(context, model=None, out_dir="results", schemes=SCHEME_ORDER, positions=POSITION_IDS,
                 trials=None, workers=None, clutter=None, target=None, seed=None, progress=True):
    """
    方案 x 位置 x 次数 的完整评估，结果逐行追加到 results.csv（已有的行会跳过），
    每次试验的 η 序列写到 series/ 目录。

    返回:
    csv_path (Path): 结果文件路径。
    """
    run_config = context.config
    hcfg = run_config.harness
    trials = trials or hcfg.trials
    workers = workers or hcfg.workers
    seed = hcfg.seed if seed is None else seed
    schemes = [parse_scheme(s) for s in schemes]
    if model is not None and model.task != context.task:
        raise ValidationError(f"model was trained for '{model.task}', protocol task is '{context.task}'")
    if any(s != Scheme.DVS for s in schemes) and model is None:
        raise ValidationError("IIL and ILDVS need a trained model")

    out_dir = Path(out_dir)
    series_dir = out_dir / "series"
    series_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "results.csv"
    done = {_row_key(row) for row in read_results(csv_path)}

    jobs = []
    for scheme in schemes:
        for position_id in positions:
            for trial in range(1, trials + 1):
                if (context.task, scheme.value, position_id, str(trial)) in done:
                    continue
                jobs.append(TrialConfig(scheme, position_id, trial, hcfg.horizon, run_config.servo,
                                        None if scheme == Scheme.DVS else model, seed))
    log.info(f"{context.task}: {len(jobs)} trials to run, {len(done)} already in {csv_path}")

    def run_job(cfg):
        world = build_world(context.task, cfg.position_id, run_config.simworld, clutter=clutter)
        if target is not None:
            world = retarget(world, target)
        return run_trial(cfg, world, context)

    # 试验线程内的小矩阵运算不再开 torch 线程，结束后恢复调用方的设置
    torch_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        with open(csv_path, "a", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=RESULT_COLUMNS)
            if f.tell() == 0:
                writer.writeheader()
            with ThreadPoolExecutor(max_workers=workers) as executor:
                futures = [executor.submit(run_job, cfg) for cfg in jobs]
                # 按提交顺序写入，保证结果文件与线程数无关
                for future in tqdm(futures, disable=not progress, desc=f"protocol {context.task}"):
                    result = future.result()
                    writer.writerow(result.as_row())
                    f.flush()
                    name = f"eta_{result.task}_{result.scheme.value}_{result.position_id}_{result.trial}.csv"
                    write_eta_series(series_dir / name, result.eta_series)
    finally:
        torch.set_num_threads(torch_threads)
    return csv_path


def retarget(world, label):
    return World(world.objects, label, world.position_id, world.config)


# ---- 汇总 ----

def mean_ci(values, confidence=0.95):
    """均值与 t 分布置信区间半宽；样本少于 2 个时半宽为 0"""
    values = np.asarray([v for v in values if v is not None and not math.isnan(v)], dtype=float)
    if len(values) == 0:
        return None, None
    mean = float(values.mean())
    if len(values) < 2:
        return mean, 0.0
    sem = float(values.std(ddof=1)) / math.sqrt(len(values))
    return mean, float(stats.t.ppf(0.5 + confidence / 2.0, len(values) - 1) * sem)


def _num(value):
    return None if value in ("", None) else float(value)


def summarize(rows):
    """
    按任务、方案汇总：η、δ（仅训练位置）、ε 的均值和 95% 置信区间，各位置的均值，
    以及杯子任务的训练/新位置/总体投放成功率。
    """
    summary = {}
    for task in sorted({row["task"] for row in rows}):
        task_rows = [row for row in rows if row["task"] == task]
        schemes = {}
        for scheme in SCHEME_ORDER:
            srows = [row for row in task_rows if row["scheme"] == scheme.value]
            if not srows:
                continue
            entry = {"trials": len(srows)}
            for metric in ("eta_final", "delta", "epsilon"):
                mean, half = mean_ci(_num(row[metric]) for row in srows)
                entry[metric] = {"mean": mean, "ci95": half}
            entry["positions"] = {}
            for position_id in POSITION_IDS:
                prows = [row for row in srows if row["position"] == position_id]
                if prows:
                    entry["positions"][position_id] = {
                        metric: mean_ci(_num(row[metric]) for row in prows)[0]
                        for metric in ("eta_final", "delta", "epsilon")}
            success = [_num(row["success"]) for row in srows]
            if any(s is not None for s in success):
                train = [_num(r["success"]) for r in srows if r["position"] == TRAINED_POSITION]
                novel = [_num(r["success"]) for r in srows if r["position"] != TRAINED_POSITION]
                entry["success"] = {"train": mean_ci(train)[0], "novel": mean_ci(novel)[0],
                                    "overall": mean_ci(success)[0]}
            entry["terminations"] = {t: sum(row["termination"] == t for row in srows) for t in TERMINATIONS}
            schemes[scheme.value] = entry
        summary[task] = schemes
    return summary


def write_report(csv_paths, out_dir, plot=False):
    """汇总一个或多个结果文件，写 summary.json；plot 为真时画各位置的 η 曲线"""
    rows = []
    for path in csv_paths:
        rows.extend(read_results(path))
    if not rows:
        raise ValidationError(f"no result rows in {[str(p) for p in csv_paths]}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize(rows)
    summary_path = out_dir / "summary.json"
    with open(summary_path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    if plot:
        for csv_path in csv_paths:
            plot_eta_curves(Path(csv_path).parent / "series", out_dir, rows)
    return summary_path, summary


def read_eta_series(path):
    with open(path, "r", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        return [float(row["eta"]) for row in reader]


def plot_eta_curves(series_dir, out_dir, rows, trial=1):
    """每个任务、每个位置一张图，三种方案的 η 曲线"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for task in sorted({row["task"] for row in rows}):
        for position_id in POSITION_IDS:
            fig, ax = plt.subplots(figsize=(6, 4))
            plotted = False
            for scheme in SCHEME_ORDER:
                path = Path(series_dir) / f"eta_{task}_{scheme.value}_{position_id}_{trial}.csv"
                if not path.exists():
                    continue
                ax.plot(read_eta_series(path), label=scheme.value.upper())
                plotted = True
            if plotted:
                ax.set_xlabel("step")
                ax.set_ylabel("eta")
                ax.set_title(f"{task} / {position_id}")
                ax.legend()
                target = Path(out_dir) / f"eta_{task}_{position_id}.png"
                fig.savefig(target, dpi=100)
                written.append(target)
            plt.close(fig)
    log.info(f"wrote {len(written)} figures to {out_dir}")
    return written
