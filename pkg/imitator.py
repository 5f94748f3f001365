"""
NODE 模仿学习：目标网络 n_ϑ、定步长积分、按片段采样的 MSE 训练，以及开环推演输出次任务速度 σ。

状态 x = (f, p, r) 共 10 维：
    f  检测框左上、右下顶点，归一化到 [0, 100]
    p  末端位置，厘米
    r  以目标姿态为锚点的切空间旋转向量，乘以 100
"""
import json
import logging as log
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from errors import CheckpointFormatError, NumericalBlowup, SegmentTooLong, ValidationError
from geom3d import Twist, UnitQuaternion, from_tangent_coords, quat_log, quat_mul, tangent_coords

STATE_DIM = 10
F_SLICE = slice(0, 4)
P_SLICE = slice(4, 7)
R_SLICE = slice(7, 10)
ROTATION_SCALE = 100.0
POSITION_SCALE = 100.0  # m -> cm
BLOWUP_LIMIT = 1e6
INTEGRATORS = ("euler", "rk4")
CHECKPOINT_FORMAT = "ildvs-node-checkpoint"


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    learning_rate: float = 5e-4
    segment_length: int = 20
    integrator: str = "euler"
    dt: float = 1.0 / 30.0
    seed: int = 0
    hidden: tuple = (256, 256)
    augment_shift: float = 40.0
    augment_scale: float = 1.25

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.iterations < 1:
            raise ValidationError(f"iterations must be >= 1, got {self.iterations}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.segment_length < 2:
            raise ValidationError(f"segment length must be > 1, got {self.segment_length}")
        if self.integrator not in INTEGRATORS:
            raise ValidationError(f"integrator must be one of {INTEGRATORS}, got '{self.integrator}'")
        if not self.dt > 0:
            raise ValidationError(f"dt must be > 0, got {self.dt}")
        if self.augment_shift < 0 or self.augment_scale < 1:
            raise ValidationError(f"need augment_shift >= 0 and augment_scale >= 1, "
                                  f"got {self.augment_shift}, {self.augment_scale}")

    @property
    def augments(self):
        return self.augment_shift > 0 or self.augment_scale > 1


@dataclass(eq=False)
class Demonstrations:
    """
    示教数据集：states 形状 (N, T, 10)，单位见模块说明；q_anchor 为切空间锚点（目标姿态）。
    """
    states: np.ndarray
    q_anchor: UnitQuaternion
    dt: float = 1.0 / 30.0
    task: str = "cup"

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 3 or self.states.shape[2] != STATE_DIM:
            raise ValidationError(f"demonstrations must have shape (N, T, {STATE_DIM}), got {self.states.shape}")
        if self.states.shape[0] < 1:
            raise ValidationError("need at least one demonstration")
        if not np.all(np.isfinite(self.states)):
            raise ValidationError("demonstration records must be finite")

    @property
    def num_demos(self):
        return self.states.shape[0]

    @property
    def length(self):
        return self.states.shape[1]


class TargetNetwork(nn.Module):
    """MLP：ReLU 隐藏层，线性输出，float64"""

    def __init__(self, hidden=(256, 256), state_dim=STATE_DIM):
        super().__init__()
        sizes = (state_dim, *hidden, state_dim)
        self.layers = nn.ModuleList(
            nn.Linear(n_in, n_out, dtype=torch.float64) for n_in, n_out in zip(sizes[:-1], sizes[1:]))

    @property
    def layer_sizes(self):
        return [self.layers[0].in_features] + [layer.out_features for layer in self.layers]

    def forward(self, x):
        for layer in self.layers[:-1]:
            x = torch.relu(layer(x))
        return self.layers[-1](x)

    def pre_activations(self, x):
        """各隐藏层的 ReLU 输入，用于梯度检验时避开折点"""
        values = []
        for layer in self.layers[:-1]:
            z = layer(x)
            values.append(z)
            x = torch.relu(z)
        return values


def build_network(hidden=(256, 256), seed=0):
    """按 fan-in 缩放的均匀初始化（nn.Linear 默认的 Kaiming 均匀），不影响全局随机状态"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TargetNetwork(hidden)


@dataclass(eq=False)
class NodeModel:
    network: TargetNetwork
    q_anchor: UnitQuaternion
    dt: float = 1.0 / 30.0
    integrator: str = "euler"
    task: str = "cup"
    train_config: TrainConfig = field(default_factory=TrainConfig)
    final_loss: float = float("nan")


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def target_forward(network, x):
    """ẋ = n_ϑ(x)，单位为状态单位每秒"""
    return network(_as_tensor(x))


def _euler_step(network, x, dt):
    return x + dt * target_forward(network, x)


def _rk4_step(network, x, dt):
    k1 = target_forward(network, x)
    k2 = target_forward(network, x + 0.5 * dt * k1)
    k3 = target_forward(network, x + 0.5 * dt * k2)
    k4 = target_forward(network, x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


STEPPERS = {"euler": _euler_step, "rk4": _rk4_step}


def integrate(network, x0, steps, dt, method="euler"):
    """
    定步长显式积分。

    参数:
    network (TargetNetwork): 目标网络。
    x0 (Tensor | array-like): 初始状态，形状 (10,) 或 (B, 10)。
    steps (int): 积分步数，>= 1。
    dt (float): 步长，秒。
    method (str): "euler" 或 "rk4"。

    返回:
    trajectory (Tensor): 形状 (steps + 1, ...)，trajectory[0] == x0。
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    if not dt > 0:
        raise ValidationError(f"dt must be > 0, got {dt}")
    stepper = STEPPERS.get(method)
    if stepper is None:
        raise ValidationError(f"unknown integrator '{method}'")

    x = _as_tensor(x0)
    states = [x]
    for k in range(steps):
        x = stepper(network, x, dt)
        if not torch.all(torch.isfinite(x)) or torch.any(torch.abs(x) > BLOWUP_LIMIT):
            raise NumericalBlowup(f"state exceeded {BLOWUP_LIMIT:g} at integration step {k + 1}")
        states.append(x)
    return torch.stack(states)


def sample_segments(demos, segment_length, rng):
    """
    每条示教随机取一段长度为 T_s 的连续片段，起点均匀分布在 [0, T - T_s]。

    返回:
    starts (np.ndarray): (N,) 起点下标。
    segments (np.ndarray): (N, T_s, 10)。
    """
    T = demos.length
    if segment_length > T:
        raise SegmentTooLong(f"segment length {segment_length} exceeds demonstration length {T}")
    starts = rng.integers(0, T - segment_length + 1, size=demos.num_demos)
    offsets = starts[:, None] + np.arange(segment_length)[None, :]
    segments = demos.states[np.arange(demos.num_demos)[:, None], offsets]
    return starts, segments


def augment_features(segments, shift, scale, rng):
    """
    每段的框特征做同一个图像平面相似变换：绕段首框心缩放 s 再平移 (du, dv)，p、r 不变。
    网络因此不依赖框在图像中的绝对位置，物体换到新位置时开环信念仍在训练分布内。

    参数:
    segments (np.ndarray): (N, T_s, 10) 片段。
    shift (float): 平移幅度，[0,100] 特征单位，du、dv 各自均匀分布在 [-shift, shift]。
    scale (float): 缩放上限，s 在 [1/scale, scale] 上对数均匀分布。
    rng (np.random.Generator): 随机源。

    返回:
    (np.ndarray): 变换后的新数组。
    """
    n = segments.shape[0]
    offset = rng.uniform(-shift, shift, size=(n, 2))
    s = np.exp(rng.uniform(-math.log(scale), math.log(scale), size=n))
    out = segments.copy()
    # (N, T_s, 角点 UL/LR, u/v)
    f = out[..., F_SLICE].reshape(n, -1, 2, 2)
    center = 0.5 * (f[:, 0, 0] + f[:, 0, 1])[:, None, None, :]
    f = center + offset[:, None, None, :] + s[:, None, None, None] * (f - center)
    out[..., F_SLICE] = f.reshape(n, -1, 4)
    return out


def node_loss(pred, truth):
    """L = ½ Σ_n Σ_t ||x - x̂||²"""
    return 0.5 * ((pred - truth) ** 2).sum()


def node_loss_terms(pred, truth):
    """按 f / p / r 分解的损失，三项之和等于 node_loss"""
    diff2 = (pred - truth) ** 2
    return {
        "f": 0.5 * diff2[..., F_SLICE].sum(),
        "p": 0.5 * diff2[..., P_SLICE].sum(),
        "r": 0.5 * diff2[..., R_SLICE].sum(),
    }


def predict_segments(network, segments, dt, method):
    """从每段的首个状态出发积分，返回与 segments 同形状 (N, T_s, 10) 的预测"""
    truth = _as_tensor(segments)
    trajectory = integrate(network, truth[:, 0], truth.shape[1] - 1, dt, method)
    return trajectory.transpose(0, 1)


def train(demos, config, progress=True):
    """
    用 Adam（β₁=0.9, β₂=0.999, ε=1e-8）最小化 node_loss，梯度经展开的积分器反向传播。

    参数:
    demos (Demonstrations): 示教数据。
    config (TrainConfig): 训练参数。
    progress (bool): 是否显示 tqdm 进度条。

    返回:
    model (NodeModel): 训练好的模型。
    loss_curve (list[float]): 每次迭代（参数更新前）的损失。
    """
    if config.segment_length > demos.length:
        raise SegmentTooLong(f"segment length {config.segment_length} exceeds demonstration length {demos.length}")

    network = build_network(config.hidden, config.seed)
    optimizer = torch.optim.Adam(network.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(config.seed)

    log.info(f"training NODE {network.layer_sizes} on {demos.num_demos} demos x {demos.length} steps, "
             f"{config.iterations} iterations, lr={config.learning_rate:g}, T_s={config.segment_length}")

    loss_curve = []
    bar = tqdm(range(config.iterations), disable=not progress, desc="train")
    for iteration in bar:
        _, segments = sample_segments(demos, config.segment_length, rng)
        if config.augments:
            segments = augment_features(segments, config.augment_shift, config.augment_scale, rng)
        truth = torch.from_numpy(segments)
        try:
            pred = predict_segments(network, truth, config.dt, config.integrator)
        except NumericalBlowup as e:
            raise NumericalBlowup(str(e), iteration=iteration) from e
        loss = node_loss(pred, truth)
        if not torch.isfinite(loss):
            raise NumericalBlowup("loss is not finite", iteration=iteration)

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        loss_curve.append(loss.item())
        if iteration % 100 == 0:
            bar.set_postfix(loss=f"{loss_curve[-1]:.4g}")

    log.info(f"final loss {loss_curve[-1]:.6g} (initial {loss_curve[0]:.6g})")
    model = NodeModel(network, demos.q_anchor, config.dt, config.integrator, demos.task, config, loss_curve[-1])
    return model, loss_curve


# ---- 状态打包与开环推演 ----

def pack_state(f4, p, q, q_anchor):
    """
    由特征、位置（米）和姿态构造 10 维 NODE 状态。

    参数:
    f4 (FeatureVec | array-like): 4 维 [0,100] 特征。
    p (array-like): 末端位置，米。
    q (UnitQuaternion): 末端姿态。
    q_anchor (UnitQuaternion): 切空间锚点。
    """
    f = getattr(f4, "values", f4)
    r = tangent_coords(q, q_anchor)
    return np.concatenate([np.asarray(f, dtype=float), POSITION_SCALE * np.asarray(p, dtype=float),
                           ROTATION_SCALE * r])


def unpack_pose(x, q_anchor):
    """NODE 状态 -> (位置 米, 姿态)"""
    x = np.asarray(x, dtype=float)
    return x[P_SLICE] / POSITION_SCALE, from_tangent_coords(x[R_SLICE] / ROTATION_SCALE, q_anchor)


def rollout_step(network, belief, dt, q_anchor, method="euler"):
    """
    开环推演一步：返回次任务速度 σ（SI 单位）和下一步的内部信念。

    σ.v 为位置增量换算的 m/s（euler 时即 ṗ / 100）；σ.ω 为使当前姿态在 dt 内转到
    下一步信念姿态的世界系角速度，因此按 pose_integrate 执行 σ.ω 与信念姿态完全一致。
    """
    x = _as_tensor(belief)
    if not torch.all(torch.isfinite(x)):
        raise NumericalBlowup("belief is not finite")
    with torch.no_grad():
        x_next = STEPPERS[method](network, x, dt)
    if not torch.all(torch.isfinite(x_next)) or torch.any(torch.abs(x_next) > BLOWUP_LIMIT):
        raise NumericalBlowup(f"belief exceeded {BLOWUP_LIMIT:g}")
    belief = x.numpy()
    belief_next = x_next.numpy()

    v = (belief_next[P_SLICE] - belief[P_SLICE]) / dt / POSITION_SCALE
    q_now = from_tangent_coords(belief[R_SLICE] / ROTATION_SCALE, q_anchor)
    q_next = from_tangent_coords(belief_next[R_SLICE] / ROTATION_SCALE, q_anchor)
    omega = quat_log(quat_mul(q_next, q_now.conj())) / dt
    return Twist(v, omega), belief_next


class NodeRollout:
    """持有一个 NODE 信念状态的推演器，单一所有者使用"""

    def __init__(self, model, initial_state):
        self.model = model
        self.belief = np.asarray(initial_state, dtype=np.float64).copy()

    def step(self, dt=None):
        sigma, self.belief = rollout_step(self.model.network, self.belief, dt or self.model.dt,
                                          self.model.q_anchor, self.model.integrator)
        return sigma


# ---- 检查点（JSON 文本） ----

def save_checkpoint(model, path):
    layers = model.network.layers
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "task": model.task,
        "architecture": {
            "layer_sizes": model.network.layer_sizes,
            "activations": ["relu"] * (len(layers) - 1) + ["linear"],
        },
        # 行主序：每个矩阵形状为 (out, in)
        "weights": [layer.weight.detach().numpy().tolist() for layer in layers],
        "biases": [layer.bias.detach().numpy().tolist() for layer in layers],
        "train_config": asdict(model.train_config),
        "seed": model.train_config.seed,
        "integrator": model.integrator,
        "dt": model.dt,
        "anchor_quaternion": model.q_anchor.as_array().tolist(),
        "scaling": {
            "rotation_scale": ROTATION_SCALE,
            "position_unit": "cm",
            "position_scale": POSITION_SCALE,
            "feature_range": [0.0, 100.0],
        },
        "final_loss": model.final_loss,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)


def load_checkpoint(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {e}") from e
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path} is not a NODE checkpoint")

    try:
        sizes = payload["architecture"]["layer_sizes"]
        if sizes[0] != STATE_DIM or sizes[-1] != STATE_DIM:
            raise CheckpointFormatError(f"checkpoint state dimension must be {STATE_DIM}, got {sizes}")
        if payload["scaling"]["rotation_scale"] != ROTATION_SCALE:
            raise CheckpointFormatError("unsupported rotation scaling in checkpoint")
        network = TargetNetwork(tuple(sizes[1:-1]))
        with torch.no_grad():
            for layer, weight, bias in zip(network.layers, payload["weights"], payload["biases"]):
                layer.weight.copy_(torch.tensor(weight, dtype=torch.float64))
                layer.bias.copy_(torch.tensor(bias, dtype=torch.float64))
        config = TrainConfig(**payload["train_config"])
        return NodeModel(
            network=network,
            q_anchor=UnitQuaternion.from_array(payload["anchor_quaternion"]),
            dt=float(payload["dt"]),
            integrator=payload["integrator"],
            task=payload["task"],
            train_config=config,
            final_loss=float(payload.get("final_loss", math.nan)),
        )
    except (KeyError, TypeError, RuntimeError) as e:
        raise CheckpointFormatError(f"malformed checkpoint {path}: {e}") from e
