"""
运行配置：每个模块一个 dataclass，默认值即冻结的实验设定；可由扁平 INI 文件
（[perception] [servo] [imitator] [simworld] [harness]）覆盖，再由命令行参数覆盖。
"""
import configparser
import logging as log
from dataclasses import dataclass, field, fields, replace

from errors import ValidationError
from imitator import TrainConfig
from perception import CameraIntrinsics
from servo import VsGains
from simworld import TASKS, WorldConfig


@dataclass(frozen=True)
class PerceptionConfig:
    f_u: float = 500.0
    f_v: float = 500.0
    c_u: float = 320.0
    c_v: float = 240.0
    width: int = 640
    height: int = 480
    noise_px: float = 1.0
    window: int = 50

    def __post_init__(self):
        if self.noise_px < 0:
            raise ValidationError(f"noise_px must be >= 0, got {self.noise_px}")
        if self.window < 1:
            raise ValidationError(f"filter window must be >= 1, got {self.window}")
        self.intrinsics  # 校验内参

    @property
    def intrinsics(self):
        return CameraIntrinsics(self.f_u, self.f_v, self.c_u, self.c_v, self.width, self.height)


@dataclass(frozen=True)
class HarnessConfig:
    horizon: int = 700
    dt: float = 1.0 / 30.0
    trials: int = 3
    seed: int = 0
    num_demos: int = 4
    demo_steps: int = 500
    r_inner: float = 0.03
    r_rim: float = 0.045
    eps_max: float = 0.2
    drop_offset: float = 0.10
    start_jitter: float = 0.01
    max_lost_frames: int = 30
    workers: int = 1

    def __post_init__(self):
        if self.horizon < 1 or self.trials < 1 or self.num_demos < 1 or self.demo_steps < 2:
            raise ValidationError("horizon, trials, num_demos must be >= 1 and demo_steps >= 2")
        if not self.dt > 0:
            raise ValidationError(f"dt must be > 0, got {self.dt}")
        if not 0 < self.r_inner < self.r_rim:
            raise ValidationError(f"need 0 < r_inner < r_rim, got {self.r_inner}, {self.r_rim}")
        if not self.eps_max > 0 or self.start_jitter < 0 or self.max_lost_frames < 0:
            raise ValidationError("eps_max must be > 0, start_jitter and max_lost_frames >= 0")
        if self.workers < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers}")


@dataclass(frozen=True)
class RunConfig:
    task: str = "cup"
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    servo: VsGains = field(default_factory=VsGains)
    imitator: TrainConfig = field(default_factory=TrainConfig)
    simworld: WorldConfig = field(default_factory=WorldConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}, got '{self.task}'")

    def override(self, section, **values):
        """用非 None 的值替换某一节的字段，返回新的 RunConfig"""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        current = getattr(self, section)
        known = {f.name for f in fields(current)}
        unknown = set(values) - known
        if unknown:
            raise ValidationError(f"unknown [{section}] keys: {sorted(unknown)}")
        try:
            return replace(self, **{section: replace(current, **values)})
        except TypeError as e:
            raise ValidationError(f"bad [{section}] value: {e}") from e


SECTIONS = ("perception", "servo", "imitator", "simworld", "harness")


def _coerce(raw, default, key):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(f"not a boolean: {raw}")
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            cast = int if default and all(isinstance(d, int) for d in default) else float
            return tuple(cast(p) for p in parts)
        return raw.strip()
    except ValueError as e:
        raise ValidationError(f"key '{key}': {e}") from e


def load_config(path, base=None):
    """
    读取 INI 配置文件。

    参数:
    path (str): 配置文件路径。
    base (RunConfig | None): 被覆盖的基础配置，默认为全部默认值。

    返回:
    (RunConfig): 合并后的配置；未知节或未知键抛出 ValidationError。
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as e:
        raise ValidationError(f"cannot read config {path}: {e}") from e

    config = base or RunConfig()
    if parser.defaults():
        raise ValidationError(f"{path}: keys outside a section are not allowed")
    for section in parser.sections():
        if section == "run":
            for key, raw in parser.items(section):
                if key != "task":
                    raise ValidationError(f"{path}: unknown [run] key '{key}'")
                config = replace(config, task=raw.strip())
            continue
        if section not in SECTIONS:
            raise ValidationError(f"{path}: unknown section [{section}], expected one of {SECTIONS}")
        current = getattr(config, section)
        defaults = {f.name: getattr(current, f.name) for f in fields(current)}
        values = {}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ValidationError(f"{path}: unknown [{section}] key '{key}'")
            values[key] = _coerce(raw, defaults[key], key)
        config = config.override(section, **values)
    log.debug(f"loaded config {path}: {config}")
    return config
