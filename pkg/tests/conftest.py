import pytest

from imitator import TrainConfig, train
from simworld import generate_demonstrations


def _default_training(task):
    demos, _ = generate_demonstrations(task, num=4, steps=500, seed=0, progress=False)
    model, curve = train(demos, TrainConfig(), progress=False)
    return demos, model, curve


@pytest.fixture(scope="session")
def cup_training():
    """4 条脚本示教 + 默认 20000 次迭代，只给 slow 测试用"""
    return _default_training("cup")


@pytest.fixture(scope="session")
def mouse_training():
    return _default_training("mouse")
