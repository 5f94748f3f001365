import math

import numpy as np
import pytest
import torch

import harness
from config import RunConfig
from errors import NoDetection, NoGroundTruth, NumericalBlowup, UnitMismatch, ValidationError
from geom3d import Pose, geodesic_angle, quat_exp, quat_mul
from imitator import NodeModel, TargetNetwork
from perception import EmulatedDetector, features8_to_pixels
from harness import (RESULT_COLUMNS, TERMINATIONS, Scheme, TrialConfig, camera_to_ee_twist, ee_to_camera_twist,
                     mean_ci, metric_delta, metric_epsilon, metric_eta, parse_scheme, prepare_task, read_eta_series,
                     read_results, retarget, run_protocol, run_trial, success_drop, summarize, write_report)
from simworld import Q_DOWN, WorldConfig, build_world, make_object, make_robot


def mouse_config(horizon=90):
    return RunConfig(task="mouse").override("harness", horizon=horizon)


def constant_model(derivative, task="mouse"):
    """ẋ 恒为 derivative（状态单位每秒）的 NODE"""
    net = TargetNetwork(hidden=(4, 4))
    with torch.no_grad():
        for layer in net.layers:
            layer.weight.zero_()
            layer.bias.zero_()
        net.layers[-1].bias.copy_(torch.as_tensor(derivative, dtype=torch.float64))
    return NodeModel(net, quat_mul(quat_exp((0.0, 0.0, -0.5 * math.pi)), Q_DOWN), 1.0 / 30.0, "euler", task)


def yaw_model(rate, task="mouse"):
    """只输出常数旋转速率（绕世界 z，单位 rad/s）的 NODE"""
    derivative = np.zeros(10)
    derivative[9] = 100.0 * rate
    return constant_model(derivative, task)


def drift_model(velocity, task="mouse"):
    """只输出常数末端线速度（世界系，m/s）、不转动的 NODE"""
    derivative = np.zeros(10)
    derivative[4:7] = 100.0 * np.asarray(velocity, dtype=float)
    return constant_model(derivative, task)


def test_metrics():
    assert metric_eta(np.array([3.0, 4.0, 0, 0, 0, 0, 0, 0]), np.zeros(8)) == pytest.approx(5.0)
    assert metric_delta((0.5, 0.0, 0.30), (0.5, 0.0, 0.35)) == pytest.approx(0.05)
    with pytest.raises(NoGroundTruth):
        metric_delta((0.5, 0.0, 0.3), None)
    assert metric_epsilon(quat_exp((0.0, 0.0, 0.5 * math.pi)), quat_exp((0.0, 0.0, 0.0))) \
        == pytest.approx(0.5 * math.pi, abs=1e-12)


def test_parse_scheme():
    assert parse_scheme("ILDVS") == Scheme.ILDVS
    assert parse_scheme(Scheme.DVS) == Scheme.DVS
    with pytest.raises(ValidationError):
        parse_scheme("pbvs")


@pytest.mark.parametrize("dx, expected", [(0.0, 1.0), (0.02, 1.0), (0.04, 0.5), (0.06, 0.0)])
def test_success_drop_distance_bands(dx, expected):
    cup = make_object("cup", (0.5, 0.0, 0.0), WorldConfig())
    ee = Pose((0.5 + dx, 0.0, 0.3), Q_DOWN)
    assert success_drop(ee, cup, 0.03, 0.045, 0.2, Q_DOWN) == expected


def test_success_drop_needs_orientation():
    cup = make_object("cup", (0.5, 0.0, 0.0), WorldConfig())
    ee = Pose((0.5, 0.0, 0.3), Q_DOWN)
    tilted_goal = quat_mul(quat_exp((0.3, 0.0, 0.0)), Q_DOWN)
    assert success_drop(ee, cup, 0.03, 0.045, 0.2, tilted_goal) == 0.0
    # 投放点沿末端 z 轴：末端倾斜时投放点偏离杯轴
    tilted = Pose((0.5, 0.0, 0.3), quat_mul(quat_exp((0.0, 0.15, 0.0)), Q_DOWN))
    assert success_drop(tilted, cup, 0.03, 0.045, 0.2, Q_DOWN, drop_offset=0.10) == 1.0
    assert success_drop(tilted, cup, 0.03, 0.045, 0.2, Q_DOWN, drop_offset=0.30) == 0.5


def test_trial_config_validation():
    with pytest.raises(ValidationError):
        TrialConfig(Scheme.IIL)
    with pytest.raises(ValidationError):
        TrialConfig(Scheme.DVS, model=yaw_model(0.0))
    with pytest.raises(ValidationError):
        TrialConfig(Scheme.DVS, position_id="N7")
    with pytest.raises(ValidationError):
        TrialConfig(Scheme.DVS, trial=0)
    assert TrialConfig("dvs").scheme == Scheme.DVS


def test_twist_frame_conversions_round_trip():
    rng = np.random.default_rng(0)
    robot = make_robot(Pose((0.4, 0.1, 0.3), quat_exp((0.3, -0.2, 1.0))), WorldConfig())
    for _ in range(20):
        v_c, w_c = rng.normal(size=3), rng.normal(size=3)
        twist = camera_to_ee_twist(robot, v_c, w_c)
        # 相机原点的世界速度 = R_c v_c
        arm = robot.camera_pose.p - robot.ee_pose.p
        assert np.allclose(twist.v + np.cross(twist.omega, arm), robot.camera_pose.rotation @ v_c)
        back_v, back_w = ee_to_camera_twist(robot, twist)
        assert np.allclose(back_v, v_c)
        assert np.allclose(back_w, w_c)


def test_prepare_task_gives_square_goal_features():
    for task in ("mouse", "cup"):
        context = prepare_task(task, RunConfig(task=task))
        corners = features8_to_pixels(context.f_star, RunConfig().perception.intrinsics)
        width = corners[1, 0] - corners[0, 0]
        height = corners[3, 1] - corners[0, 1]
        assert width == pytest.approx(height)
        assert width > 20.0
        assert context.z_star > 0.1
        assert np.array_equal(context.goal_position("center"), context.goal_pose.p)
        with pytest.raises(NoGroundTruth):
            context.goal_position("N2")


def test_dvs_trial_is_rotation_blind():
    config = mouse_config(horizon=150)
    context = prepare_task("mouse", config)
    world = build_world("mouse", "center", config.simworld)
    result = run_trial(TrialConfig(Scheme.DVS, horizon=150), world, context)
    assert result.termination == "completed"
    assert result.steps == 150
    assert len(result.eta_series) == 151
    assert result.eta_final < 0.5 * result.eta_series[0]
    assert result.max_omega < 1e-5
    assert result.epsilon_start == pytest.approx(0.5 * math.pi)
    assert abs(result.epsilon - result.epsilon_start) < 1e-4
    assert result.delta is not None
    assert result.success is None


def test_iil_and_ildvs_execute_the_imitated_rotation():
    config = mouse_config(horizon=90)
    context = prepare_task("mouse", config)
    model = yaw_model(-0.3)
    expected = 0.5 * math.pi - 0.3 * 90 / 30.0
    for scheme in (Scheme.IIL, Scheme.ILDVS):
        world = build_world("mouse", "N1", config.simworld)
        result = run_trial(TrialConfig(scheme, "N1", horizon=90, model=model), world, context)
        assert result.termination == "completed"
        assert result.max_omega == pytest.approx(0.3, rel=1e-6)
        assert result.epsilon == pytest.approx(expected, abs=1e-6)
        assert result.delta is None


def test_ildvs_servo_still_reduces_eta():
    config = mouse_config(horizon=150)
    context = prepare_task("mouse", config)
    world = build_world("mouse", "center", config.simworld)
    result = run_trial(TrialConfig(Scheme.ILDVS, horizon=150, model=yaw_model(-0.3)), world, context)
    assert result.termination == "completed"
    assert result.eta_final < 0.5 * result.eta_series[0]


def test_iil_ignores_detector_loss():
    config = mouse_config(horizon=60)
    context = prepare_task("mouse", config)

    def first_frame_only(detect_fn):
        def detector(frame_id, scene, cam_pose):
            if frame_id > 0:
                raise NoDetection("camera unplugged")
            return detect_fn(frame_id, scene, cam_pose)
        return detector

    emulated = EmulatedDetector(config.perception.intrinsics, 0.0, None)

    world = build_world("mouse", "center", config.simworld)
    iil = run_trial(TrialConfig(Scheme.IIL, horizon=60, model=yaw_model(0.0)), world, context,
                    detector=first_frame_only(emulated))
    assert iil.termination == "completed"
    assert iil.steps == 60

    dvs = run_trial(TrialConfig(Scheme.DVS, horizon=60), world, context, detector=first_frame_only(emulated))
    assert dvs.termination == "lost_target"
    assert dvs.steps == config.harness.max_lost_frames


def test_trial_without_any_detection():
    config = mouse_config(horizon=10)
    context = prepare_task("mouse", config)
    world = build_world("mouse", "center", config.simworld)

    def blind(frame_id, scene, cam_pose):
        raise NoDetection("nothing")

    result = run_trial(TrialConfig(Scheme.DVS, horizon=10), world, context, detector=blind)
    assert result.termination == "lost_target"
    assert result.steps == 0
    assert math.isnan(result.eta_final)
    assert result.as_row()["eta_final"] == "nan"


def test_trial_rejects_model_for_other_task():
    config = mouse_config(horizon=5)
    context = prepare_task("mouse", config)
    world = build_world("mouse", "center", config.simworld)
    with pytest.raises(ValidationError):
        run_trial(TrialConfig(Scheme.IIL, horizon=5, model=yaw_model(0.0, task="cup")), world, context)


def test_result_row_formatting():
    config = mouse_config(horizon=5)
    context = prepare_task("mouse", config)
    world = build_world("mouse", "N2", config.simworld)
    row = run_trial(TrialConfig(Scheme.DVS, "N2", trial=2, horizon=5), world, context).as_row()
    assert list(row) == RESULT_COLUMNS
    assert row["position"] == "N2" and row["trial"] == "2" and row["steps"] == "5"
    assert row["delta"] == "" and row["success"] == ""
    assert row["termination"] in TERMINATIONS


def test_retarget_requires_a_present_label():
    world = build_world("mouse", clutter=True)
    assert retarget(world, "book").active_label == "book"
    with pytest.raises(ValidationError):
        retarget(build_world("mouse"), "book")


def test_mean_ci():
    mean, half = mean_ci([1.0, 2.0, 3.0])
    assert mean == pytest.approx(2.0)
    assert half == pytest.approx(4.302652729 / math.sqrt(3.0), rel=1e-6)
    assert mean_ci([5.0]) == (5.0, 0.0)
    assert mean_ci([None, math.nan]) == (None, None)


def _row(task, scheme, position, trial, eta, delta, eps, success, termination="completed"):
    return {"task": task, "scheme": scheme, "position": position, "trial": str(trial), "steps": "10",
            "eta_final": str(eta), "delta": delta, "epsilon": str(eps), "success": success,
            "termination": termination}


def test_summarize():
    rows = [
        _row("cup", "dvs", "center", 1, 0.01, "0.10", 1.5, "0"),
        _row("cup", "dvs", "N1", 1, 0.03, "", 1.4, "0.5"),
        _row("cup", "ildvs", "center", 1, 0.02, "0.02", 0.1, "1"),
        _row("cup", "ildvs", "N1", 1, 0.04, "", 0.2, "1", "workspace_violation"),
        _row("mouse", "iil", "center", 1, 0.5, "0.05", 0.3, ""),
    ]
    summary = summarize(rows)
    assert set(summary) == {"cup", "mouse"}
    dvs = summary["cup"]["dvs"]
    assert dvs["trials"] == 2
    assert dvs["eta_final"]["mean"] == pytest.approx(0.02)
    assert dvs["delta"]["mean"] == pytest.approx(0.10)
    assert dvs["delta"]["ci95"] == 0.0
    assert dvs["success"] == {"train": 0.0, "novel": 0.5, "overall": 0.25}
    assert dvs["positions"]["N1"]["delta"] is None
    assert summary["cup"]["ildvs"]["terminations"]["workspace_violation"] == 1
    assert "success" not in summary["mouse"]["iil"]
    assert list(summary["cup"]) == ["dvs", "ildvs"]


def test_protocol_is_resumable_and_thread_count_independent(tmp_path):
    config = mouse_config(horizon=12)
    context = prepare_task("mouse", config)
    positions = ("center", "N3")

    single = run_protocol(context, None, tmp_path / "one", schemes=["dvs"], positions=positions, trials=2,
                          workers=1, progress=False)
    rows = read_results(single)
    assert len(rows) == 4
    assert [(r["position"], r["trial"]) for r in rows] == [("center", "1"), ("center", "2"), ("N3", "1"),
                                                             ("N3", "2")]
    series = read_eta_series(tmp_path / "one" / "series" / "eta_mouse_dvs_N3_2.csv")
    assert len(series) == 13

    before = single.read_bytes()
    again = run_protocol(context, None, tmp_path / "one", schemes=["dvs"], positions=positions, trials=2,
                         workers=1, progress=False)
    assert again.read_bytes() == before

    threaded = run_protocol(context, None, tmp_path / "two", schemes=["dvs"], positions=positions, trials=2,
                            workers=2, progress=False)
    assert threaded.read_bytes() == before


def test_protocol_needs_model_for_learning_schemes(tmp_path):
    context = prepare_task("mouse", mouse_config(horizon=5))
    with pytest.raises(ValidationError):
        run_protocol(context, None, tmp_path, schemes=["iil"], progress=False)
    with pytest.raises(ValidationError):
        run_protocol(context, yaw_model(0.0, task="cup"), tmp_path, schemes=["ildvs"], progress=False)


def test_write_report_with_plots(tmp_path):
    config = mouse_config(horizon=8)
    context = prepare_task("mouse", config)
    model = yaw_model(-0.3)
    csv_path = run_protocol(context, model, tmp_path, positions=("center", "N4"), trials=1, progress=False)
    summary_path, summary = write_report([csv_path], tmp_path / "report", plot=True)
    assert summary_path.exists()
    assert set(summary["mouse"]) == {"dvs", "iil", "ildvs"}
    assert summary["mouse"]["iil"]["epsilon"]["mean"] < summary["mouse"]["dvs"]["epsilon"]["mean"]
    assert (tmp_path / "report" / "eta_mouse_center.png").exists()
    assert (tmp_path / "report" / "eta_mouse_N4.png").exists()
    with pytest.raises(ValidationError):
        write_report([tmp_path / "missing.csv"], tmp_path / "report")


def test_ildvs_tail_decays_at_the_servo_rate():
    config = (RunConfig(task="mouse").override("perception", noise_px=0.0, window=1)
              .override("servo", depth_mode="true"))
    gains = config.servo
    dt = config.harness.dt
    context = prepare_task("mouse", config)
    world = build_world("mouse", "center", config.simworld)
    model = drift_model((0.02, -0.01, 0.0))
    result = run_trial(TrialConfig(Scheme.ILDVS, horizon=700, gains=gains, model=model), world, context)
    assert result.termination == "completed"

    eta = np.array(result.eta_series)
    assert np.all(np.diff(eta[-300:]) <= 0.0)
    # α = 1（η >= eta1）时每步按 exp(-λ dt) 衰减，次任务漂移不改变速率
    norm_steps = np.flatnonzero(eta[1:] >= gains.eta1)
    assert len(norm_steps) > 10
    rates = -np.log(eta[norm_steps + 1] / eta[norm_steps]) / dt
    assert np.all(np.abs(rates / gains.lam - 1.0) < 0.2)


def test_trial_records_simulation_errors_and_raises_programming_errors(monkeypatch):
    config = mouse_config(horizon=5)
    context = prepare_task("mouse", config)
    world = build_world("mouse", "center", config.simworld)

    def blowup(world, robot, twist, dt):
        raise NumericalBlowup("state exceeded 1e+06")

    monkeypatch.setattr(harness, "step", blowup)
    result = run_trial(TrialConfig(Scheme.DVS, horizon=5), world, context)
    assert result.termination == "blowup"
    assert result.steps == 0

    def wrong_units(world, robot, twist, dt):
        raise UnitMismatch("expected normalized features")

    monkeypatch.setattr(harness, "step", wrong_units)
    with pytest.raises(UnitMismatch):
        run_trial(TrialConfig(Scheme.DVS, horizon=5), world, context)


def test_protocol_leaves_torch_thread_count_alone(tmp_path):
    original = torch.get_num_threads()
    torch.set_num_threads(2)
    try:
        context = prepare_task("mouse", mouse_config(horizon=3))
        run_protocol(context, None, tmp_path, schemes=["dvs"], positions=("center",), trials=1, progress=False)
        assert torch.get_num_threads() == 2
    finally:
        torch.set_num_threads(original)


def _default_protocol(task, model, out_dir):
    context = prepare_task(task, RunConfig(task=task))
    assert geodesic_angle(context.q_goal, model.q_anchor) < 1e-12
    rows = read_results(run_protocol(context, model, out_dir, progress=False))
    assert len(rows) == 45
    return summarize(rows)[task]


def _novel_mean(entry, metric):
    return np.mean([entry["positions"][p][metric] for p in ("N1", "N2", "N3", "N4")])


@pytest.mark.slow
def test_mouse_scheme_ordering(mouse_training, tmp_path):
    _, model, _ = mouse_training
    summary = _default_protocol("mouse", model, tmp_path)
    dvs, iil, ildvs = summary["dvs"], summary["iil"], summary["ildvs"]
    assert ildvs["terminations"]["completed"] == 15

    # DVS 不产生旋转指令，ε 停在起点的 90° 偏航误差
    for position in dvs["positions"].values():
        assert abs(position["epsilon"] - 0.5 * math.pi) < 1e-3
    # DVS 与 ILDVS 都收敛到检测噪声下限
    assert dvs["eta_final"]["mean"] < iil["eta_final"]["mean"]
    assert dvs["eta_final"]["mean"] <= ildvs["eta_final"]["mean"] + 1e-3
    assert _novel_mean(iil, "eta_final") > 5.0 * _novel_mean(ildvs, "eta_final")
    for position in ildvs["positions"].values():
        assert position["epsilon"] < 0.1


@pytest.mark.slow
def test_cup_success_ordering(cup_training, tmp_path):
    _, model, _ = cup_training
    success = {scheme: entry["success"] for scheme, entry in _default_protocol("cup", model, tmp_path).items()}
    assert success["dvs"]["overall"] == 0.0
    assert success["ildvs"]["overall"] >= 0.9
    assert success["ildvs"]["overall"] > success["iil"]["overall"]
    assert success["iil"]["novel"] == 0.0
