"""
命令行入口：生成示教、训练 NODE、运行单次试验、完整评估流程和汇总报告。

    python cli.py demo --task cup --out demos_cup.csv --seed 7
    python cli.py train --demos demos_cup.csv --out cup.ckpt
    python cli.py run --task cup --scheme ildvs --model cup.ckpt --position N1
    python cli.py protocol --task cup --model cup.ckpt --out results/
    python cli.py report --results results/results.csv --out results/ --plot

退出码：0 成功，2 参数或输入错误，3 运行时失败。
"""
import argparse
import csv
import json
import logging as log
import sys
from dataclasses import replace

from config import RunConfig, load_config
from errors import SimulationError, ValidationError
from harness import (POSITION_IDS, SCHEME_ORDER, Scheme, TrialConfig, prepare_task, retarget, run_protocol,
                     run_trial, write_eta_series, write_report)
from imitator import INTEGRATORS, load_checkpoint, save_checkpoint, train
from perception import RecordedDetector
from servo import DEPTH_MODES
from simworld import TASKS, build_world, generate_demonstrations, load_demonstrations, save_demonstrations

LOG_FORMAT = '%(asctime)s %(levelname)s (%(funcName)s:%(lineno)d) - %(message)s'

DEFAULTS = RunConfig()


def _common(parser):
    parser.add_argument('--config', type=str, default=None, help="INI 配置文件，命令行参数优先")
    parser.add_argument('--verbose', action='store_true', help="输出 DEBUG 日志")
    parser.add_argument('--quiet', action='store_true', help="只输出警告和错误，关闭进度条")


def _task_arg(parser, required=True):
    parser.add_argument('--task', type=str, choices=TASKS, required=required, default=None,
                        help=f"任务 (默认: {DEFAULTS.task})" if not required else "任务")


def build_parser():
    h = DEFAULTS.harness
    t = DEFAULTS.imitator
    p = DEFAULTS.perception
    g = DEFAULTS.servo

    parser = argparse.ArgumentParser(prog="cli.py", description="NODE 模仿学习 + 大投影视觉伺服的仿真评估")
    sub = parser.add_subparsers(dest="command", required=True)

    demo = sub.add_parser("demo", help="用脚本专家生成示教文件")
    _task_arg(demo)
    demo.add_argument('--out', type=str, required=True, help="示教 CSV 输出路径")
    demo.add_argument('--seed', type=int, default=None, help=f"随机种子 (默认: {h.seed})")
    demo.add_argument('--num', type=int, default=None, help=f"示教条数 (默认: {h.num_demos})")
    demo.add_argument('--steps', type=int, default=None, help=f"每条示教的步数，30 Hz (默认: {h.demo_steps})")
    demo.add_argument('--noise', type=float, default=None, help=f"检测噪声幅度，像素 (默认: {p.noise_px:g})")
    _common(demo)

    tr = sub.add_parser("train", help="在示教文件上训练 NODE")
    tr.add_argument('--demos', type=str, required=True, help="示教 CSV 路径")
    tr.add_argument('--out', type=str, required=True, help="检查点输出路径（同时写 <out>.loss.csv）")
    tr.add_argument('--iters', type=int, default=None, help=f"迭代次数 (默认: {t.iterations})")
    tr.add_argument('--lr', type=float, default=None, help=f"Adam 学习率 (默认: {t.learning_rate:g})")
    tr.add_argument('--segment', type=int, default=None, help=f"片段长度 T_s，步 (默认: {t.segment_length})")
    tr.add_argument('--integrator', type=str, choices=INTEGRATORS, default=None,
                    help=f"积分器 (默认: {t.integrator})")
    tr.add_argument('--seed', type=int, default=None, help=f"随机种子 (默认: {t.seed})")
    tr.add_argument('--augment-shift', dest="augment_shift", type=float, default=None,
                    help=f"框特征随机平移幅度，[0,100] 单位，0 关闭 (默认: {t.augment_shift:g})")
    tr.add_argument('--augment-scale', dest="augment_scale", type=float, default=None,
                    help=f"框特征随机缩放上限，1 关闭 (默认: {t.augment_scale:g})")
    _common(tr)

    run = sub.add_parser("run", help="运行单次试验")
    _task_arg(run, required=False)
    run.add_argument('--scheme', type=str, choices=[s.value for s in Scheme], required=True, help="控制方案")
    run.add_argument('--position', type=str, choices=POSITION_IDS, default="center",
                     help="物体位置 (默认: %(default)s)")
    run.add_argument('--trial', type=int, default=1, help="试验序号，1 开始 (默认: %(default)s)")
    run.add_argument('--model', type=str, default=None, help="NODE 检查点，iil/ildvs 必需")
    run.add_argument('--horizon', type=int, default=None, help=f"步数，30 Hz (默认: {h.horizon})")
    run.add_argument('--seed', type=int, default=None, help=f"随机种子 (默认: {h.seed})")
    run.add_argument('--lam', type=float, default=None, help=f"增益 λ，1/s (默认: {g.lam:g})")
    run.add_argument('--depth-mode', dest="depth_mode", type=str, choices=DEPTH_MODES, default=None,
                     help=f"交互矩阵深度：期望深度、真实深度或固定 z_hat (默认: {g.depth_mode})")
    run.add_argument('--clutter', action='store_true', help="加入干扰物体")
    run.add_argument('--target', type=str, default=None, help="跟踪的检测标签 (默认: 任务物体)")
    run.add_argument('--detections', type=str, default=None, help="回放的检测记录文件，代替模拟检测器")
    run.add_argument('--out', type=str, default=None, help="η 序列输出 CSV (step,eta)")
    _common(run)

    proto = sub.add_parser("protocol", help="3 种方案 x 5 个位置 x 3 次的完整评估")
    _task_arg(proto, required=False)
    proto.add_argument('--model', type=str, default=None, help="NODE 检查点，iil/ildvs 必需")
    proto.add_argument('--out', type=str, required=True, help="结果目录")
    proto.add_argument('--schemes', type=str, nargs="+", choices=[s.value for s in Scheme],
                       default=[s.value for s in SCHEME_ORDER], help="参与评估的方案 (默认: %(default)s)")
    proto.add_argument('--trials', type=int, default=None, help=f"每个位置的次数 (默认: {h.trials})")
    proto.add_argument('--workers', type=int, default=None, help=f"并行线程数 (默认: {h.workers})")
    proto.add_argument('--seed', type=int, default=None, help=f"随机种子 (默认: {h.seed})")
    proto.add_argument('--clutter', action='store_true', help="加入干扰物体")
    proto.add_argument('--target', type=str, default=None, help="跟踪的检测标签 (默认: 任务物体)")
    _common(proto)

    rep = sub.add_parser("report", help="汇总已有结果文件")
    rep.add_argument('--results', type=str, nargs="+", required=True, help="results.csv 路径，可多个")
    rep.add_argument('--out', type=str, required=True, help="summary.json 与图片的输出目录")
    rep.add_argument('--plot', action='store_true', help="画各位置的 η 曲线（PNG）")
    _common(rep)
    return parser


def _setup_logging(args):
    level = log.DEBUG if args.verbose else log.WARNING if args.quiet else log.INFO
    log.basicConfig(level=level, format=LOG_FORMAT)
    log.getLogger().setLevel(level)


def _run_config(args):
    config = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "task", None):
        config = replace(config, task=args.task)
    harness = {key: getattr(args, key, None) for key in ("seed", "horizon", "trials", "workers")}
    config = config.override("harness", **harness)
    config = config.override("servo", lam=getattr(args, "lam", None), depth_mode=getattr(args, "depth_mode", None))
    return config


def cmd_demo(args, config):
    num = args.num or config.harness.num_demos
    steps = args.steps or config.harness.demo_steps
    noise = config.perception.noise_px if args.noise is None else args.noise
    demos, starts = generate_demonstrations(config.task, num, steps, config.harness.dt, config.harness.seed,
                                            config.simworld, config.perception.intrinsics, noise,
                                            config.perception.window, progress=not args.quiet)
    save_demonstrations(args.out, demos)
    for n, start in enumerate(starts):
        print(f"demo {n}: p={start.p.tolist()} q={start.q.as_array().tolist()}")
    print(f"{demos.num_demos} x {demos.length} records -> {args.out}")


def cmd_train(args, config):
    demos = load_demonstrations(args.demos)
    train_config = config.override("imitator", iterations=args.iters, learning_rate=args.lr,
                                   segment_length=args.segment, integrator=args.integrator, seed=args.seed,
                                   augment_shift=args.augment_shift, augment_scale=args.augment_scale,
                                   dt=demos.dt).imitator
    model, loss_curve = train(demos, train_config, progress=not args.quiet)
    save_checkpoint(model, args.out)
    with open(f"{args.out}.loss.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["iteration", "loss"])
        writer.writeheader()
        for iteration, loss in enumerate(loss_curve):
            writer.writerow({"iteration": iteration, "loss": repr(loss)})
    print(f"final loss {model.final_loss:.6g} -> {args.out}")


def _load_model(path, task, scheme_values):
    if path is None:
        if any(Scheme(s) != Scheme.DVS for s in scheme_values):
            raise ValidationError("--model is required for the iil and ildvs schemes")
        return None
    model = load_checkpoint(path)
    if model.task != task:
        raise ValidationError(f"checkpoint {path} was trained for '{model.task}', not '{task}'")
    return model


def cmd_run(args, config):
    scheme = Scheme(args.scheme)
    model = _load_model(args.model, config.task, [scheme.value])
    context = prepare_task(config.task, config)
    world = build_world(config.task, args.position, config.simworld, clutter=args.clutter or None)
    if args.target:
        world = retarget(world, args.target)
    detector = RecordedDetector.from_file(args.detections) if args.detections else None
    cfg = TrialConfig(scheme, args.position, args.trial, config.harness.horizon, config.servo,
                      None if scheme == Scheme.DVS else model, config.harness.seed)
    result = run_trial(cfg, world, context, detector=detector)
    if args.out:
        write_eta_series(args.out, result.eta_series)
    print(json.dumps(result.as_row()))
    if result.termination != "completed":
        log.warning(f"trial ended early: {result.termination}")


def cmd_protocol(args, config):
    model = _load_model(args.model, config.task, args.schemes)
    context = prepare_task(config.task, config)
    csv_path = run_protocol(context, model, args.out, schemes=args.schemes, clutter=args.clutter or None,
                            target=args.target, progress=not args.quiet)
    summary_path, _ = write_report([csv_path], args.out)
    print(f"results -> {csv_path}, summary -> {summary_path}")


def cmd_report(args, config):
    summary_path, summary = write_report(args.results, args.out, plot=args.plot)
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"summary -> {summary_path}")


COMMANDS = {"demo": cmd_demo, "train": cmd_train, "run": cmd_run, "protocol": cmd_protocol, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    _setup_logging(args)

    try:
        config = _run_config(args)
        COMMANDS[args.command](args, config)
    except (ValidationError, OSError) as e:
        log.error(e)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SimulationError as e:
        log.error(e)
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
