"""Command-line entry point orchestrating the full pipeline reproducibly.

Every subcommand writes a manifest (the fully resolved configuration plus
seeds, a git describe string, and wall time) next to its outputs; rerunning
with ``--config <manifest>`` reproduces the data outputs bit for bit. Exit
codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import baselines, cloudio, evaluate, simulator, victim as victim_mod
from .field import make_bank

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_SENSOR_FLAGS = ("channels", "azimuth_res_deg", "origin_height", "max_range")


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def parallel_map(fn, items, threads: int):
    """Ordered map; results are collected in input order for determinism."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def write_manifest(args: argparse.Namespace, out_dir: Path, started: float) -> None:
    config = {"subcommand": args.command}
    skip = {"command", "func", "config"}
    for key, value in sorted(vars(args).items()):
        if key in skip or value is None:
            continue
        config[key.replace("_", "-")] = str(value)
    config["git-describe"] = _git_describe()
    config["wall-time-s"] = f"{time.time() - started:.3f}"
    out_dir.mkdir(parents=True, exist_ok=True)
    cloudio.write_config(config, out_dir / "manifest.cfg")


def _sensor_from_args(args) -> simulator.SensorSpec:
    return simulator.SensorSpec(
        origin_height=args.origin_height,
        channels=args.channels,
        azimuth_resolution=math.radians(args.azimuth_res_deg),
        max_range=args.max_range,
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = Path(args.out)
    sensor = _sensor_from_args(args)
    if args.domain == "splits":
        sizes = tuple(int(s) for s in args.sizes.split(","))
        if len(sizes) != 4:
            raise ValueError("--sizes needs train,val,ood-rare,ood-damaged")
        splits = simulator.make_splits(args.seed, sizes=sizes, sensor=sensor,
                                       n_objects=args.objects)
        for name, scenes in splits.items():
            directory = out / name
            directory.mkdir(parents=True, exist_ok=True)
            simulator.write_sensor_config(sensor, directory)
            for index, scene in enumerate(scenes):
                simulator.write_scene(scene, directory, index)
    else:
        out.mkdir(parents=True, exist_ok=True)
        simulator.write_sensor_config(sensor, out)
        def build(index):
            return simulator.generate_scene(args.seed + index, args.domain,
                                            args.objects, sensor)
        scenes = parallel_map(build, range(args.scenes), args.threads)
        for index, scene in enumerate(scenes):
            simulator.write_scene(scene, out, index)
    return 0


def _load_scenes(data_dir) -> list:
    return simulator.load_split(data_dir)


def cmd_train_victim(args) -> int:
    scenes = _load_scenes(args.data)
    bank = cloudio.load_bank(args.augment_bank) if args.augment_bank else None
    n_classes = len(simulator.CLASS_NAMES)
    if args.task == "seg":
        model = evaluate.train_augmented(scenes, bank, n_classes, args.epochs,
                                         args.lr, args.seed)
    else:
        car = simulator.CAR
        model = evaluate.train_augmented_det(scenes, bank, car, args.epochs,
                                             args.lr, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    victim_mod.save_checkpoint(model, out)
    return 0


def cmd_attack(args) -> int:
    scenes = _load_scenes(args.data)
    model = victim_mod.load_checkpoint(args.victim)
    class_id = simulator.CLASS_NAMES.index(args.cls)
    mode = {"untargeted": "seg-untargeted", "targeted": "seg-targeted",
            "detection": "detection"}[args.mode]
    target_id = simulator.CLASS_NAMES.index(args.target) if args.target else None
    lr = args.lr if args.lr is not None else (0.05 if mode == "detection" else 0.01)
    cfg = attack_mod.AttackConfig(
        mode=mode, adversarial_class=class_id, target_class=target_id,
        eps=args.eps, psi=args.psi, lr=lr, iterations=args.iters, k=args.k,
        seed=args.seed, box_drop=args.drop_boxes, boxes=args.boxes,
    )
    dims = tuple(float(d) for d in args.dims.split(","))
    groups = args.G if args.boxes == "gt" else min(args.G, 6)
    bank = make_bank(class_id, args.cls, dims, args.step, groups, args.N,
                     args.seed, eps=args.eps, psi=args.psi)
    bank, trace = attack_mod.fit_bank(bank, scenes, model, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cloudio.save_bank(bank, out)
    trace_lines = ["iteration,loss,probe_metric"]
    trace_lines += [f"{i},{loss!r},{metric!r}" for i, (loss, metric)
                    in enumerate(zip(trace.losses, trace.probe_metric))]
    out.with_suffix(".trace.csv").write_text("\n".join(trace_lines) + "\n",
                                             encoding="utf-8")
    return 0


def cmd_baseline_attack(args) -> int:
    scenes = _load_scenes(args.data)
    model = victim_mod.load_checkpoint(args.victim)
    class_id = simulator.CLASS_NAMES.index(args.cls)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fn = {
        "l2": baselines.iterative_gradient_l2,
        "chamfer": baselines.chamfer_attack,
        "remove": baselines.adversarial_removal,
        "generate": baselines.adversarial_generation,
    }[args.kind]
    for index, scene in enumerate(scenes):
        cloud = scene.cloud
        for sb in scene.boxes:
            if sb.class_id != class_id:
                continue
            kwargs = {"eps": args.eps, "psi": args.psi, "iters": args.iters}
            if args.kind == "chamfer":
                kwargs["lam"] = args.lam
            cloud = fn(cloud, sb.box, model, **kwargs)
        cloudio.write_cloud(cloud, out / f"{index:06d}.bin")
        cloudio.write_labels(out / f"{index:06d}.label", cloud.semantic, cloud.instance)
    return 0


def cmd_eval(args) -> int:
    scenes = _load_scenes(args.data)
    model = victim_mod.load_checkpoint(args.victim)
    n_classes = len(simulator.CLASS_NAMES)
    wanted = set(args.metrics.split(","))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []

    if isinstance(model, victim_mod.SegNetMini):
        def scene_confusion(scene):
            return evaluate.confusion_matrix(model.predict(scene.cloud),
                                             scene.cloud.semantic, n_classes)
        if "miou" in wanted:
            total = sum(parallel_map(scene_confusion, scenes, args.threads))
            result = evaluate.iou_from_confusion(total)
            lines = ["class,iou,valid"]
            lines += [f"{name},{result.iou[i]!r},{int(result.valid[i])}"
                      for i, name in enumerate(simulator.CLASS_NAMES)]
            lines.append(f"mean,{result.mean!r},1")
            (out / "miou.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
            summary.append(f"miou {result.mean:.4f}")
        if "distance-bins" in wanted:
            rows = ["bin_low_m,class,iou,valid"]
            pred = [model.predict(s.cloud) for s in scenes]
            all_pred = np.concatenate(pred) if pred else np.zeros(0, np.int64)
            all_lab = np.concatenate([s.cloud.semantic for s in scenes])
            all_xyz = np.concatenate([s.cloud.xyz for s in scenes])
            ious, valid = evaluate.distance_binned_iou(
                all_pred, all_lab, all_xyz, scenes[0].sensor.origin, n_classes)
            for b in range(ious.shape[0]):
                for c, name in enumerate(simulator.CLASS_NAMES):
                    rows.append(f"{b * 10},{name},{ious[b, c]!r},{int(valid[b, c])}")
            (out / "distance_bins.csv").write_text("\n".join(rows) + "\n",
                                                   encoding="utf-8")
            summary.append("distance-bins written")
        if "intensity-suite" in wanted:
            table = evaluate.intensity_suite(model, scenes, n_classes, seed=args.seed)
            rows = ["transform,miou," + ",".join(simulator.CLASS_NAMES)]
            for name, result in table.items():
                per = ",".join(repr(v) for v in result.iou)
                rows.append(f"{name},{result.mean!r},{per}")
            (out / "intensity_suite.csv").write_text("\n".join(rows) + "\n",
                                                     encoding="utf-8")
            summary.append("intensity-suite written")
    else:
        detections, gts = evaluate.collect_detections(model, scenes,
                                                      class_id=simulator.CAR)
        if "ap" in wanted:
            ap = evaluate.average_precision(detections, gts, iou_thr=args.iou_thr)
            (out / "ap.csv").write_text(f"iou_thr,ap\n{args.iou_thr!r},{ap!r}\n",
                                        encoding="utf-8")
            summary.append(f"ap@{args.iou_thr} {ap:.4f}")
        if "asr" in wanted:
            if not args.bank:
                raise ValueError("--metrics asr needs --bank for the attacked pass")
            bank = cloudio.load_bank(args.bank)

            def deform_all(index, scene):
                return evaluate.deform_all_objects(scene, bank)

            attacked, _ = evaluate.collect_detections(
                model, scenes, class_id=simulator.CAR, transform=deform_all)
            asr = evaluate.attack_success_rate(detections, attacked, gts,
                                               iou_thr=args.iou_thr)
            (out / "asr.csv").write_text(f"iou_thr,asr_percent\n"
                                         f"{args.iou_thr!r},{asr!r}\n", encoding="utf-8")
            summary.append(f"asr {asr:.1f}%")

    (out / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    return 0


def cmd_analyze_fields(args) -> int:
    bank = cloudio.load_bank(args.bank)
    stats = evaluate.analyze_fields(bank, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluate.write_field_stats_csv(stats, out)
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _add_sensor_flags(sub):
    sub.add_argument("--channels", type=int, default=32)
    sub.add_argument("--azimuth-res-deg", type=float, default=0.4)
    sub.add_argument("--origin-height", type=float, default=1.7)
    sub.add_argument("--max-range", type=float, default=80.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advfield")
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("ADVFIELD_THREADS",
                                                   os.cpu_count() or 1)))
    parser.add_argument("--config", help="key = value file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate labeled synthetic datasets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", default="splits",
                   choices=["normal", "rare", "damaged", "splits"])
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--sizes", default="200,50,50,50")
    p.add_argument("--objects", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_sensor_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-victim", help="train a segmentation or detection victim")
    p.add_argument("--task", choices=["seg", "det"], default="seg")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment-bank", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("attack", help="fit a vector-field bank against a victim")
    p.add_argument("--mode", choices=["untargeted", "targeted", "detection"],
                   required=True)
    p.add_argument("--class", dest="cls", default="car")
    p.add_argument("--target", default=None)
    p.add_argument("--victim", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--G", type=int, default=12)
    p.add_argument("--N", type=int, default=6)
    p.add_argument("--eps", type=float, default=0.3)
    p.add_argument("--psi", type=float, default=0.3)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--lr", type=float, default=None,
                   help="default 0.05 for detection, 0.01 for segmentation")
    p.add_argument("--boxes", choices=["gt", "axis-aligned"], default="gt")
    p.add_argument("--drop-boxes", type=float, default=0.0)
    p.add_argument("--dims", default="1.8,1.6,4.6",
                   help="reference box w,h,l in meters")
    p.add_argument("--step", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("baseline-attack", help="run a sample-specific baseline")
    p.add_argument("--kind", choices=["l2", "chamfer", "remove", "generate"],
                   required=True)
    p.add_argument("--class", dest="cls", default="car")
    p.add_argument("--victim", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eps", type=float, default=0.3)
    p.add_argument("--psi", type=float, default=0.3)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline_attack)

    p = sub.add_parser("eval", help="evaluate a victim and write report CSVs")
    p.add_argument("--victim", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default="miou")
    p.add_argument("--bank", default=None)
    p.add_argument("--iou-thr", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-fields", help="field activity statistics as CSV")
    p.add_argument("--bank", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_fields)
    return parser


def _merge_config(parser: argparse.ArgumentParser, argv: list) -> list:
    """Expand ``--config file`` into leading defaults; explicit flags win."""
    if "--config" not in argv:
        return argv
    at = argv.index("--config")
    path = argv[at + 1]
    config = cloudio.read_config(path)
    command = config.pop("subcommand", None)
    config.pop("git-describe", None)
    config.pop("wall-time-s", None)
    rest = argv[:at] + argv[at + 2:]
    if command and command not in rest:
        rest = [command] + rest
    injected = []
    for key, value in config.items():
        injected += [f"--{key}", value]
    # put injected flags right after the subcommand so later flags override
    head, tail = rest[:1], rest[1:]
    return head + injected + tail


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    started = time.time()
    try:
        argv = _merge_config(parser, argv)
        args = parser.parse_args(argv)
    except (OSError, ValueError, KeyError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code = args.func(args)
    except (FileNotFoundError, cloudio.FormatError, ValueError, KeyError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    if code == 0:
        out = Path(args.out)
        write_manifest(args, out if out.is_dir() else out.parent, started)
    return code


if __name__ == "__main__":
    sys.exit(main())
