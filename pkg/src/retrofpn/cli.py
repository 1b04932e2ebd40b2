"""Command line entry point: ``retrofpn <command> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import plotting
from .config import RunConfig
from .dataset import CLASS_NAMES, SceneSpec, generate_dataset, load_manifest, load_split, read_cloud, worker_count, write_cloud
from .model import RetroFPN, prepare_sample
from .tensor import load_checkpoint, save_checkpoint
from .training import evaluate, evaluate_miou, make_optimizer, train_epoch

log = logging.getLogger("retrofpn")

CHECKPOINT = "checkpoint.bin"
CONFIG = "config.json"
METRICS = "metrics.jsonl"


class UsageError(Exception):
    pass


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--k", type=int, help="neighbors per level")
    p.add_argument("--channels", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-hs", action="store_true", help="supervise level 1 only")
    p.add_argument("--no-cross-att", action="store_true", help="replace attended context by the compacted feature")
    p.add_argument("--no-pos-emb", action="store_true", help="drop the relative-position embeddings")
    p.add_argument("--no-sem-gate", action="store_true", help="sum context and compacted feature instead of gating")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retrofpn", description="Retrospective feature pyramid for point cloud segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic scenes and a manifest")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=64)
    p.add_argument("--test", type=int, default=16)
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--noise", type=float, default=0.01)

    p = sub.add_parser("train", help="train on a manifest's train split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--max-scenes", type=int, help="use only the first N training scenes")
    _add_model_flags(p)

    p = sub.add_parser("eval", help="mIoU of a prediction file or of a trained run")
    p.add_argument("--pred", type=Path, help="cloud file whose label column is the prediction")
    p.add_argument("--gt", type=Path, help="cloud file with ground-truth labels")
    p.add_argument("--num-classes", type=int, default=len(CLASS_NAMES))
    p.add_argument("--run", type=Path, help="training output directory")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, help="directory for metrics.json and the IoU figure")

    p = sub.add_parser("predict", help="write per-level predictions for one cloud")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("grad-check", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("knn-bench", help="time kd-tree K-NN against brute force")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=4096)
    p.add_argument("--queries", type=int, default=2048)
    p.add_argument("--k", type=int, default=8)
    return parser


def resolve_config(args) -> RunConfig:
    data = RunConfig().to_dict()
    if args.config:
        data.update(json.loads(args.config.read_text()))
    flags = {"seed": args.seed, "levels": args.levels, "k": args.k, "channels": args.channels, "epochs": args.epochs, "lr": args.lr}
    data.update({k: v for k, v in flags.items() if v is not None})
    if args.channels is not None:
        data["backbone_channels"] = args.channels
    for flag, key in (("no_hs", "hs"), ("no_cross_att", "cross_att"), ("no_pos_emb", "pos_emb"), ("no_sem_gate", "sem_gate")):
        if getattr(args, flag):
            data[key] = False
    return RunConfig.from_dict(data)


def _echo_config(cfg: RunConfig) -> None:
    print(f"config {cfg.to_json()}", file=sys.stderr)


def _load_run(run_dir: Path) -> tuple[RunConfig, RetroFPN, dict]:
    cfg = RunConfig.load(run_dir / CONFIG)
    _echo_config(cfg)
    state = load_checkpoint(run_dir / CHECKPOINT)
    model = RetroFPN(cfg)
    model.load_state_dict(state)
    return cfg, model, state


def _echo_settings(settings: dict) -> None:
    print(f"config {json.dumps(settings, sort_keys=True)}", file=sys.stderr)


def cmd_gen_data(args) -> int:
    spec = SceneSpec(num_points=args.points, noise=args.noise)
    _echo_settings({"seed": args.seed, "train": args.train, "test": args.test, "scene_spec": asdict(spec)})
    path = generate_dataset(args.out, args.train, args.test, args.seed, spec)
    print(json.dumps({"manifest": str(path), "train": args.train, "test": args.test}))
    return 0


def _samples(manifest: dict, split: str, cfg: RunConfig, limit: int | None = None):
    scenes = load_split(manifest, split)[:limit]
    return [prepare_sample(cloud, cfg, seed=i, name=name) for i, (name, cloud) in enumerate(scenes)]


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg)
    manifest = load_manifest(args.manifest)
    if manifest.get("num_classes", cfg.num_classes) != cfg.num_classes:
        cfg = cfg.replace(num_classes=manifest["num_classes"])
    samples = _samples(manifest, "train", cfg, args.max_scenes)
    model = RetroFPN(cfg)
    opt = make_optimizer(model, cfg)
    first_epoch = 0
    if args.resume:
        state = load_checkpoint(args.resume)
        model.load_state_dict(state)
        opt.load_state_dict(state)
        first_epoch = int(state["meta/epoch"]) + 1
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / CONFIG).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    mode = "a" if args.resume else "w"
    with open(args.out / METRICS, mode) as stream:
        for epoch in range(first_epoch, cfg.epochs):
            start = time.perf_counter()
            metrics = train_epoch(samples, model, opt, cfg, epoch)
            record = {
                "epoch": epoch,
                "per_level_loss": metrics.per_level_loss,
                "miou": metrics.miou,
                "acc": metrics.acc,
                "seconds": round(time.perf_counter() - start, 3),
            }
            line = json.dumps(record)
            stream.write(line + "\n")
            stream.flush()
            print(line, flush=True)
            state = {**model.state_dict(), **opt.state_dict(), "meta/epoch": np.asarray(float(epoch))}
            save_checkpoint(args.out / CHECKPOINT, state)
    history = [json.loads(line) for line in (args.out / METRICS).read_text().splitlines() if line.strip()]
    if history:
        plotting.plot_loss_curves(history, args.out / "loss_curves.png")
    return 0


def cmd_eval(args) -> int:
    if args.pred and args.gt:
        pred = read_cloud(args.pred).labels
        gt = read_cloud(args.gt).labels
        metrics = evaluate_miou(pred, gt, args.num_classes)
        names = CLASS_NAMES if args.num_classes == len(CLASS_NAMES) else [str(i) for i in range(args.num_classes)]
    elif args.run and args.manifest:
        cfg, model, _ = _load_run(args.run)
        metrics = evaluate(_samples(load_manifest(args.manifest), args.split, cfg), model, workers=worker_count())
        names = CLASS_NAMES
    else:
        raise UsageError("eval needs either --pred and --gt, or --run and --manifest")
    out = metrics.to_dict()
    print(json.dumps(out))
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "metrics.json").write_text(json.dumps(out, indent=2))
        plotting.plot_class_iou(metrics.iou, names, args.out / "class_iou.png", title=f"mIoU {metrics.miou:.3f}")
    return 0


def cmd_predict(args) -> int:
    cfg, model, _ = _load_run(args.run)
    cloud = read_cloud(args.input)
    if cloud.labels is None or (cloud.labels < 0).all():
        # labels only feed the pyramid's carried ground truth; predictions ignore them
        cloud.labels = np.zeros(cloud.n, dtype=np.int64)
    sample = prepare_sample(cloud, cfg)
    preds = model.predict(sample)
    args.out.mkdir(parents=True, exist_ok=True)
    files, panels = [], []
    for lv, pred in zip(sample.pyramid, preds):
        path = args.out / f"pred_level_{lv.level}.txt"
        write_cloud(lv.points, path, level=lv.level, labels=pred)
        files.append(str(path))
        panels.append((lv.points.coords, pred))
    plotting.plot_level_predictions(panels, args.out / "predictions.png")
    print(json.dumps({"files": files}))
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import run_all

    _echo_settings({"seed": args.seed})
    result = run_all(args.seed)
    print(json.dumps(result))
    return 0 if result["max_rel_err"] < 1e-5 else 1


def cmd_knn_bench(args) -> int:
    from .geometry import KDTree, brute_force_knn

    _echo_settings({"seed": args.seed, "points": args.points, "queries": args.queries, "k": args.k})
    rng = np.random.default_rng(args.seed)
    src = rng.uniform(0, 5, size=(args.points, 3))
    qry = rng.uniform(0, 5, size=(args.queries, 3))
    t0 = time.perf_counter()
    tree = KDTree(src)
    t1 = time.perf_counter()
    got = tree.query(qry, args.k)
    t2 = time.perf_counter()
    ref = brute_force_knn(src, qry, args.k)
    t3 = time.perf_counter()
    same = bool(np.array_equal(got.indices, ref.indices))
    print(json.dumps({
        "points": args.points, "queries": args.queries, "k": args.k,
        "build_s": round(t1 - t0, 6), "query_s": round(t2 - t1, 6), "brute_s": round(t3 - t2, 6),
        "identical": same,
    }))
    return 0 if same else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "grad-check": cmd_grad_check,
    "knn-bench": cmd_knn_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"retrofpn: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"retrofpn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
