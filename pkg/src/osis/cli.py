"""Command line surface: generate / train / infer / eval / bench.

Every command takes --config (YAML) and repeatable --set key.path=value
overrides, echoes the effective config into --out, and is fully seeded
(env var OSIS_SEED beats the config seed). Exit codes: 0 success, 1 usage
error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from .data import (
    SceneIOError,
    export_instances_ply,
    list_scene_files,
    load_predictions,
    load_scene,
    save_predictions,
    save_scene,
    scene_id_of,
)
from .evaluate import evaluate
from .geometry import instances_from_cloud
from .inference import benchmark, infer_scene, matrix_nms
from .model import Model, prepare_train_scene
from .synth import SynthConfig, augment, generate_scene
from .train import Adam, cosine_lr, train_step


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage is 1
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="osis", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY.PATH=VALUE", help="override one config value")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("generate", help="write synthetic scene files")
    common(p)
    p.add_argument("--count", type=int, help="number of scenes (default synth.count)")

    p = sub.add_parser("train", help="train a model on a scene directory")
    common(p)
    p.add_argument("--data", required=True, help="directory of .osc/.ply scenes")
    p.add_argument("--epochs", type=int, help="shortcut for --set optim.epochs=N")

    p = sub.add_parser("infer", help="dump predictions for every scene")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--export-ply", action="store_true", help="also write colored PLYs")

    p = sub.add_parser("eval", help="score prediction dumps against ground truth")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True, help="directory of prediction dumps")

    p = sub.add_parser("bench", help="per-stage inference timing")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="optional checkpoint (default: fresh init)")
    p.add_argument("--repeats", type=int)
    return parser


def _load_cfg(args) -> dict:
    cfg = cfgmod.load_config(args.config, args.overrides)
    env_seed = os.environ.get("OSIS_SEED")
    if env_seed is not None:
        cfg["seed"] = int(env_seed)
    return cfg


def _build_model(cfg: dict) -> Model:
    return Model(cfgmod.model_config(cfg), seed=int(cfg["seed"]))


def _restore_model(cfg: dict, path) -> Model:
    path = Path(path)
    if not path.exists():
        raise SceneIOError(f"checkpoint not found: {path}")
    model = _build_model(cfg)
    ckpt.restore(model.parameters(), ckpt.load_checkpoint(path))
    return model


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    cfgmod.echo_config(cfg, out)
    count = args.count if args.count is not None else int(cfg["synth"]["count"])
    base = cfgmod.synth_config(cfg, seed=int(cfg["seed"]))
    for i in range(count):
        scene_cfg = SynthConfig(**{**base.__dict__, "seed": int(cfg["seed"]) + i})
        cloud = generate_scene(scene_cfg)
        save_scene(cloud, out / f"scene_{i:04d}.osc")
    print(f"wrote {count} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.epochs is not None:
        cfg["optim"]["epochs"] = args.epochs
    out = Path(args.out)
    cfgmod.echo_config(cfg, out)
    files = list_scene_files(args.data)
    clouds = [load_scene(f) for f in files]
    voxel = float(cfg["voxel_size"])
    scenes = [prepare_train_scene(c, voxel) for c in clouds]

    model = _build_model(cfg)
    optim_cfg = cfgmod.optim_config(cfg)
    weights = cfgmod.loss_weights(cfg)
    alpha = float(cfg["match"]["alpha"])
    accum = max(1, optim_cfg.grad_accum)
    ckpt_every = int(cfg["train"]["checkpoint_every"])
    log_every = int(cfg["train"]["log_every"])
    aug_on = bool(cfg["augment"]["enabled"])
    aug_sigma = float(cfg["augment"]["jitter_sigma"])

    opt = Adam(model.parameters(), optim_cfg)
    step = 0
    with open(out / "losses.jsonl", "w") as log:
        for epoch in range(optim_cfg.epochs):
            lr = cosine_lr(optim_cfg.lr, epoch, optim_cfg.epochs, optim_cfg.cosine_start_epoch)
            epoch_scenes = scenes
            if aug_on:
                rng = np.random.default_rng((int(cfg["seed"]), epoch))
                epoch_scenes = [
                    prepare_train_scene(augment(c, rng, aug_sigma), voxel) for c in clouds
                ]
            for lo in range(0, len(epoch_scenes), accum):
                bd = train_step(epoch_scenes[lo : lo + accum], model, opt, lr, weights, alpha)
                step += 1
                log.write(json.dumps({"step": step, "epoch": epoch, "lr": lr, **bd.to_dict()}) + "\n")
                if log_every and step % log_every == 0:
                    print(f"step {step} epoch {epoch} total {bd.total:.4f}")
            if ckpt_every and (epoch + 1) % ckpt_every == 0:
                ckpt.save_checkpoint(model.parameters(), out / f"model_epoch{epoch + 1:05d}.ckpt")
    ckpt.save_checkpoint(model.parameters(), out / "model.ckpt")
    print(f"trained {step} steps; checkpoint at {out / 'model.ckpt'}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    cfgmod.echo_config(cfg, out)
    model = _restore_model(cfg, args.ckpt)
    pred_dir = out / "predictions"
    inf = cfg["infer"]
    for f in list_scene_files(args.data):
        cloud = load_scene(f)
        preds = infer_scene(
            cloud,
            model,
            score_thresh=float(inf["score_thresh"]),
            mask_thresh=float(inf["mask_thresh"]),
            use_matrix_nms=bool(inf["matrix_nms"]),
            nms_sigma=float(inf["nms_sigma"]),
        )
        save_predictions(preds, scene_id_of(f), pred_dir)
        if args.export_ply:
            export_instances_ply(cloud, preds, out / f"{scene_id_of(f)}_instances.ply")
    print(f"predictions in {pred_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    cfgmod.echo_config(cfg, out)
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise SceneIOError(f"prediction directory not found: {pred_dir}")
    preds_per_scene, gts_per_scene = [], []
    for f in list_scene_files(args.data):
        cloud = load_scene(f)
        if not cloud.has_ground_truth:
            raise SceneIOError(f"scene {f} carries no ground truth")
        gts_per_scene.append(instances_from_cloud(cloud))
        index = pred_dir / f"{scene_id_of(f)}.json"
        preds_per_scene.append(load_predictions(index, cloud.n_points))
    report = evaluate(preds_per_scene, gts_per_scene)
    (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    print(f"AP {report.ap:.4f}  AP50 {report.ap50:.4f}  AP25 {report.ap25:.4f}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    cfgmod.echo_config(cfg, out)
    model = _restore_model(cfg, args.ckpt) if args.ckpt else _build_model(cfg)
    scenes = [load_scene(f) for f in list_scene_files(args.data)]
    repeats = args.repeats if args.repeats is not None else int(cfg["bench"]["repeats"])
    report = benchmark(
        scenes,
        model,
        repeats=repeats,
        score_thresh=float(cfg["infer"]["score_thresh"]),
        mask_thresh=float(cfg["infer"]["mask_thresh"]),
    )
    (out / "bench.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    for row in report["rows"]:
        print(f"{row['stage']:10s} mean {row['mean_ms']:9.3f} ms  median {row['median_ms']:9.3f} ms")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except (cfgmod.ConfigError, UsageError) as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (SceneIOError, ckpt.CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failures surface as exit 2
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
