"""Command line entry point: synth, caption, train, eval, study, diag.

Each command accepts ``--config FILE`` (YAML or JSON) whose keys are the
command's option names; explicit flags override the file. The fully resolved
configuration is echoed as ``config.json`` next to the command's outputs, and
feeding that file back through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from . import ablation, captions, data
from .encoders import MODALITIES
from .evaluation import PROTOCOLS, RetrievalSet, evaluate, write_report
from .model import OPTIMIZER_PROFILES, NextConfig, NextNet
from .tmse import ROUTE_TYPES, SAMPLING_STRATEGIES, dump_route_states
from .training import TrainConfig, collate, embed, fit, load_checkpoint, save_checkpoint

logger = logging.getLogger("nextreid")

# NextConfig fields settable by flag; None means "not given"
MODEL_FLAGS = (
    "num_semantic", "num_structure", "use_mmfa", "use_tmse", "use_csse",
    "sampling", "semantic_route", "structure_route", "lr",
)


class CLIError(Exception):
    pass


def _echo(out_dir: Path, args: argparse.Namespace, extra: dict | None = None, name: str = "config.json") -> None:
    resolved = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    resolved.update(extra or {})
    out_dir.mkdir(parents=True, exist_ok=True)
    captions.atomic_write_text(out_dir / name, json.dumps(resolved, indent=1, sort_keys=True, default=list) + "\n")


def _check_empty(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CLIError(f"{out} exists and is not empty (use --force)")
        shutil.rmtree(out)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--model", type=json.loads, default=None, help="JSON model config (NextConfig fields)")
    g.add_argument("--profile", choices=sorted(OPTIMIZER_PROFILES), default=None)
    g.add_argument("--num-semantic", type=int, default=None)
    g.add_argument("--num-structure", type=int, default=None)
    g.add_argument("--no-mmfa", dest="use_mmfa", action="store_const", const=False, default=None)
    g.add_argument("--no-tmse", dest="use_tmse", action="store_const", const=False, default=None)
    g.add_argument("--no-csse", dest="use_csse", action="store_const", const=False, default=None)
    g.add_argument("--sampling", choices=SAMPLING_STRATEGIES, default=None)
    g.add_argument("--semantic-route", choices=ROUTE_TYPES, default=None)
    g.add_argument("--structure-route", choices=ROUTE_TYPES, default=None)
    g.add_argument("--lr", type=float, default=None)
    g.add_argument("--dim", type=int, default=None)


def resolve_model_config(args: argparse.Namespace, image_size=None) -> NextConfig:
    cfg = NextConfig.from_dict(args.model) if args.model else NextConfig()
    if args.profile:
        cfg = cfg.with_profile(args.profile)
    over = {k: getattr(args, k) for k in MODEL_FLAGS if getattr(args, k) is not None}
    enc = cfg.encoder
    if args.dim is not None:
        enc = replace(enc, dim=args.dim)
    if image_size is not None:
        enc = replace(enc, image_size=tuple(image_size))
    return NextConfig(**{**cfg.to_dict(), **over, "encoder": enc, "seed": args.seed})


def _image_size(index: data.DatasetIndex) -> tuple[int, int]:
    return tuple(index.samples[0].images["rgb"].shape[:2])


# --------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    _check_empty(out, args.force)
    index = data.generate_synthetic(
        args.ids, args.per_id, tuple(args.image_size), args.seed, args.object_type, args.test_ids, args.cameras
    )
    data.save_dataset(index, out)
    _echo(out, args)
    print(json.dumps(index.summary()))
    return 0


def cmd_caption(args) -> int:
    root = Path(args.root)
    cfg = captions.PipelineConfig(
        object_type=json.loads((root / "dataset.json").read_text())["object_type"],
        threshold=args.threshold,
        priority=tuple(args.backends),
        composer=args.composer,
        concurrency=args.concurrency,
        force=args.force,
    )
    if args.make_fixtures:
        if not args.replay:
            raise CLIError("--make-fixtures needs --replay DIR to write into")
        n = captions.synthesize_fixtures(root, captions.FixtureStore(args.replay), args.backends, args.seed)
        print(f"wrote {n} fixture responses to {args.replay}")
    if args.replay:
        store = captions.FixtureStore(args.replay)
        clients = [captions.ReplayClient(b, store) for b in args.backends]
        summary = captions.run_pipeline(root, clients, cfg)
    elif args.live:
        clients = [captions.ChatCompletionClient(b) for b in args.backends]
        if args.record:
            store = captions.FixtureStore(args.record)
            clients = [captions.RecordingClient(c, store) for c in clients]
        composer = clients[0] if args.composer == "llm" else None
        summary = captions.run_pipeline(root, clients, cfg, composer)
    elif args.composer == "template":
        summary = captions.recompose_sidecars(root, cfg)
    else:
        raise CLIError("the llm composer needs --live")
    _echo(root, args, name="caption_config.json")
    print(json.dumps({"written": len(summary.written), "skipped": len(summary.skipped), "failed": len(summary.failed)}))
    if not summary.ok:
        for sid, err in sorted(summary.failed.items()):
            print(f"failed {sid}: {err}", file=sys.stderr)
        return 1
    return 0


def _retrieval(model: NextNet, index: data.DatasetIndex, protocol: str, l2: bool = False) -> dict:
    query, gallery = index.by_split("query"), index.by_split("gallery")
    if not query:
        # held-in evaluation on the training split
        query = gallery = index.by_split("train")
        protocol = "none"
    rs = RetrievalSet.from_samples(embed(model, query), query, embed(model, gallery), gallery)
    return evaluate(rs, protocol, l2)


def cmd_train(args) -> int:
    out = Path(args.out)
    index = data.load_dataset(args.data)
    cfg = resolve_model_config(args, _image_size(index))
    aug = None if args.no_augment else data.AugmentationConfig(seed=args.seed)
    tcfg = TrainConfig(steps=args.steps, P=args.P, K=args.K, seed=args.seed, augmentation=aug, eval_every=args.eval_every)
    _echo(out, args, {"model": cfg.to_dict()})
    torch.set_num_threads(args.threads)
    model = NextNet(cfg, index.num_classes)

    def score(m):
        metrics = _retrieval(m, index, args.protocol)
        return metrics["mAP"]

    def keep_best(m, step, value):
        save_checkpoint(out / "best.npz", m, {"step": step, "mAP": value})

    try:
        history = fit(model, index, tcfg, out / "train.jsonl", score if args.eval_every else None, keep_best)
    except FloatingPointError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    save_checkpoint(out / "last.npz", model, {"step": tcfg.steps})
    metrics = _retrieval(model, index, args.protocol)
    write_report(metrics, out / "metrics.json")
    print(json.dumps({"final_loss": history[-1].__dict__, **{k: metrics[k] for k in ("mAP", "R1", "R5", "R10")}}))
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    model, _ = load_checkpoint(args.checkpoint)
    index = data.load_dataset(args.data)
    if args.split == "train":
        samples = index.by_split("train")
        rs = RetrievalSet.from_samples(embed(model, samples), samples, embed(model, samples), samples)
    else:
        q, g = index.by_split("query"), index.by_split("gallery")
        if not q:
            raise CLIError("dataset has no query split; use --split train")
        rs = RetrievalSet.from_samples(embed(model, q), q, embed(model, g), g)
    metrics = evaluate(rs, args.protocol, args.l2)
    _echo(out, args)
    write_report(metrics, out / "metrics.json")
    print(json.dumps({k: metrics[k] for k in ("mAP", "R1", "R5", "R10", "num_queries", "num_skipped", "protocol")}))
    return 0


def cmd_study(args) -> int:
    out = Path(args.out)
    base = resolve_model_config(args)
    aug = None if args.no_augment else data.AugmentationConfig(seed=args.seed)
    grid = args.grid
    if grid is not None and args.axis in ("caption_quality", "expert_count"):
        grid = [float(g) if args.axis == "caption_quality" else int(g) for g in grid]
    spec = ablation.StudySpec(
        args.axis, grid, base, TrainConfig(steps=args.steps, P=args.P, K=args.K, augmentation=aug),
        tuple(args.seeds), args.protocol, args.ids, args.per_id, args.test_ids, args.seed, args.seed,
    )
    index = None
    if args.data:
        index = data.load_dataset(args.data)
        spec.base = replace(spec.base, encoder=replace(spec.base.encoder, image_size=_image_size(index)))
    _echo(out, args, {"spec": spec.to_dict()})
    report = ablation.run_study(spec, index, out)
    print(ablation.report_markdown(report))
    return 0


def _save_gray(path: Path, arr: np.ndarray, scale: int = 1) -> None:
    img = Image.fromarray(arr.astype(np.uint8), mode="L")
    if scale > 1:
        img = img.resize((arr.shape[1] * scale, arr.shape[0] * scale), Image.NEAREST)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def _norm_map(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    return np.zeros_like(x) if hi - lo < 1e-12 else 255 * (x - lo) / (hi - lo)


def cmd_diag(args) -> int:
    out = Path(args.out)
    model, _ = load_checkpoint(args.checkpoint)
    if args.with_text:
        model.cfg = replace(model.cfg, modulate_at_eval=True)
    index = data.load_dataset(args.data)
    pool = index.by_split(args.split) or list(index.samples)
    samples = [s for s in pool if s.sample_id in args.sample_ids] if args.sample_ids else pool[: args.num_samples]
    if not samples:
        raise CLIError("no samples selected")
    _echo(out, args)
    batch = collate(samples, None, next(model.parameters()).dtype)
    model.eval()
    with torch.no_grad():
        res = model(batch.images, batch.captions, batch.sample_ids)
    grid = res.features.grid
    patch = model.cfg.encoder.patch_size
    omega_rows = []
    for b, s in enumerate(samples):
        sid = s.sample_id
        for i, row in enumerate(res.route_states):
            for m, st in zip(MODALITIES, row):
                _save_gray(out / "masks" / sid / f"expert{i}_{m}.png", 255 * st.mask[b].numpy(), patch)
        if res.route_states:
            (out / "routes").mkdir(parents=True, exist_ok=True)
            dump_route_states(res.route_states, out / "routes" / f"{sid}.json", b)
        if res.structure_outputs is not None:
            norms = res.structure_outputs[b].norm(dim=-1).numpy()  # (E, M*N)
            for e, per_tok in enumerate(norms):
                for mi, m in enumerate(MODALITIES):
                    block = per_tok.reshape(len(MODALITIES), *grid)[mi]
                    _save_gray(out / "activations" / sid / f"structure{e}_{m}.png", _norm_map(block), patch)
            np.savetxt(out / "activations" / sid / "norms.csv", norms, delimiter=",", fmt="%.6f")
        if res.omega is not None:
            w = res.omega[b].reshape(-1, res.omega.shape[-1]).numpy()
            for r, weights in enumerate(w):
                omega_rows.append([sid, r, *[f"{x:.8f}" for x in weights]])
        for e, attn in enumerate(res.attention):
            path = out / "attention" / sid / f"entry{e}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for h, per_head in enumerate(attn[b].numpy()):
                    for q, weights in enumerate(per_head):
                        w.writerow([h, MODALITIES[q], *[f"{x:.6f}" for x in weights]])
    if omega_rows:
        with open(out / "omega.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "route", *[f"expert{e}" for e in range(len(omega_rows[0]) - 2)]])
            w.writerows(omega_rows)
    print(f"diagnostics for {len(samples)} samples written to {out}")
    return 0


# --------------------------------------------------------------------------
# parser

# checked after the config file is merged, so a file may supply them
REQUIRED = {
    "synth": ("out",),
    "caption": ("root",),
    "train": ("data", "out"),
    "eval": ("checkpoint", "data", "out"),
    "study": ("axis", "out"),
    "diag": ("checkpoint", "data", "out"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nextreid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="YAML/JSON file of option values")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "generate a synthetic tri-modal dataset")
    p.add_argument("--out", default=None)
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--per-id", type=int, default=4)
    p.add_argument("--test-ids", type=int, default=0)
    p.add_argument("--cameras", type=int, default=4)
    p.add_argument("--object-type", choices=("person", "vehicle"), default="person")
    p.add_argument("--image-size", type=int, nargs=2, default=[32, 16], metavar=("H", "W"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")

    p = command("caption", cmd_caption, "run the attribute caption pipeline")
    p.add_argument("--root", default=None)
    p.add_argument("--replay", default=None, help="fixture directory served offline")
    p.add_argument("--make-fixtures", action="store_true", help="synthesize replay fixtures from truth.json first")
    p.add_argument("--live", action="store_true", help="query chat-completion backends (needs NEXT_MLLM_API_KEY)")
    p.add_argument("--record", default=None, help="record live responses into this fixture directory")
    p.add_argument("--backends", nargs="+", default=["mllm-a", "mllm-b"])
    p.add_argument("--composer", choices=("template", "llm"), default="template")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")

    p = command("train", cmd_train, "train a model")
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--P", type=int, default=4)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--protocol", choices=PROTOCOLS, default="standard_camera")
    p.add_argument("--threads", type=int, default=1)
    _add_model_flags(p)

    p = command("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--protocol", choices=PROTOCOLS, default="standard_camera")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--l2", action="store_true")

    p = command("study", cmd_study, "run an ablation study")
    p.add_argument("--axis", choices=ablation.STUDY_AXES, default=None)
    p.add_argument("--grid", nargs="+", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--data", default=None, help="dataset root (default: synthetic)")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--P", type=int, default=4)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--seed", type=int, default=0, help="data and caption-degradation seed")
    p.add_argument("--protocol", choices=PROTOCOLS, default="standard_camera")
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--per-id", type=int, default=4)
    p.add_argument("--test-ids", type=int, default=4)
    p.add_argument("--no-augment", action="store_true")
    _add_model_flags(p)

    p = command("diag", cmd_diag, "export masks, routing weights and attention maps")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--split", choices=data.SPLITS, default="query")
    p.add_argument("--num-samples", type=int, default=1)
    p.add_argument("--sample-ids", nargs="+", default=None)
    p.add_argument("--with-text", action="store_true", help="modulate routes with full captions")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(loaded, dict):
            raise CLIError(f"{args.config} must hold a mapping")
        loaded.pop("command", None)
        loaded.pop("spec", None)
        known = set(vars(args))
        unknown = set(loaded) - known
        if unknown:
            raise CLIError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**loaded)
        args = parser.parse_args(argv)
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        parser.error(f"{args.command}: missing required options {' '.join(missing)}")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except (CLIError, FileNotFoundError, ValueError, captions.CaptionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
