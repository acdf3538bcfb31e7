"""`dte` command line: data synthesis, training, evaluation, generation,
ablation grids, and report rendering.

Exit codes: 0 success, 1 runtime failure (one-line `error: <category>: ...`
on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .data import export_manifest, load_dataset, synthesize_toy_dataset, tokenize
from .evaluation import ABLATION_PRESETS, AblationVariant, evaluate_trainer, \
    generate_images, run_ablation
from .losses import RoutingFlags
from .trainer import RunDirectory, TrainConfig, Trainer, load_checkpoint

__all__ = ["main", "build_parser", "render_markdown_table", "RunDirectory"]


def _load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
    if isinstance(raw, dict) and "config" in raw:  # run-directory snapshot
        raw = raw["config"]
    return TrainConfig.from_dict(raw)


def _cmd_data_synth(args) -> int:
    ds = synthesize_toy_dataset(args.n, args.resolution, args.seed)
    manifest = export_manifest(ds, args.out)
    print(manifest)
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.resume:
        trainer = load_checkpoint(args.resume, config=cfg, override=args.force)
    else:
        trainer = Trainer(cfg)
    run_dir = args.run_dir or f"runs/{cfg.config_hash()}"
    rd = trainer.train(run_dir=run_dir, progress=not args.quiet)
    print(rd.path)
    return 0


def _cmd_eval(args) -> int:
    trainer = load_checkpoint(args.ckpt)
    if args.data:
        trainer.dataset = load_dataset(args.data, trainer.config.resolution,
                                       vocab=trainer.dataset.vocab,
                                       max_len=trainer.config.max_len)
    report = evaluate_trainer(trainer, pool_size=args.pool_size, seed=args.seed,
                              extractor=args.extractor, d_f=args.d_f)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload + "\n")
        print(args.out)
    else:
        print(payload)
    return 0


def _cmd_generate(args) -> int:
    import torch
    from PIL import Image

    trainer = load_checkpoint(args.ckpt)
    cfg = trainer.config
    captions_path = Path(args.captions)
    if not captions_path.exists():
        raise FileNotFoundError(f"captions file not found: {captions_path}")
    lines = [ln.strip() for ln in captions_path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"captions file {captions_path} is empty")
    seqs = [tokenize(ln, trainer.dataset.vocab, cfg.max_len) for ln in lines]
    tokens = torch.from_numpy(np.stack([s.ids for s in seqs]))
    lengths = torch.from_numpy(np.asarray([s.length for s in seqs], dtype=np.int64))
    gen_ema, text_ema = trainer.ema_generator()
    images = generate_images(gen_ema, text_ema, cfg.flags, tokens, lengths,
                             seed=args.seed, truncation_psi=args.psi)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        arr = ((img.permute(1, 2, 0).numpy() + 1.0) / 2.0 * 255.0).clip(0, 255)
        Image.fromarray(arr.round().astype(np.uint8)).save(out_dir / f"sample_{i:04d}.png")
    print(out_dir)
    return 0


def _load_grid(spec: str):
    if spec in ABLATION_PRESETS:
        return ABLATION_PRESETS[spec]()
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"grid file not found: {path} "
                                f"(presets: {sorted(ABLATION_PRESETS)})")
    entries = json.loads(path.read_text())
    grid = []
    for e in entries:
        flags = RoutingFlags(**e["flags"]) if e.get("flags") else None
        grid.append(AblationVariant(e["name"], flags, e.get("overrides", {})))
    return grid


def _cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    grid = _load_grid(args.grid)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    run_ablation(grid, cfg, seeds=seeds, pool_size=args.pool_size,
                 out_csv=args.out, progress=not args.quiet)
    print(args.out)
    return 0


def render_markdown_table(rows, columns) -> str:
    """Plain GitHub-style markdown table; values rendered verbatim."""
    lines = ["| " + " | ".join(columns) + " |",
             "| " + " | ".join("---" for _ in columns) + " |"]
    for row in rows:
        lines.append("| " + " | ".join(str(row.get(c, "")) for c in columns) + " |")
    return "\n".join(lines)


def _cmd_report(args) -> int:
    path = Path(getattr(args, "in"))
    if not path.exists():
        raise FileNotFoundError(f"report input not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        columns = reader.fieldnames or []
        rows = list(reader)
    if args.format == "markdown":
        print(render_markdown_table(rows, columns))
    else:
        writer = csv.DictWriter(sys.stdout, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dte",
        description="Dual-text-embedding GAN: synthesize data, train, evaluate, "
                    "generate, run ablation grids, render reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    data_p = sub.add_parser("data", help="dataset utilities")
    data_sub = data_p.add_subparsers(dest="data_command", required=True)
    synth = data_sub.add_parser("synth", help="write a synthetic captioned-shapes dataset")
    synth.add_argument("--n", type=int, required=True, help="number of items")
    synth.add_argument("--resolution", type=int, default=64,
                       help="image resolution (32/64/128/256, default 64)")
    synth.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    synth.add_argument("--out", required=True, help="output directory")
    synth.set_defaults(func=_cmd_data_synth)

    train_p = sub.add_parser("train", help="train from a JSON config")
    train_p.add_argument("--config", required=True, help="flat JSON config file")
    train_p.add_argument("--resume", help="checkpoint to resume from")
    train_p.add_argument("--run-dir", help="run directory (default runs/<config-hash>)")
    train_p.add_argument("--force", action="store_true",
                         help="ignore config-hash/version mismatch on resume")
    train_p.add_argument("--quiet", action="store_true", help="no per-epoch progress")
    train_p.set_defaults(func=_cmd_train)

    eval_p = sub.add_parser("eval", help="compute metrics for a checkpoint")
    eval_p.add_argument("--ckpt", required=True, help="checkpoint path")
    eval_p.add_argument("--data", help="optional manifest overriding the configured dataset")
    eval_p.add_argument("--pool-size", type=int, default=50,
                        help="R-precision candidate pool (default 50)")
    eval_p.add_argument("--seed", type=int, default=0, help="evaluation seed (default 0)")
    eval_p.add_argument("--extractor", default="random_conv",
                        choices=("random_conv", "discriminator"),
                        help="FID feature source (default random_conv)")
    eval_p.add_argument("--d-f", type=int, default=32,
                        help="random_conv feature width (default 32)")
    eval_p.add_argument("--out", help="write the JSON report here instead of stdout")
    eval_p.set_defaults(func=_cmd_eval)

    gen_p = sub.add_parser("generate", help="generate images from captions")
    gen_p.add_argument("--ckpt", required=True, help="checkpoint path")
    gen_p.add_argument("--captions", required=True, help="text file, one caption per line")
    gen_p.add_argument("--psi", type=float, default=None,
                       help="truncation threshold (default off)")
    gen_p.add_argument("--seed", type=int, default=0, help="latent seed (default 0)")
    gen_p.add_argument("--out-dir", required=True, help="PNG output directory")
    gen_p.set_defaults(func=_cmd_generate)

    abl_p = sub.add_parser("ablate", help="train and score a routing-variant grid")
    abl_p.add_argument("--config", required=True, help="base JSON config")
    abl_p.add_argument("--grid", required=True,
                       help=f"preset ({', '.join(sorted(ABLATION_PRESETS))}) or JSON grid file")
    abl_p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default 0,1,2)")
    abl_p.add_argument("--pool-size", type=int, default=50,
                       help="R-precision pool (default 50)")
    abl_p.add_argument("--out", required=True, help="output CSV table")
    abl_p.add_argument("--quiet", action="store_true", help="no per-run progress")
    abl_p.set_defaults(func=_cmd_ablate)

    rep_p = sub.add_parser("report", help="render a grid CSV")
    rep_p.add_argument("--in", required=True, help="input CSV")
    rep_p.add_argument("--format", default="markdown", choices=("markdown", "csv"),
                       help="output format (default markdown)")
    rep_p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: not-found: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: invalid: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive envelope
        print(f"error: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
