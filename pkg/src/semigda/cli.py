"""Command-line entry point: ``semigda <command> [options]``.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime or training error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .config import ABLATIONS, TrainConfig, dump_config, load_config
from .dataset import SyntheticConfig, generate_synthetic_corpus, load_corpus, save_corpus, semi_split
from .errors import ConfigError, SemiGDAError
from .trainer import evaluate, infer, load_checkpoint, run_training, save_checkpoint, set_deterministic
from .vae import images_to_tensor, load_vae, pretrain_vae, reconstruction_mse, save_vae

DATA_ROOT_ENV = "SEMIGDA_DATA_ROOT"

log = logging.getLogger("semigda")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _out_dir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(arg) -> Path:
    path = arg or os.environ.get(DATA_ROOT_ENV)
    if not path:
        raise UsageError(f"no --data given and ${DATA_ROOT_ENV} is unset")
    return Path(path)


def _config_hash(snapshot: dict) -> str:
    return hashlib.sha256(json.dumps(snapshot, sort_keys=True).encode()).hexdigest()


def write_manifest(out: Path, command: str, snapshot: dict, seed, started: float, outputs: dict,
                   config_text: str | None = None, extra: dict | None = None) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": snapshot,
        "config_text": config_text,
        "config_hash": _config_hash(snapshot),
        "seed": seed,
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


# --- commands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = SyntheticConfig(num_samples=args.n, image_size=args.size, noise_std=args.noise, texture=args.texture,
                          seed=args.seed, downsample=args.downsample)
    cfg.validate()
    out = _out_dir(args.out, args.force)
    samples = generate_synthetic_corpus(cfg)
    save_corpus(samples, out)
    snapshot = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg).items()}
    write_manifest(out, "gen-data", snapshot, args.seed, started, {"images": out / "images", "masks": out / "masks"})
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_pretrain_vae(args) -> int:
    started = time.time()
    torch.manual_seed(args.seed)
    if args.deterministic:
        set_deterministic(True)
    corpus = load_corpus(_data_dir(args.data), args.num_classes)
    out = _out_dir(args.out, args.force)
    vae, history = pretrain_vae(corpus, epochs=args.epochs, kl_weight=args.kl_weight, downsample=args.downsample,
                                latent_channels=args.latent_channels, K=args.num_classes, seed=args.seed,
                                lr=args.lr, log=lambda r: log.info("vae epoch %(epoch)d recon %(recon).4f kl %(kl).3f", r))
    vae.freeze()
    ckpt = out / "vae.ckpt"
    digest = save_vae(vae, ckpt)
    (out / "vae_history.json").write_text(json.dumps(history, indent=1))
    snapshot = {"epochs": args.epochs, "kl_weight": args.kl_weight, "downsample": args.downsample,
                "latent_channels": args.latent_channels, "lr": args.lr, "data": str(args.data)}
    write_manifest(out, "pretrain-vae", snapshot, args.seed, started, {"checkpoint": ckpt},
                   extra={"vae_hash": digest, "train_recon_mse": reconstruction_mse(vae, corpus)})
    print(f"vae hash {digest}")
    return 0


def _train_config(args) -> tuple[TrainConfig, str | None]:
    text = None
    if args.config:
        text = Path(args.config).read_text()
        cfg = load_config(args.config)
    else:
        cfg = TrainConfig()
    overrides = {}
    for name in ("labeled_ratio", "seed", "stage1_epochs", "stage2_epochs", "lr"):
        val = getattr(args, name)
        if val is not None:
            overrides[name] = val
    if args.ablate:
        overrides["ablate"] = sorted(set(cfg.ablate.names()) | set(args.ablate))
    if args.deterministic:
        overrides["deterministic"] = True
    return (cfg.replace(**overrides) if overrides else cfg), text


def cmd_train(args) -> int:
    started = time.time()
    cfg, text = _train_config(args)
    vae_path = Path(args.vae)
    if not vae_path.exists():
        raise UsageError(f"VAE checkpoint {vae_path} not found; run `semigda pretrain-vae` first")
    vae = load_vae(vae_path)
    if not vae.frozen:
        raise ConfigError(f"{vae_path} holds an unfrozen VAE; re-run pretrain-vae")
    corpus = load_corpus(_data_dir(args.data), cfg.K)
    split = semi_split(corpus, cfg.labeled_ratio, cfg.seed)
    out = _out_dir(args.out, args.force)
    (out / "config.ini").write_text(text if text is not None else dump_config(cfg))
    result = run_training(split, cfg, vae, run_dir=out)
    report = evaluate(split.test, result.best_model) if split.test else None
    extra = {"vae_hash": vae.content_hash(), "best_val_dice": result.state.best_val_dice,
             "split_sizes": {"labeled": len(split.labeled), "unlabeled": len(split.unlabeled),
                             "val": len(split.val), "test": len(split.test)}}
    if report is not None:
        report.write(out / "test_metrics")
        extra["test_metrics"] = report.summary()
    write_manifest(out, "train", cfg.to_dict(), cfg.seed, started,
                   {"best": out / "best.ckpt", "final": out / "final.ckpt", "loss_log": out / "loss_log.jsonl"},
                   config_text=text, extra=extra)
    if report is not None:
        print(f"test dice {report.dice_pct:.2f} iou {report.iou_pct:.2f} hd95 {report.hd95:.2f}")
    return 0


def _eval_samples(args, state):
    corpus = load_corpus(_data_dir(args.data), state.config.K)
    if args.split == "all":
        return [s for s in corpus if s.mask is not None]
    split = semi_split(corpus, state.config.labeled_ratio, state.config.seed)
    return split.test if args.split == "test" else split.val


def cmd_eval(args) -> int:
    started = time.time()
    state = load_checkpoint(args.checkpoint)
    samples = _eval_samples(args, state)
    report = evaluate(samples, state.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = report.write(out)
    write_manifest(out, "eval", {"checkpoint": str(args.checkpoint), "split": args.split}, state.config.seed,
                   started, {"csv": csv_path, "summary": json_path})
    print(f"dice {report.dice_pct:.2f} iou {report.iou_pct:.2f} hd95 {report.hd95:.2f} (n={len(samples)})")
    return 0


def _images(path) -> list[tuple[str, np.ndarray]]:
    root = Path(path)
    if (root / "images").is_dir():
        root = root / "images"
    files = sorted(root.glob("*.png")) if root.is_dir() else [root]
    if not files:
        raise UsageError(f"no PNG images under {path}")
    return [(f.stem, np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0) for f in files]


def cmd_infer(args) -> int:
    started = time.time()
    state = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out, args.force)
    items = _images(args.images)
    for start in range(0, len(items), 16):
        chunk = items[start:start + 16]
        hard, _ = infer([im for _, im in chunk], state.model)
        for (stem, _), mask in zip(chunk, hard.numpy()):
            Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(out / f"{stem}.png")
    write_manifest(out, "infer", {"checkpoint": str(args.checkpoint), "images": str(args.images)},
                   state.config.seed, started, {"masks": out})
    print(f"wrote {len(items)} masks to {out}")
    return 0


def _grid(feat: np.ndarray) -> np.ndarray:
    """C x h x w feature map -> one normalized grayscale mosaic."""
    c, h, w = feat.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    canvas = np.zeros((rows * (h + 1) - 1, cols * (w + 1) - 1), dtype=np.float64)
    for i in range(c):
        f = feat[i]
        span = f.max() - f.min()
        f = (f - f.min()) / span if span > 0 else np.zeros_like(f)
        r, q = divmod(i, cols)
        canvas[r * (h + 1):r * (h + 1) + h, q * (w + 1):q * (w + 1) + w] = f
    return np.round(canvas * 255).astype(np.uint8)


@torch.no_grad()
def cmd_dump_features(args) -> int:
    started = time.time()
    model = load_checkpoint(args.checkpoint).model
    model.eval()
    out = _out_dir(args.out, args.force)
    items = _images(args.images)
    for stem, image in items:
        x = images_to_tensor([image])
        _, s_v, _, _, s_r = model.encode(x)
        bank = s_v if args.branch == "image" else s_r
        if args.adapted:
            adapter = model.image_adapter if args.branch == "image" else model.mask_adapter
            bank = adapter(bank)
        for level, feat in enumerate(bank):
            Image.fromarray(_grid(feat[0].numpy()), mode="L").save(out / f"{stem}_{args.branch}_level{level}.png")
    write_manifest(out, "dump-features", {"checkpoint": str(args.checkpoint), "branch": args.branch,
                                          "adapted": args.adapted}, None, started, {"grids": out})
    print(f"dumped {len(items)} inputs x {model.vae.num_levels} levels to {out}")
    return 0


# --- parser ----------------------------------------------------------------

def _common(p, seed=True):
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--deterministic", action="store_true", help="deterministic kernels, single thread")
    p.add_argument("--config", help="INI config file")
    if seed:
        p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semigda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    _common(p)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--texture", choices=["flat", "gradient", "perlin"], default="perlin")
    p.add_argument("--downsample", type=int, default=8)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-vae", help="pretrain and freeze the VAE backbone")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--kl-weight", type=float, default=1e-3)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--downsample", type=int, default=8)
    p.add_argument("--latent-channels", type=int, default=4)
    p.add_argument("--num-classes", type=int, default=2)
    p.set_defaults(func=cmd_pretrain_vae)

    p = sub.add_parser("train", help="two-stage SemiGDA training")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--vae", required=True, help="frozen VAE checkpoint from pretrain-vae")
    p.add_argument("--labeled-ratio", type=float)
    p.add_argument("--stage1-epochs", type=int)
    p.add_argument("--stage2-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ablate", action="append", choices=ABLATIONS, default=[])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics on a split of a corpus")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=["test", "val", "all"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write predicted masks as PNG")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="a PNG, a directory of PNGs, or a corpus root")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("dump-features", help="write per-level feature map grids")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--branch", choices=["image", "mask"], default="mask")
    p.add_argument("--adapted", action="store_true", help="dump adapter outputs instead of raw features")
    p.set_defaults(func=cmd_dump_features)
    return parser


def _apply_config_defaults(args) -> None:
    """Commands other than train may read a seed from --config."""
    if getattr(args, "seed", "missing") is None:
        args.seed = load_config(args.config).seed if args.config and args.command != "train" else None
    if args.command in ("gen-data", "pretrain-vae") and args.seed is None:
        args.seed = 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        _apply_config_defaults(args)
        if args.deterministic:
            set_deterministic(True)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"semigda: error: {exc}", file=sys.stderr)
        return 1
    except (SemiGDAError, OSError) as exc:
        print(f"semigda: runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
