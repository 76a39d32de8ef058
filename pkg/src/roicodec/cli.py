"""Command-line entry point: ``roicodec {train,encode,decode,eval,attn,validate}``.

Errors are reported as one line on stderr, ``error: <kind>: <message>``.
Exit codes: 0 success, 1 runtime or input error, 2 model/bitstream hash
mismatch, 3 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .bitstream import BitstreamError, ModelMismatchError, decode_image, encode_image
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import DEFAULT_ROI_THRESHOLD, attention_dump, query_grid, rd_curve_csv, write_attention
from .imageio import ImageReadError, list_images, read_image, read_mask, write_image
from .training import ConfigError, RoiDataset, TrainConfig, parse_train_config, train, write_metrics_csv

EXIT_OK, EXIT_ERROR, EXIT_MISMATCH, EXIT_USAGE = 0, 1, 2, 3
CHECKPOINT_SUFFIX = ".rckp"


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of printing usage and exiting."""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise CliError("usage", message, EXIT_USAGE)


def validate_config(path) -> TrainConfig:
    """Read and validate a training config file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError("io", f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_train_config(text)


def _load_model(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError("io", f"cannot read model {path}: {exc.strerror or exc}") from None


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise CliError("usage", f"--grid expects RxC, got {text!r}", EXIT_USAGE) from None
    if r < 1 or c < 1:
        raise CliError("usage", "--grid dimensions must be positive", EXIT_USAGE)
    return r, c


# -- subcommands -----------------------------------------------------------------


def cmd_train(args) -> None:
    cfg = validate_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    dataset = RoiDataset.from_dirs(cfg.image_dir, cfg.mask_dir, cfg.crop)
    model, history = train(cfg, dataset)
    meta = {"omega": cfg.omega, "alpha": cfg.alpha, "steps": cfg.steps, "seed": cfg.seed}
    save_checkpoint(cfg.checkpoint, model, meta)
    if cfg.metrics_csv:
        write_metrics_csv(cfg.metrics_csv, history)
    print(f"saved {cfg.checkpoint} after {len(history)} steps")


def cmd_encode(args) -> None:
    model, meta = _load_model(args.model)
    if args.omega is not None and "omega" in meta and float(meta["omega"]) != args.omega:
        logging.getLogger(__name__).warning("model was trained with omega=%s, not %s", meta["omega"], args.omega)
    image = read_image(args.input)
    mask = read_mask(args.mask)
    if mask.shape[1:] != image.shape[1:]:
        raise CliError("input", f"mask size {mask.shape[1:]} does not match image size {image.shape[1:]}")
    data, _ = encode_image(image, mask, model)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_bytes(data)
    h, w = image.shape[1:]
    print(f"wrote {len(data)} bytes ({8 * len(data) / (h * w):.4f} bpp)")


def cmd_decode(args) -> None:
    model, _ = _load_model(args.model)
    try:
        data = Path(args.input).read_bytes()
    except OSError as exc:
        raise CliError("io", f"cannot read bitstream {args.input}: {exc.strerror or exc}") from None
    write_image(args.out, decode_image(data, model))


def _model_paths(entries: list[str]) -> list[Path]:
    paths = []
    for e in entries:
        p = Path(e)
        if p.is_dir():
            paths += sorted(p.glob(f"*{CHECKPOINT_SUFFIX}"))
        else:
            paths.append(p)
    if not paths:
        raise CliError("input", "no model checkpoints found")
    return paths


def _load_corpus(directory) -> list[tuple[str, np.ndarray, np.ndarray]]:
    root = Path(directory)
    images = list_images(root / "images")
    masks = list_images(root / "masks")
    corpus = []
    for stem, path in images.items():
        if stem not in masks:
            raise CliError("input", f"image {stem} has no mask in {root / 'masks'}")
        corpus.append((stem, read_image(path), read_mask(masks[stem])))
    if not corpus:
        raise CliError("input", f"corpus {root} has no images")
    return corpus


def cmd_eval(args) -> None:
    models = []
    for p in _model_paths(args.models):
        model, meta = _load_model(p)
        models.append((float(meta.get("omega", "nan")), p.name, model))
    # ordered by omega, then file name
    models.sort(key=lambda t: (np.nan_to_num(t[0], nan=np.inf), t[1]))
    corpus = _load_corpus(args.corpus)
    rd_curve_csv([(o, m) for o, _, m in models], corpus, args.csv, args.roi_th)
    print(f"wrote {args.csv}: {len(models) * (len(corpus) + 1)} rows")


def cmd_attn(args) -> None:
    model, _ = _load_model(args.model)
    image = read_image(args.input)
    mask = read_mask(args.mask) if args.mask else None
    rows, cols = _parse_grid(args.grid)
    queries = query_grid(image.shape[1], image.shape[2], rows, cols)
    sites = args.sites.split(",") if args.sites else None
    try:
        maps = attention_dump(model, image, mask, sites, queries)
    except KeyError as exc:
        raise CliError("input", exc.args[0]) from None
    write_attention(maps, args.out)
    print(f"wrote {len(maps)} attention maps to {args.out}")


def cmd_validate(args) -> None:
    cfg = validate_config(args.config)
    print(" ".join(f"{k}={v}" for k, v in vars(cfg).items()))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="roicodec", description="ROI-conditioned learned image codec")
    p.add_argument("--seed", type=int, default=None, help="override the seed used by train")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a model from a config file")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("encode", help="compress an image with its ROI mask")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--omega", type=float, default=None, help="expected training omega (checked against the model)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    # deliberately no --mask: the decoder never sees the ROI
    s = sub.add_parser("decode", help="reconstruct an image from a bitstream")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("eval", help="write an RD table over a corpus")
    s.add_argument("--models", "--model", dest="models", nargs="+", required=True, help="checkpoint files or directories")
    s.add_argument("--corpus", required=True, help="directory holding images/ and masks/")
    s.add_argument("--csv", required=True)
    s.add_argument("--roi-th", type=float, default=DEFAULT_ROI_THRESHOLD)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("attn", help="dump attention maps for a query grid")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--mask", default=None)
    s.add_argument("--grid", default="3x3")
    s.add_argument("--sites", default=None, help="comma-separated block names (default: encoder and decoder)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attn)

    s = sub.add_parser("validate", help="check a training config file")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_validate)
    return p


def _threads() -> int | None:
    raw = os.environ.get("ROICODEC_THREADS", "").strip()
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError("env", f"ROICODEC_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise CliError("env", "ROICODEC_THREADS must be >= 1")
    return n


def run(argv: list[str] | None = None) -> int:
    """Execute one command; returns the process exit code."""
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        with threadpool_limits(limits=_threads()):
            args.func(args)
        return EXIT_OK
    except CliError as exc:
        kind, code, msg = exc.kind, exc.code, str(exc)
    except ModelMismatchError as exc:
        kind, code, msg = "hash-mismatch", EXIT_MISMATCH, str(exc)
    except BitstreamError as exc:
        kind, code, msg = "bitstream", EXIT_ERROR, str(exc)
    except CheckpointError as exc:
        kind, code, msg = "checkpoint", EXIT_ERROR, str(exc)
    except ConfigError as exc:
        kind, code, msg = "config", EXIT_ERROR, str(exc)
    except ImageReadError as exc:
        kind, code, msg = "image", EXIT_ERROR, str(exc)
    except (OSError, ValueError) as exc:
        kind, code, msg = type(exc).__name__, EXIT_ERROR, str(exc)
    print(f"error: {kind}: {' '.join(msg.split())}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
