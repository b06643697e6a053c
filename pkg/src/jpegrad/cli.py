"""Command-line entry point.

Exit codes: 0 success, 2 I/O or usage problem, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .crafter import CraftConfig, InvariantViolation, StepRecord, craft, write_log_csv
from .diffjpeg import CodecConfig, diffjpeg_forward, diffjpeg_vjp
from .metrics import (
    EVAL_QFS,
    dct_survival_heatmap,
    eval_protection,
    grad_coverage,
    jpeg_survival,
    perturbation_stats,
    psnr,
    write_heatmap_csv,
    write_protection_csv,
    write_zone_csv,
    zone_survival,
)
from .surrogate import init_surrogate, load_params, loss_and_input_grad

log = logging.getLogger("jpegrad")

EXIT_OK, EXIT_IO, EXIT_INVARIANT = 0, 2, 3
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
GRADCHECK_HEADER = ("qf", "hard_coverage", "diff_coverage", "hard_grad_norm", "diff_grad_norm")


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# image I/O


def load_image(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise CLIError(f"cannot read image {path}: {exc}") from exc
    return arr / np.float32(255.0)


def to_uint8(x: np.ndarray) -> np.ndarray:
    # values are non-negative, so floor(v + 0.5) is round-half-away-from-zero
    return np.clip(np.floor(np.asarray(x, np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _atomic_write(path: Path, write) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write(tmp)
    os.replace(tmp, path)


def save_image(x: np.ndarray, path: Path, source: Optional[Path] = None) -> None:
    """Write an 8-bit PNG. Unchanged pixels from a PNG source are copied verbatim."""
    from PIL import Image

    pixels = to_uint8(x)
    if source is not None and source.suffix.lower() == ".png":
        with Image.open(source) as im:
            if im.mode == "RGB" and np.array_equal(np.asarray(im), pixels):
                _atomic_write(path, lambda tmp: shutil.copyfile(source, tmp))
                return
    _atomic_write(path, lambda tmp: Image.fromarray(pixels, "RGB").save(tmp, format="PNG"))


def list_images(paths: Sequence[str]) -> list[Path]:
    found: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES))
        elif p.is_file():
            found.append(p)
        else:
            raise CLIError(f"no such file or directory: {p}")
    if not found:
        raise CLIError("no input images found")
    return found


def synthetic_image(size: int = 64, seed: int = 0) -> np.ndarray:
    """Deterministic synthetic image: smooth colour ramps plus mild texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    base = np.stack([0.2 + 0.6 * xx, 0.3 + 0.4 * yy, 0.5 + 0.3 * np.sin(3 * np.pi * xx * yy)], -1)
    img = base + 0.05 * rng.standard_normal(base.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# configuration


def parse_number(text: str) -> float:
    """Accept plain numbers and fractions such as ``8/255``."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from exc


def parse_qfs(text: str) -> list[int]:
    try:
        qfs = [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad quality-factor list {text!r}") from exc
    if not qfs or any(not 1 <= q <= 100 for q in qfs):
        raise argparse.ArgumentTypeError(f"quality factors must lie in [1, 100]: {text!r}")
    return qfs


def read_config(path: Path) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = path.read_text()
    except OSError as exc:
        raise CLIError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


_CONVERTERS = {
    "seed": int, "steps": int, "eot_samples": int, "inner_unroll": int, "loss_samples": int,
    "survival_qf": int, "surrogate_seed": int, "qf_max": int, "qf_min_final": int, "n": int,
    "epsilon": parse_number, "alpha": parse_number, "inner_lr": parse_number,
    "qfs": parse_qfs, "out_dir": str, "params": str,
}


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults < config file < explicit flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        for key, value in read_config(Path(args.config)).items():
            if key not in _CONVERTERS:
                raise CLIError(f"unknown config key {key!r}")
            merged[key] = _CONVERTERS[key](value)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _surrogate(opts: dict):
    if opts.get("params"):
        try:
            return load_params(opts["params"])
        except (OSError, ValueError) as exc:
            raise CLIError(f"cannot load surrogate parameters: {exc}") from exc
    return init_surrogate(opts["surrogate_seed"])


def _out_dir(opts: dict) -> Path:
    out = Path(opts["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_csv(path: Path, header, rows) -> None:
    def write(tmp):
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    _atomic_write(path, write)


# --------------------------------------------------------------------------
# subcommands

_CRAFT_DEFAULTS = {
    "seed": 0, "out_dir": "protected", "epsilon": 8 / 255, "alpha": 0.5 / 255, "steps": 200,
    "eot_samples": 4, "inner_unroll": 1, "inner_lr": CraftConfig.inner_lr,
    "loss_samples": CraftConfig.loss_samples, "survival_qf": 75, "surrogate_seed": 0,
    "qf_max": 95, "qf_min_final": 50, "params": None,
}


def cmd_craft(args) -> int:
    opts = resolve(args, _CRAFT_DEFAULTS)
    paths = list_images(args.inputs)
    images = [load_image(p) for p in paths]
    try:
        cfg = CraftConfig(**{k: opts[k] for k in (
            "epsilon", "alpha", "steps", "eot_samples", "inner_unroll", "inner_lr",
            "loss_samples", "qf_max", "qf_min_final", "seed", "surrogate_seed", "survival_qf")})
    except ValueError as exc:
        raise CLIError(f"invalid configuration: {exc}") from exc
    out = _out_dir(opts)
    params = _surrogate(opts)
    if len({im.shape for im in images}) > 1:
        # differently sized images are crafted one by one; the log averages the runs
        protected, runs = [], []
        for im in images:
            p, r = craft([im], cfg, params)
            protected += p
            runs.append(r)
        records = [merge_records(rs) for rs in zip(*runs)]
    else:
        protected, records = craft(images, cfg, params)
    for src, x in zip(paths, protected):
        save_image(x, out / f"{src.stem}.png", source=src)
    write_log_csv(records, out / "craft_log.csv")
    # the audit runs on what was actually written
    saved = [load_image(out / f"{src.stem}.png") for src in paths]
    stats = [perturbation_stats(s, c) for s, c in zip(saved, images)]
    print(
        "psnr={:.2f}dB max_delta={:.3f}/255 mean_delta={:.2f}/255 coverage={:.1%} survival@{}={:.3f}".format(
            float(np.mean([psnr(s, c) for s, c in zip(saved, images)])),
            max(s["max_delta"] for s in stats),
            float(np.mean([s["mean_delta"] for s in stats])),
            float(np.mean([s["coverage"] for s in stats])),
            cfg.survival_qf,
            float(np.mean([jpeg_survival(s, c, cfg.survival_qf) for s, c in zip(saved, images)])),
        )
    )
    return EXIT_OK


def merge_records(records: Sequence[StepRecord]) -> StepRecord:
    first = records[0]
    return StepRecord(
        first.step, first.qf_min,
        float(np.mean([r.inner_loss for r in records])),
        [float(v) for v in np.mean([r.outer_losses for r in records], axis=0)],
        float(np.mean([r.psnr for r in records])),
        float(np.mean([r.survival for r in records])),
    )


def gradcheck_rows(image: np.ndarray, qfs: Sequence[int], params, seed: int = 0) -> list[list]:
    rng = np.random.default_rng(seed)
    rows = []
    for qf in qfs:
        cfg = CodecConfig(qf=qf)
        y, ctx = diffjpeg_forward(image, cfg)
        _, gy = loss_and_input_grad(params, y, n=8, rng=np.random.default_rng(seed))
        gx = diffjpeg_vjp(ctx, gy)
        rows.append([
            qf,
            grad_coverage("hard", image, qf, rng),
            grad_coverage("diff", image, qf, rng),
            0.0,
            float(np.linalg.norm(gx.astype(np.float64))),
        ])
    return rows


def cmd_gradcheck(args) -> int:
    opts = resolve(args, {"seed": 0, "out_dir": ".", "qfs": [50, 75, 90], "surrogate_seed": 0,
                          "params": None})
    image = load_image(Path(args.image)) if args.image else synthetic_image(seed=opts["seed"])
    rows = gradcheck_rows(image, opts["qfs"], _surrogate(opts), opts["seed"])
    out = _out_dir(opts)
    _write_csv(out / "gradcheck.csv", GRADCHECK_HEADER, [[r[0]] + [repr(v) for v in r[1:]] for r in rows])
    for r in rows:
        print(f"qf={r[0]} hard_coverage={r[1]:.0%} diff_coverage={r[2]:.0%} diff_grad_norm={r[4]:.3e}")
    return EXIT_OK


def cmd_freq(args) -> int:
    opts = resolve(args, {"seed": 0, "out_dir": ".", "qfs": [50, 75, 90]})
    image = load_image(Path(args.image))
    out = _out_dir(opts)
    for qf in opts["qfs"]:
        heat = dct_survival_heatmap(image, qf)
        zones = zone_survival(heat)
        write_heatmap_csv(heat, out / f"heatmap_qf{qf}.csv")
        write_zone_csv(zones, out / f"zones_qf{qf}.csv")
        print(f"qf={qf} dc={zones.dc:.3f} low={zones.low:.3f} mid={zones.mid:.3f} high={zones.high:.3f}")
    return EXIT_OK


def _paired(clean_dir: str, protected_dir: str) -> tuple[list[Path], list[Path]]:
    clean = list_images([clean_dir])
    prot = list_images([protected_dir])
    by_stem = {p.stem: p for p in prot}
    if sorted(p.stem for p in clean) != sorted(by_stem):
        raise CLIError("file names differ between the clean and protected directories")
    return clean, [by_stem[p.stem] for p in clean]


def cmd_eval(args) -> int:
    opts = resolve(args, {"seed": 0, "out_dir": ".", "qfs": list(EVAL_QFS), "n": 8,
                          "surrogate_seed": 0, "params": None})
    clean_paths, prot_paths = _paired(args.clean_dir, args.protected_dir)
    clean = [load_image(p) for p in clean_paths]
    prot = [load_image(p) for p in prot_paths]
    for c, p, name in zip(clean, prot, clean_paths):
        if c.shape != p.shape:
            raise CLIError(f"{name.name}: clean and protected sizes differ")
    table = eval_protection(clean, prot, _surrogate(opts), opts["qfs"], opts["n"],
                            np.random.default_rng(opts["seed"]))
    write_protection_csv(table, _out_dir(opts) / "protection_table.csv")
    print(f"wins: {table.wins}/{len(table.rows)}")
    return EXIT_OK


def cmd_survival(args) -> int:
    opts = resolve(args, {"seed": 0, "out_dir": ".", "qfs": [50, 75, 90]})
    clean_paths, prot_paths = _paired(args.clean_dir, args.protected_dir)
    rows = []
    for cp, pp in zip(clean_paths, prot_paths):
        c, p = load_image(cp), load_image(pp)
        for qf in opts["qfs"]:
            rows.append([cp.stem, qf, repr(jpeg_survival(p, c, qf))])
    _write_csv(_out_dir(opts) / "survival.csv", ("image", "qf", "survival"), rows)
    for qf in opts["qfs"]:
        vals = [float(r[2]) for r in rows if r[1] == qf]
        print(f"qf={qf} survival={np.mean(vals):.3f}")
    return EXIT_OK


# --------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key=value configuration file; flags take precedence")
    p.add_argument("--out-dir", dest="out_dir")


def _craft_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epsilon", type=parse_number, help="l-inf budget on [0,1], e.g. 8/255")
    p.add_argument("--alpha", type=parse_number, help="step size on [0,1], e.g. 0.5/255")
    p.add_argument("--steps", type=int)
    p.add_argument("--eot-samples", dest="eot_samples", type=int)
    p.add_argument("--inner-unroll", dest="inner_unroll", type=int)
    p.add_argument("--inner-lr", dest="inner_lr", type=parse_number)
    p.add_argument("--loss-samples", dest="loss_samples", type=int)
    p.add_argument("--survival-qf", dest="survival_qf", type=int)
    p.add_argument("--surrogate-seed", dest="surrogate_seed", type=int)
    p.add_argument("--params", help="surrogate parameter file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jpegrad", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("craft", help="craft JPEG-robust protected images")
    p.add_argument("inputs", nargs="+", help="image files or directories")
    _common(p)
    _craft_flags(p)
    p.set_defaults(func=cmd_craft)

    p = sub.add_parser("gradcheck", help="gradient coverage through hard vs straight-through JPEG")
    p.add_argument("--image")
    p.add_argument("--qfs", type=parse_qfs)
    p.add_argument("--surrogate-seed", dest="surrogate_seed", type=int)
    p.add_argument("--params")
    _common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("freq", help="DCT survival heatmaps and zone summaries")
    p.add_argument("image")
    p.add_argument("--qfs", type=parse_qfs)
    _common(p)
    p.set_defaults(func=cmd_freq)

    p = sub.add_parser("eval", help="denoising loss of clean vs protected images across QFs")
    p.add_argument("clean_dir")
    p.add_argument("protected_dir")
    p.add_argument("--qfs", type=parse_qfs)
    p.add_argument("--n", type=int, help="noise samples per image and condition")
    p.add_argument("--surrogate-seed", dest="surrogate_seed", type=int)
    p.add_argument("--params")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("survival", help="JPEG survival of perturbations across QFs")
    p.add_argument("clean_dir")
    p.add_argument("protected_dir")
    p.add_argument("--qfs", type=parse_qfs)
    _common(p)
    p.set_defaults(func=cmd_survival)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_IO if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("JPEGRAD_THREADS")
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except InvariantViolation as exc:
        print(f"error: invariant violated at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
