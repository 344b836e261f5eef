"""Command-line pipeline: synth, build-model, train, fit, predict, eval.

Every artifact-producing command writes a JSON run manifest next to its
outputs recording the command line, effective configuration, seed, and
sha256 of every input and output file.  Exit codes: 0 success, 2 usage or
configuration error, 3 data error, 4 numerical failure.

Flags may also be supplied through ``--config FILE`` holding ``key = value``
lines (keys match the long flag names); explicit flags win over the file.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from . import __version__
from .alignment import build_quadruples
from .fileio import (load_dataset, load_dataset_lenient, load_mask_pgm,
                     load_image_pgm, load_model, load_regressor, load_report,
                     save_dataset, save_mask_pgm, save_model, save_points,
                     save_regressor, save_report, write_run_manifest)
from .metrics import dice, evaluate
from .raster import BinaryMask, build_faces, rasterize_hard
from .ssm import fit_pdm
from .synthgen import GenConfig, generate
from .train import FitConfig, fit_single, predict_cloud, train_regressor

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class UsageError(Exception):
    """Bad flags, bad config values, or missing input paths."""


class DataError(Exception):
    """Inputs exist but their content is unusable."""


# ---------------------------------------------------------------------------
# config file handling

def _coerce(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; '#' starts a comment, blanks ignored."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    values = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{p}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip().replace("-", "_")] = _coerce(value.strip())
    return values


def _apply_config_defaults(subparsers: dict, config: dict) -> None:
    known = set()
    for sp in subparsers.values():
        known.update(a.dest for a in sp._actions)
    unknown = sorted(set(config) - known)
    if unknown:
        raise UsageError(f"unknown config key: {unknown[0]}")
    for sp in subparsers.values():
        dests = {a.dest for a in sp._actions}
        sp.set_defaults(**{k: v for k, v in config.items() if k in dests})


# ---------------------------------------------------------------------------
# shared helpers

def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _positive_int(value: int, flag: str) -> int:
    if value is None or value <= 0:
        raise UsageError(f"{flag} must be a positive integer")
    return value


def _input_file(path, flag: str) -> Path:
    p = Path(_require(path, flag))
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {p}")
    return p


def _input_dir(path, flag: str) -> Path:
    p = Path(_require(path, flag))
    if not p.is_dir():
        raise UsageError(f"{flag}: directory not found: {p}")
    return p


def _mask_files(path, flag: str) -> list[Path]:
    p = Path(_require(path, flag))
    if p.is_file():
        return [p]
    if p.is_dir():
        files = sorted(p.glob("*.mask.pgm")) or sorted(p.glob("*.pgm"))
        if not files:
            raise DataError(f"no PGM masks found in {p}")
        return files
    raise UsageError(f"{flag}: path not found: {p}")


def _image_files(path, flag: str) -> list[Path]:
    p = Path(_require(path, flag))
    if p.is_file():
        return [p]
    if p.is_dir():
        files = sorted(f for f in p.glob("*.pgm")
                       if not f.name.endswith(".mask.pgm"))
        if not files:
            raise DataError(f"no PGM images found in {p}")
        return files
    raise UsageError(f"{flag}: path not found: {p}")


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".mask.pgm", ".pgm"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def _fit_config(args, **overrides) -> FitConfig:
    fields = dict(
        lr=args.lr, delta=args.delta, tau=args.tau, seed=args.seed,
        max_iters=getattr(args, "max_iters", 300),
    )
    fields.update(overrides)
    try:
        cfg = FitConfig(**fields)
    except ValueError as err:
        raise UsageError(str(err)) from None
    if cfg.lr <= 0:
        raise UsageError("--lr must be positive")
    if cfg.max_iters <= 0:
        raise UsageError("--max-iters must be positive")
    if cfg.tau <= 0:
        raise UsageError("--tau must be positive")
    return cfg


def _manifest(args, out_dir, command: str, config: dict, seed, inputs,
              outputs, started: float) -> None:
    write_run_manifest(out_dir, command, sys.argv[1:] or [command], config,
                       seed, inputs, outputs,
                       elapsed_s=time.perf_counter() - started,
                       version=__version__)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    started = time.perf_counter()
    n = _positive_int(args.n, "--n")
    if args.size is not None and args.size <= 0:
        raise UsageError("--size must be a positive integer")
    out = Path(_require(args.out, "--out"))
    fields = dict(seed=args.seed)
    if args.size is not None:
        fields["size"] = args.size
    if args.num_points is not None:
        fields["num_points"] = args.num_points
    if args.spacing is not None:
        fields["spacing_mm"] = args.spacing
    try:
        cfg = GenConfig(**fields)
        samples = generate(cfg, n)
    except ValueError as err:
        raise UsageError(str(err)) from None
    save_dataset(out, samples, spacing_mm=cfg.spacing_mm)
    outputs = sorted(p for p in out.iterdir() if p.is_file())
    _manifest(args, out, "synth",
              {"n": n, **{k: getattr(cfg, k) for k in
                          ("size", "num_points", "spacing_mm", "seed")}},
              cfg.seed, [], outputs, started)
    print(f"wrote {n} samples to {out}")
    return EXIT_OK


def cmd_build_model(args) -> int:
    started = time.perf_counter()
    data_dir = _input_dir(args.data, "--data")
    out = Path(_require(args.out, "--out"))
    beta_dim = _positive_int(args.beta_dim, "--beta-dim")
    num_points = _positive_int(args.num_points, "--num-points")
    try:
        records, load_failures = load_dataset_lenient(data_dir)
    except (FileNotFoundError, ValueError) as err:
        raise DataError(str(err)) from None
    if not records:
        raise DataError(f"no loadable samples in {data_dir}")
    triples = [(r.image, r.mask, r.landmarks) for r in records]
    ids = [r.sample_id for r in records]
    try:
        corr = build_quadruples(triples, num_points,
                                exclude_dice=args.exclude_dice, ids=ids)
    except ValueError as err:
        raise DataError(str(err)) from None
    clouds = [q.p_canonical for q in corr.quadruples]
    try:
        model = fit_pdm(clouds, beta_dim)
    except ValueError as err:
        raise UsageError(str(err)) from None
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, model)
    for sid, reason in load_failures + list(corr.excluded):
        print(f"excluded {sid}: {reason}")
    print(f"kept {len(clouds)} of {len(records)} samples")
    print(f"retained variance fraction: {model.retained_variance():.6f}")
    inputs = [data_dir / "manifest.tsv"]
    _manifest(args, out.parent, "build-model",
              {"data": str(data_dir), "num_points": num_points,
               "beta_dim": beta_dim, "exclude_dice": args.exclude_dice},
              None, inputs, [out], started)
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.perf_counter()
    data_dir = _input_dir(args.data, "--data")
    model_path = _input_file(args.model, "--model")
    out = Path(_require(args.out, "--out"))
    delta = args.delta
    stage2_epochs = 0 if args.stage1_only else args.stage2_epochs
    try:
        hidden = tuple(int(h) for h in str(args.hidden).split(",") if h != "")
    except ValueError:
        raise UsageError("--hidden must be a comma-separated integer list") \
            from None
    cfg = _fit_config(
        args, delta=delta, batch_size=args.batch_size, hidden=hidden,
        downsample=args.downsample, val_fraction=args.val_fraction,
        stage1_max_epochs=args.stage1_max_epochs,
        stage2_epochs=stage2_epochs, patience=args.patience,
        augment=args.augment, rotation_max_deg=args.rotation_max_deg,
        translation_frac=args.translation_frac, flip_prob=args.flip_prob)
    if delta < 0:
        raise UsageError("--delta must be non-negative")
    try:
        model = load_model(model_path)
    except ValueError as err:
        raise DataError(str(err)) from None
    try:
        records = load_dataset(data_dir)
    except (FileNotFoundError, ValueError) as err:
        raise DataError(str(err)) from None
    samples = [(r.image, r.points, r.mask) for r in records]
    faces = build_faces(model.num_points)
    try:
        net, report = train_regressor(samples, model, faces, cfg)
    except ValueError as err:
        raise DataError(str(err)) from None
    out.parent.mkdir(parents=True, exist_ok=True)
    report_path = Path(args.report) if args.report else out.with_suffix(
        ".report.tsv")
    save_regressor(out, net)
    save_report(report_path, report)
    last = report.rows[-1]
    print(f"epochs: {last[0]} (stage 2 from "
          f"{report.stage2_start if report.stage2_start else '-'})")
    print(f"final val point loss: {last[3]:.6f}  val dice: {last[4]:.6f}")
    _manifest(args, out.parent, "train",
              {"data": str(data_dir), "model": str(model_path),
               "delta": delta, "lr": cfg.lr, "tau": cfg.tau,
               "batch_size": cfg.batch_size, "hidden": list(hidden),
               "downsample": cfg.downsample, "seed": cfg.seed,
               "stage1_only": bool(args.stage1_only),
               "stage2_epochs": cfg.stage2_epochs,
               "augment": cfg.augment,
               "rotation_max_deg": cfg.rotation_max_deg,
               "translation_frac": cfg.translation_frac,
               "flip_prob": cfg.flip_prob},
              cfg.seed, [model_path, data_dir / "manifest.tsv"],
              [out, report_path], started)
    return EXIT_OK


def cmd_fit(args) -> int:
    started = time.perf_counter()
    model_path = _input_file(args.model, "--model")
    masks = _mask_files(args.masks, "--masks")
    out = Path(_require(args.out, "--out"))
    cfg = _fit_config(args)
    try:
        model = load_model(model_path)
    except ValueError as err:
        raise DataError(str(err)) from None
    faces = build_faces(model.num_points)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for path in masks:
        try:
            target = load_mask_pgm(path, spacing_mm=args.spacing)
        except ValueError as err:
            raise DataError(str(err)) from None
        if not target.data.any():
            raise DataError(f"{path}: empty mask")
        result = fit_single(model, faces, target, cfg)
        rendered = rasterize_hard(result.points, faces, target.width,
                                  target.height, target.spacing_mm)
        stem = _stem(path)
        pts_path = out / f"{stem}.pts"
        mask_path = out / f"{stem}.mask.pgm"
        save_points(pts_path, result.points)
        save_mask_pgm(mask_path, rendered)
        outputs += [pts_path, mask_path]
        print(f"{stem}: dice {dice(rendered, target):.4f} "
              f"({len(result.loss_trace)} iterations)")
    _manifest(args, out, "fit",
              {"model": str(model_path), "lr": cfg.lr, "tau": cfg.tau,
               "max_iters": cfg.max_iters, "delta": cfg.delta,
               "spacing": args.spacing, "seed": cfg.seed},
              cfg.seed, [model_path, *masks], outputs, started)
    return EXIT_OK


def cmd_predict(args) -> int:
    started = time.perf_counter()
    model_path = _input_file(args.model, "--model")
    reg_path = _input_file(args.reg, "--reg")
    images = _image_files(args.images, "--images")
    out = Path(_require(args.out, "--out"))
    refine = args.refine_iters
    if refine < 0:
        raise UsageError("--refine-iters must be non-negative")
    cfg = _fit_config(args, max_iters=max(refine, 1))
    try:
        model = load_model(model_path)
        net = load_regressor(reg_path)
    except ValueError as err:
        raise DataError(str(err)) from None
    if net.output_size != 6 + model.n_modes:
        raise DataError("regressor output size does not match the model")
    faces = build_faces(model.num_points)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for path in images:
        try:
            image = load_image_pgm(path)
        except ValueError as err:
            raise DataError(str(err)) from None
        theta, coeffs, cloud = predict_cloud(net, model, image)
        if refine > 0:
            # refine against the image's own bright region: threshold at
            # the foreground/background midpoint, start from the predicted
            # parameters
            observed = image > 0.5
            if observed.any():
                result = fit_single(model, faces,
                                    BinaryMask(observed,
                                               spacing_mm=args.spacing),
                                    cfg, init=(theta, coeffs))
                cloud = result.points
        h, w = image.shape
        rendered = rasterize_hard(cloud, faces, w, h, args.spacing)
        stem = _stem(path)
        pts_path = out / f"{stem}.pts"
        mask_path = out / f"{stem}.mask.pgm"
        save_points(pts_path, cloud)
        save_mask_pgm(mask_path, rendered)
        outputs += [pts_path, mask_path]
        print(f"{stem}: {cloud.num_points} points, "
              f"{int(rendered.data.sum())} foreground pixels")
    _manifest(args, out, "predict",
              {"model": str(model_path), "reg": str(reg_path),
               "refine_iters": refine, "lr": cfg.lr, "tau": cfg.tau,
               "spacing": args.spacing, "seed": cfg.seed},
              cfg.seed, [model_path, reg_path, *images], outputs, started)
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.perf_counter()
    pred_dir = _input_dir(args.pred, "--pred")
    gt_dir = _input_dir(args.gt, "--gt")
    out = Path(_require(args.out, "--out"))
    pred_files = _mask_files(pred_dir, "--pred")
    preds = []
    gts = []
    ids = []
    for pf in pred_files:
        stem = _stem(pf)
        gf = gt_dir / pf.name
        if not gf.is_file():
            gf = gt_dir / f"{stem}.mask.pgm"
        if not gf.is_file():
            raise DataError(f"no ground-truth mask for {stem} in {gt_dir}")
        try:
            preds.append(load_mask_pgm(pf, spacing_mm=args.spacing))
            gts.append(load_mask_pgm(gf, spacing_mm=args.spacing))
        except ValueError as err:
            raise DataError(str(err)) from None
        ids.append(stem)
    try:
        report = evaluate(preds, gts)
    except ValueError as err:
        raise DataError(str(err)) from None
    out.mkdir(parents=True, exist_ok=True)
    per_sample = out / "eval.tsv"
    lines = ["id\tdice\thd_mm\tcomponents"]
    for sid, (d, hd, cc) in zip(ids, report.rows()):
        lines.append(f"{sid}\t{d:.6f}\t{hd:.6f}\t{cc}")
    per_sample.write_text("\n".join(lines) + "\n")
    summary = out / "summary.tsv"
    dm, ds = report.dice_mean_sd()
    hm, hs = report.hd_mean_sd()
    cm, cs = report.components_mean_sd()
    summary.write_text(
        "metric\tmean\tsd\n"
        f"dice\t{dm:.6f}\t{ds:.6f}\n"
        f"hd_mm\t{hm:.6f}\t{hs:.6f}\n"
        f"components\t{cm:.6f}\t{cs:.6f}\n")
    outputs = [per_sample, summary]
    print(f"n: {len(ids)}")
    print(f"dice: {dm:.4f} +- {ds:.4f}")
    print(f"hd_mm: {hm:.4f} +- {hs:.4f}")
    print(f"components: {cm:.2f} +- {cs:.2f}")
    if args.plot_data is not None:
        curve_src = _input_file(args.plot_data, "--plot-data")
        try:
            train_report = load_report(curve_src)
        except ValueError as err:
            raise DataError(str(err)) from None
        curves = out / "curves.tsv"
        rows = ["epoch\tstage\ttrain_point\tval_point\tval_dice"]
        rows += ["\t".join(str(v) for v in row) for row in train_report.rows]
        curves.write_text("\n".join(rows) + "\n")
        outputs.append(curves)
        print(f"wrote {curves}")
    _manifest(args, out, "eval",
              {"pred": str(pred_dir), "gt": str(gt_dir),
               "spacing": args.spacing},
              None, [*pred_files], outputs, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="ringseg",
        description="Ring-shaped segmentation via a deformable point-cloud "
                    "model with a differentiable rasterizer.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    parser.add_argument("--config", metavar="FILE",
                        help="key = value defaults, overridden by flags")
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get("RINGSEG_THREADS", "1")),
                        help="worker cap; results are identical at any value")
    sub = parser.add_subparsers(dest="command")
    parsers = {}

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=fn)
        parsers[name] = sp
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic dataset directory")
    sp.add_argument("--n", type=int, help="number of samples")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, help="square image size in pixels")
    sp.add_argument("--num-points", type=int, help="points per cloud")
    sp.add_argument("--spacing", type=float, help="pixel spacing in mm")
    sp.add_argument("--out", help="output dataset directory")

    sp = add("build-model", cmd_build_model,
             "build a shape model from a dataset directory")
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--num-points", type=int, default=88)
    sp.add_argument("--beta-dim", type=int, help="number of modes to keep")
    sp.add_argument("--exclude-dice", type=float, default=0.90,
                    help="re-render Dice below this excludes a sample")
    sp.add_argument("--out", help="output .ssm path")

    sp = add("train", cmd_train, "train the parameter regressor")
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--model", help="shape model .ssm path")
    sp.add_argument("--out", help="output .reg path")
    sp.add_argument("--report", help="training report path "
                                     "(default: out with .report.tsv)")
    sp.add_argument("--lr", type=float, default=0.003)
    sp.add_argument("--delta", type=float, default=0.5,
                    help="mask-loss weight in stage 2")
    sp.add_argument("--tau", type=float, default=0.15,
                    help="blur width of the stage-2 rendered-mask term")
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--hidden", default="256,64",
                    help="hidden layer sizes, comma separated")
    sp.add_argument("--downsample", type=int, default=16,
                    help="input image is block-averaged to this size")
    sp.add_argument("--val-fraction", type=float, default=0.2)
    sp.add_argument("--stage1-max-epochs", type=int, default=500)
    sp.add_argument("--stage2-epochs", type=int, default=150)
    sp.add_argument("--patience", type=int, default=10)
    sp.add_argument("--augment", action=argparse.BooleanOptionalAction,
                    default=True)
    sp.add_argument("--rotation-max-deg", type=float, default=0.0,
                    help="augmentation rotation range; pose regression "
                         "trains best on the flip group alone")
    sp.add_argument("--translation-frac", type=float, default=0.0,
                    help="augmentation translation range")
    sp.add_argument("--flip-prob", type=float, default=0.5)
    sp.add_argument("--stage1-only", action="store_true",
                    help="stop at the stage-1 plateau "
                         "(point-only ablation arm)")

    sp = add("fit", cmd_fit, "fit the model to masks by gradient descent")
    sp.add_argument("--model", help="shape model .ssm path")
    sp.add_argument("--masks", help="mask PGM file or directory")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--lr", type=float, default=0.08)
    sp.add_argument("--delta", type=float, default=0.5)
    sp.add_argument("--tau", type=float, default=0.5)
    sp.add_argument("--max-iters", type=int, default=450)
    sp.add_argument("--spacing", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("predict", cmd_predict, "run the regressor on images")
    sp.add_argument("--model", help="shape model .ssm path")
    sp.add_argument("--reg", help="trained regressor .reg path")
    sp.add_argument("--images", help="image PGM file or directory")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--refine-iters", type=int, default=0,
                    help="mask-fit refinement steps from the prediction")
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--delta", type=float, default=0.5)
    sp.add_argument("--tau", type=float, default=0.5)
    sp.add_argument("--spacing", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("eval", cmd_eval, "score predicted masks against ground truth")
    sp.add_argument("--pred", help="predicted-mask directory")
    sp.add_argument("--gt", help="ground-truth-mask directory")
    sp.add_argument("--out", help="report output directory")
    sp.add_argument("--spacing", type=float, default=1.0)
    sp.add_argument("--plot-data", metavar="REPORT",
                    help="training report to re-emit as a plot-ready TSV")

    return parser, parsers


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, parsers = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        if known.config is not None:
            _apply_config_defaults(parsers, read_config_file(known.config))
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as err:
        print(f"error: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
