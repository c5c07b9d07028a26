"""``spirdet`` command line: train, fuse, infer, eval, bench, gradcheck."""
import argparse
import os
import sys
from pathlib import Path

import numpy as np

DEFAULT_SEED = 42


def default_seed() -> int:
    raw = os.environ.get("SPIRDET_SEED")
    if raw is None or raw.strip() == "":
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"error: SPIRDET_SEED must be an integer, got {raw!r}")


class CliError(Exception):
    pass


def _alpha_list(text):
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad alpha list {text!r}")
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("alphas must lie in (0, 1]")
    return vals


def _load_config(path):
    from .config import toy_config
    from .fileio import load_config

    return load_config(path) if path else toy_config()


# ------------------------------------------------------------- subcommands


def cmd_train(args):
    from .fileio import save_config, save_model
    from .train import DatasetSpec, train_loop, write_history_csv

    config = _load_config(args.config)
    data = DatasetSpec(n_train=args.n_train, n_test=args.n_test, size=config.input_size[0], seed=args.seed)
    if config.input_size[0] != config.input_size[1]:
        raise CliError("synthetic training needs a square input size")

    def progress(rec):
        if not args.quiet:
            d = rec.losses
            print(f"epoch {rec.epoch:4d}  lr {rec.lr:.6f}  out {d.output_loss:.4f}  sparse {d.sparse_loss:.4f}  "
                  f"orth {d.orth_loss:.5f}", flush=True)

    res = train_loop(config, data, args.epochs, seed=args.seed, batch_size=args.batch_size,
                     use_orth=not args.no_orth, on_epoch=progress)
    if args.log:
        write_history_csv(res.history, args.log)
    if args.output:
        save_model(res.model, args.output)
        if args.write_config:
            save_config(config, f"{args.output}.cfg")
    if res.report is not None:
        for k, v in res.report.as_dict().items():
            print(f"{k} = {v}")
    return 0


def cmd_fuse(args):
    from .backbone import fuse_model
    from .fileio import load_model, save_model

    config = _load_config(args.config)
    model = load_model(config, args.weights)
    if model.fused:
        raise CliError(f"{args.weights} already holds fused weights")
    save_model(fuse_model(model), args.output)
    return 0


def cmd_infer(args):
    from .backbone import fuse_model, predict
    from .fileio import load_model, read_image, write_image

    config = _load_config(args.config)
    model = fuse_model(load_model(config, args.weights))
    img = read_image(args.input)
    if img.shape[1:] != tuple(config.input_size):
        raise CliError(f"image is {img.shape[1]}x{img.shape[2]}, config expects "
                       f"{config.input_size[0]}x{config.input_size[1]}")
    _, o = predict(model, img[None], alpha=args.alpha)
    out = Path(args.output)
    if out.suffix == ".npy":
        np.save(out, o[0].astype(np.float32))
    else:
        write_image(o[0], out)
    return 0


def _image_files(folder):
    exts = {".pgm", ".raw"}
    return {p.stem: p for p in sorted(Path(folder).iterdir()) if p.suffix in exts}


def cmd_eval(args):
    from .fileio import read_image
    from .metrics import detection_metrics

    preds, gts = _image_files(args.pred_dir), _image_files(args.gt_dir)
    if not gts:
        raise CliError(f"no .pgm/.raw masks in {args.gt_dir}")
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise CliError(f"no prediction for {missing[:5]}")
    names = sorted(gts)
    p = [read_image(preds[n]) for n in names]
    g = [(read_image(gts[n]) > 0.5).astype(np.uint8) for n in names]
    rep = detection_metrics(p, g, threshold=args.threshold, match_dist=args.match_dist, miou_mode=args.miou_mode)
    rows = rep.as_dict()
    text = "".join(f"{k} = {v}\n" for k, v in rows.items())
    sys.stdout.write(text)
    if args.output:
        Path(args.output).write_text(",".join(rows) + "\n" + ",".join(str(v) for v in rows.values()) + "\n")
    return 0


def cmd_bench(args):
    from .bench import bench_run, records_to_csv
    from .config import variant_config

    config = _load_config(args.config) if args.config else variant_config(args.variant)
    recs = bench_run(config, args.alphas, repeats=args.repeats, seed=args.seed)
    text = records_to_csv(recs)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    results = run_suite(args.seed, points=args.points, tol=args.tol)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:36s} points={r.points:3d}  "
              f"max_rel_err={r.max_rel_err:.3e}  redraws={r.redraws}")
    return 0 if all(r.passed for r in results) else 1


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spirdet", description="Sparse infrared small-target detector")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    seed = default_seed()

    t = sub.add_parser("train", help="train on synthetic data")
    t.add_argument("--config", help="config file (default: the 64x64 toy config)")
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--n-train", type=int, default=400)
    t.add_argument("--n-test", type=int, default=100)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--seed", type=int, default=seed)
    t.add_argument("--no-orth", action="store_true", help="drop the orthogonality term")
    t.add_argument("--output", help="write train-form weights here")
    t.add_argument("--write-config", action="store_true", help="also write <output>.cfg")
    t.add_argument("--log", help="per-epoch loss CSV")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="fold train-form weights into inference form")
    f.add_argument("--config")
    f.add_argument("--weights", required=True)
    f.add_argument("--output", required=True)
    f.set_defaults(func=cmd_fuse)

    i = sub.add_parser("infer", help="run the fused model on one image")
    i.add_argument("--config")
    i.add_argument("--weights", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True, help=".npy for float output, otherwise 8-bit PGM")
    i.add_argument("--alpha", type=float, default=None, help="override the retention ratio")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="MIoU / Pd / Fa over matching image folders")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--match-dist", type=float, default=3.0)
    e.add_argument("--miou-mode", choices=("global", "per_image"), default="global")
    e.add_argument("--output", help="CSV report")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="sparse vs dense head timing over an alpha grid")
    b.add_argument("--config")
    b.add_argument("--variant", default="lr", choices=("lr", "t", "s", "m"))
    b.add_argument("--alphas", type=_alpha_list, default=[0.0005, 0.001, 0.005, 0.01, 0.05, 1.0])
    b.add_argument("--repeats", type=int, default=15)
    b.add_argument("--seed", type=int, default=seed)
    b.add_argument("--output")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference check of every adjoint")
    g.add_argument("--points", type=int, default=10)
    g.add_argument("--seed", type=int, default=seed)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"spirdet {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
