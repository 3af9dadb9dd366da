"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

import argparse
import os
import sys

from evimr import pipeline, synth
from evimr.regularizers import RegularizerMode, sample_gradient_field

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2


def _ladder(text):
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad noise ladder {text!r}") from e


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flat dotted config keys")
    common.add_argument("--seed", type=_u64, help="override the run seed")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="evimr", description="Debiased evidential moment-retrieval lab")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="export the train / test_iid / test_ood splits")

    t = sub.add_parser("train", parents=[common], help="two-stage training")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", parents=[common], help="retrieval metrics for a checkpoint")
    e.add_argument("--checkpoint", help="defaults to <out>/checkpoint.bin")
    e.add_argument("--split", choices=("train", "test_iid", "test_ood"),
                   help="evaluate one split (default: both test splits plus OOD contrast)")
    e.add_argument("--data", help="evaluate an exported dataset file instead of a generated split")

    g = sub.add_parser("grad-field", parents=[common], help="regularizer gradient field as CSV")
    g.add_argument("--mode", choices=("vanilla", "geom"), default="geom")
    g.add_argument("--resolution", type=int, default=11)

    n = sub.add_parser("noise-sweep", parents=[common], help="uncertainty under modality noise")
    n.add_argument("--checkpoint")
    n.add_argument("--vis-ladder", type=_ladder)
    n.add_argument("--text-ladder", type=_ladder)

    c = sub.add_parser("calibrate", parents=[common], help="error vs uncertainty rank correlation")
    c.add_argument("--checkpoint")
    c.add_argument("--split", choices=("train", "test_iid", "test_ood"), default="test_iid")

    k = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the model")
    k.add_argument("--fusion", choices=("rff", "concat", "both"), default="both")
    k.add_argument("--corrupt", help=argparse.SUPPRESS)  # negative-control hook
    return p


def _config(args):
    path = args.config
    out = args.out
    if path is None and out is not None and os.path.exists(os.path.join(out, "config.json")):
        path = os.path.join(out, "config.json")
    cfg = pipeline.load_config(path, seed=args.seed, out=out)
    os.makedirs(cfg.out, exist_ok=True)
    return cfg


def _model(cfg, args):
    path = args.checkpoint or os.path.join(cfg.out, "checkpoint.bin")
    ck = pipeline.Checkpoint.load(path, expected_hash=cfg.config_hash())
    return pipeline.model_from_checkpoint(cfg, ck)


def _report(paths):
    for p in paths:
        print(p)


def cmd_gen_data(cfg, args):
    splits = pipeline.build_splits(cfg)
    paths = []
    for name in ("train", "test_iid", "test_ood"):
        path = os.path.join(cfg.out, f"{name}.bin")
        synth.write_dataset(path, splits.get(name), cfg.synth_config(), cfg.bias)
        paths += [path, path + ".json"]
    return paths


def cmd_train(cfg, args):
    pipeline.write_json(os.path.join(cfg.out, "config.json"), cfg.to_flat())
    resume = pipeline.Checkpoint.load(args.resume, cfg.config_hash()) if args.resume else None
    log_path = os.path.join(cfg.out, "train_log.csv")

    def progress(row):
        print(f"epoch {row['epoch']:3d} [{row['stage']}] total={row['total']:.4f} "
              f"nll={row['nll']:.4f} qr={row['qr']:.4f} |g|={row['grad_norm']:.3e}", file=sys.stderr)

    log = []
    try:
        pipeline.train(cfg, out_dir=cfg.out, resume=resume, on_epoch=lambda r: (log.append(r), progress(r)))
    finally:
        pipeline.write_train_log(log_path, log)
    return [os.path.join(cfg.out, "checkpoint.bin"), log_path, os.path.join(cfg.out, "config.json")]


def _eval_entry(res):
    return {"mean_aleatoric": float(res.aleatoric.mean()), "mean_epistemic": float(res.epistemic.mean()),
            "metrics": res.report.to_dict(), "n_samples": int(len(res.top_clip))}


def cmd_eval(cfg, args):
    model = _model(cfg, args)
    thr = cfg.eval.nms_threshold
    if args.data:
        samples = synth.read_dataset(args.data)
        report = {"data": os.path.basename(args.data), **_eval_entry(pipeline.evaluate(model, samples, thr))}
    else:
        splits = pipeline.build_splits(cfg)
        names = [args.split] if args.split else ["test_iid", "test_ood"]
        results = {n: pipeline.evaluate(model, splits.get(n), thr) for n in names}
        report = {n: _eval_entry(r) for n, r in results.items()}
        if not args.split:
            report["ood_epistemic_ratio"] = pipeline.metrics.ood_uncertainty_contrast(
                results["test_iid"].epistemic, results["test_ood"].epistemic)
    path = os.path.join(cfg.out, "metrics.json")
    pipeline.write_json(path, report)
    return [path]


def cmd_grad_field(cfg, args):
    rows = sample_gradient_field(RegularizerMode(args.mode), args.resolution)
    path = os.path.join(cfg.out, f"grad_field_{args.mode}.csv")
    pipeline.write_csv(path, ("delta", "phi", "minus_grad"), rows)
    return [path]


def cmd_noise_sweep(cfg, args):
    model = _model(cfg, args)
    splits = pipeline.build_splits(cfg)
    sweep = pipeline.noise_sweep(model, cfg, splits.test_iid, args.vis_ladder, args.text_ladder)
    csv_path = os.path.join(cfg.out, "noise_sweep.csv")
    json_path = os.path.join(cfg.out, "noise_summary.json")
    pipeline.write_csv(csv_path, ("noise_level", "modality", "uncertainty"), sweep.rows)
    pipeline.write_json(json_path, sweep.summary())
    return [csv_path, json_path]


def cmd_calibrate(cfg, args):
    model = _model(cfg, args)
    splits = pipeline.build_splits(cfg)
    rep, rows = pipeline.calibrate(model, cfg, splits.get(args.split))
    csv_path = os.path.join(cfg.out, "calibration.csv")
    json_path = os.path.join(cfg.out, "calibration.json")
    pipeline.write_csv(csv_path, ("error", "aleatoric", "epistemic"), rows)
    pipeline.write_json(json_path, rep.to_dict())
    return [csv_path, json_path]


def cmd_grad_check(cfg, args):
    fusions = ("rff", "concat") if args.fusion == "both" else (args.fusion,)
    summary = {}
    ok = True
    for fusion in fusions:
        for mode in RegularizerMode:
            rep = pipeline.gradcheck_model(mode.value, fusion, seed=cfg.seed, corrupt=args.corrupt)
            ok &= rep.passed
            summary[f"{fusion}/{mode.value}"] = {
                "kinks": {k: [list(i) for i in v] for k, v in rep.kinks.items()},
                "loss": rep.loss, "max_rel_error": rep.max_rel_error,
                "offenders": rep.offenders, "passed": rep.passed, "tol": rep.tol,
            }
            print(f"{fusion:6s} {mode.value:8s} {'pass' if rep.passed else 'FAIL'} "
                  f"max_rel={max(rep.max_rel_error.values()):.2e} offenders={rep.offenders}", file=sys.stderr)
    path = os.path.join(cfg.out, "gradcheck.json")
    pipeline.write_json(path, {"passed": ok, "runs": summary})
    if not ok:
        raise pipeline.NumericalError("gradient check failed; see " + path)
    return [path]


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-field": cmd_grad_field,
    "noise-sweep": cmd_noise_sweep,
    "calibrate": cmd_calibrate,
    "grad-check": cmd_grad_check,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    try:
        cfg = _config(args)
        _report(COMMANDS[args.command](cfg, args))
    except (FloatingPointError, ArithmeticError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
