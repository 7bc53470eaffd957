"""``mtdnet`` command line: synth, train, eval, gradcheck, loso."""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import clips_from_samples, generate_synthetic, load_dataset, save_dataset, stack_clips
from .errors import ConfigurationError, FormatError
from .gradcheck import format_table, run_gradcheck
from .metrics import evaluate, run_loso, write_predictions, write_report
from .network import build_network, spec_to_text, trace_shapes
from .optim import Sgd, fit, init_output_bias
from .tensor import derive_seed, make_rng

log = logging.getLogger("mtdnet")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_ERROR = 0, 1, 2


def _prepare_out(cfg: RunConfig, command: str, **extra) -> Path:
    """Create the output dir and write the effective config and a manifest."""
    out = Path(cfg.get("run", "out"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())
    m = configparser.ConfigParser(interpolation=None)
    m["manifest"] = {"command": command, "seed": str(cfg.seed), "version": __version__,
                     **{k: str(v) for k, v in extra.items()}}
    with open(out / f"manifest_{command}.ini", "w") as f:
        m.write(f)
    return out


def cmd_synth(cfg: RunConfig, args) -> int:
    spec = cfg.synthetic_spec()
    root = Path(cfg.get("run", "dataset"))
    samples = generate_synthetic(spec)
    save_dataset(samples, root)
    manifest = configparser.ConfigParser(interpolation=None)
    manifest["synth"] = dict(cfg.cp["synth"])
    manifest["synth"]["seed"] = str(spec.seed)
    manifest["synth"]["videos"] = str(len(samples))
    with open(root / "manifest.ini", "w") as f:
        manifest.write(f)
    _prepare_out(cfg, "synth", dataset=root, videos=len(samples))
    print(f"wrote {len(samples)} videos of {spec.subjects} subjects to {root}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    spec = cfg.network_spec()
    trace_shapes(spec)  # configuration errors surface before any data is touched
    sgd = cfg.sgd_config()
    sgd.validate()
    samples = load_dataset(cfg.get("run", "dataset"))
    clips, skipped = clips_from_samples(samples, spec.input_temporal_depth, cfg.clip_stride)
    if not clips:
        raise ValueError("dataset yields no clips")
    x, y = stack_clips(clips)
    out = _prepare_out(cfg, "train", clips=len(clips), skipped_videos=skipped)

    if args.resume:
        ck = load_checkpoint(args.resume)
        if spec_to_text(ck.network.spec) != spec_to_text(spec):
            raise FormatError("checkpoint network spec does not match the configuration")
        net, start = ck.network, ck.epoch
        opt = Sgd(net.parameters(), sgd)
        if ck.velocity is not None:
            opt.velocity = ck.velocity
        rng = ck.restore_rng() or make_rng(derive_seed(cfg.seed, "shuffle"))
    else:
        net, start = build_network(spec), 0
        init_output_bias(net, y, sgd)
        opt = Sgd(net.parameters(), sgd)
        rng = make_rng(derive_seed(cfg.seed, "shuffle"))

    every = cfg.cp.getint("run", "checkpoint_every")
    log_path = out / "train.log"
    with open(log_path, "a" if args.resume else "w") as logf:
        def on_epoch(stats):
            line = stats.log_line()
            print(line)
            logf.write(line + "\n")
            logf.flush()
            done = stats.epoch + 1
            if every > 0 and done % every == 0:
                save_checkpoint(out / f"checkpoint_{done:04d}.mtdc", net, opt.velocity, done, rng)

        fit(net, x, y, opt, rng, start_epoch=start, on_epoch=on_epoch)
    save_checkpoint(out / "checkpoint.mtdc", net, opt.velocity, max(start, sgd.max_epochs), rng)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    out = Path(cfg.get("run", "out"))
    ck_path = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.mtdc"
    if not ck_path.is_file():
        raise FileNotFoundError(f"checkpoint {ck_path} not found")
    ck = load_checkpoint(ck_path)
    if spec_to_text(ck.network.spec) != spec_to_text(cfg.network_spec()):
        raise FormatError(f"{ck_path}: network spec does not match the configuration")
    samples = load_dataset(cfg.get("run", "dataset"))
    report = evaluate(ck.network, samples, ck.network.spec.input_temporal_depth,
                      cfg.clip_stride, cfg.cp.getint("run", "eval_batch"))
    out = _prepare_out(cfg, "eval", checkpoint=ck_path)
    write_report(report, out)
    write_predictions(report.predictions, out / "predictions.csv")
    print(report.to_text())
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    rows = run_gradcheck(seed=cfg.seed, n_coords=args.coords)
    table = format_table(rows)
    out = _prepare_out(cfg, "gradcheck")
    (out / "gradcheck.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK if all(r.passed for r in rows) else EXIT_CHECK_FAILED


def cmd_loso(cfg: RunConfig, args) -> int:
    samples = load_dataset(cfg.get("run", "dataset"))
    if len({s.subject_id for s in samples}) < 2:
        raise ValueError("leave-one-subject-out needs at least two subjects")
    sgd = cfg.sgd_config()
    specs = {v: cfg.network_spec(v) for v in cfg.variants}
    for spec in specs.values():
        trace_shapes(spec)
    out = _prepare_out(cfg, "loso", variants=", ".join(specs))
    table = [("variant", "MSE", "PCC", "ICC")]
    for name, spec in specs.items():
        result = run_loso(spec, samples, sgd, cfg.seed, cfg.clip_stride, args.jobs)
        vdir = out / f"loso_{name}"
        vdir.mkdir(exist_ok=True)
        for subject, rep in result.folds:
            write_report(rep, vdir, f"fold_{subject}", f"{name}: held-out {subject}")
        write_report(result.pooled, vdir, "pooled", f"{name}: pooled")
        write_predictions(result.pooled.predictions, vdir / "predictions.csv")
        row = result.pooled.as_row()
        table.append((name, row["mse"], row["pcc"], row["icc"]))
    text = "\n".join(",".join(r) for r in table) + "\n"
    (out / "loso_table.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "loso": cmd_loso}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    common.add_argument("--out", help="output directory (overrides run.out)")
    common.add_argument("--jobs", type=int, default=1, help="parallel folds for loso")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mtdnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train a network")
    p.add_argument("--resume", help="checkpoint to resume from")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint file (default OUT/checkpoint.mtdc)")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--coords", type=int, default=100, help="coordinates sampled per check")
    sub.add_parser("loso", parents=[common], help="leave-one-subject-out comparison")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.out={args.out}")
    try:
        cfg = RunConfig.load(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (FormatError, ConfigurationError, ValueError, OSError, FloatingPointError) as exc:
        print(f"mtdnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
