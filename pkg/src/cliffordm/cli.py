"""Command line: train, eval, profile, bench, split, synth, gradcheck."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .autodiff.tensor import ConfigurationError
from .backbone import load_checkpoint
from .bench import bench_model
from .data.augment import preprocess_eval
from .data.dataset import load_set
from .data.manifest import LABEL_NAMES, ManifestError, expand_eyes, parse_manifest
from .data.split import patient_split, split_map
from .data.synth import SynthSpec, synth_generate
from .gradsuite import SCOPES, run_scope
from .metrics import evaluate
from .profiler import PUBLISHED_GFLOPS, PUBLISHED_PARAMS, PUBLISHED_PARAMS_NO_ENERGY, profile
from .training.config import ConfigError, RunConfig, parse_pairs
from .training.trainer import Trainer, TrainingError


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def resolve_config(args) -> RunConfig:
    """Defaults, then ``--config`` file, then ``--set`` pairs, then ``--seed``."""
    pairs = {}
    if getattr(args, "config", None):
        pairs.update(parse_pairs(Path(args.config).read_text().splitlines()))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        pairs.update(parse_pairs([f"{k.strip()}={v.strip()}"]))
    if getattr(args, "seed", None) is not None:
        pairs["seed"] = str(args.seed)
    return RunConfig.from_pairs(pairs)


@contextlib.contextmanager
def output_dir(path, force: bool):
    """Build the output in a sibling temp dir and move it into place on success."""
    out = Path(path)
    if out.exists() and not force:
        raise UsageError(f"output directory {out} exists (use --force to replace it)")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


def _threads(args) -> int:
    return args.threads if args.threads else 1


def _run_header(cfg: RunConfig, extra: dict) -> str:
    lines = ["# resolved run configuration"] + cfg.to_text().splitlines()
    lines += [f"# {k}={v}" for k, v in extra.items()]
    return "\n".join(lines) + "\n"


def write_split_lists(out: Path, train_ids, val_ids) -> None:
    (out / "train_patients.txt").write_text("".join(f"{p}\n" for p in train_ids))
    (out / "val_patients.txt").write_text("".join(f"{p}\n" for p in val_ids))


def _load_split(manifest, ratio, seed):
    records = parse_manifest(manifest)
    train_ids, val_ids = patient_split(records, ratio, seed)
    samples = expand_eyes(records, split_map(train_ids, val_ids))
    return samples, train_ids, val_ids


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if not args.data:
        raise UsageError("train needs --data MANIFEST")
    manifest = Path(args.data)
    samples, train_ids, val_ids = _load_split(manifest, args.ratio, cfg.seed)
    root = manifest.parent
    train = load_set([s for s in samples if s.split == "train"], root)
    val = load_set([s for s in samples if s.split == "val"], root)
    with threadpool_limits(limits=_threads(args)), output_dir(args.out, args.force) as out:
        trainer = Trainer(cfg)
        header = _run_header(cfg, {
            "parameters": trainer.model.num_parameters(),
            "threads": _threads(args),
            "manifest": manifest.resolve(),
            "split_ratio": args.ratio,
            "train_images": len(train),
            "val_images": len(val),
        })
        (out / "run_header.txt").write_text(header)
        (out / "config.txt").write_text(cfg.to_text())
        write_split_lists(out, train_ids, val_ids)
        trainer.fit(train, val, out, meta={"split_ratio": str(args.ratio)})
        best = trainer.best_model()
        x = np.stack([preprocess_eval(im, cfg.input_size) for im in val.images])
        scores = 1.0 / (1.0 + np.exp(-best.predict_logits(x).astype(np.float64)))
        report = evaluate(scores, val.labels, LABEL_NAMES[: cfg.num_classes])
        (out / "metrics.json").write_text(report.to_json())
    print(f"best epoch {trainer.state.best_epoch + 1}: val macro AUC {trainer.state.best_auc:.4f}; "
          f"artifacts in {args.out}")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint or not args.data:
        raise UsageError("eval needs --checkpoint and --data")
    model, meta = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else int(meta.get("seed", 42))
    ratio = args.ratio if args.ratio is not None else float(meta.get("split_ratio", 0.8))
    manifest = Path(args.data)
    samples, _, _ = _load_split(manifest, ratio, seed)
    chosen = [s for s in samples if args.split == "all" or s.split == args.split]
    if not chosen:
        raise UsageError(f"split {args.split!r} is empty")
    data = load_set(chosen, manifest.parent)
    with threadpool_limits(limits=_threads(args)):
        x = np.stack([preprocess_eval(im, model.cfg.input_size) for im in data.images])
        scores = 1.0 / (1.0 + np.exp(-model.predict_logits(x).astype(np.float64)))
    report = evaluate(scores, data.labels, LABEL_NAMES[: model.cfg.num_classes])
    text = report.to_json()
    if args.out:
        with output_dir(args.out, args.force) as out:
            (out / "metrics.json").write_text(text)
            with open(out / "scores.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["patient_id"] + [f"score_{n}" for n in report.class_names]
                           + [f"label_{n}" for n in report.class_names])
                for pid, s, y in zip(data.patient_ids, scores, data.labels):
                    w.writerow([pid] + [f"{v:.9g}" for v in s] + [int(v) for v in y])
    print(text)
    return 0


def cmd_profile(args) -> int:
    cfg = resolve_config(args)
    prof = profile(cfg.model_config(), args.input_size)
    ref = PUBLISHED_PARAMS if cfg.use_energy else PUBLISHED_PARAMS_NO_ENERGY
    lines = [
        prof.table(),
        f"params vs published {ref:,}: {100 * (prof.total_params / ref - 1):+.2f}%",
        f"GFLOPs {prof.total_flops / 1e9:.3f} vs published {PUBLISHED_GFLOPS}: "
        f"{100 * (prof.total_flops / 1e9 / PUBLISHED_GFLOPS - 1):+.2f}% "
        f"(conv/linear {prof.matmul_flops / 1e9:.3f}, 2 FLOPs per MAC)",
        f"stem conv FLOPs {prof.detail['stem.conv']:,}; rolling-product multiplies {prof.interaction_mults:,}",
    ]
    print("\n".join(lines))
    if args.out:
        with output_dir(args.out, args.force) as out:
            with open(out / "profile.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["component", "params", "flops"])
                for name in prof.flops:
                    w.writerow([name, prof.params.get(name, 0), prof.flops[name]])
                w.writerow(["total", prof.total_params, prof.total_flops])
            (out / "profile.txt").write_text("\n".join(lines) + "\n")
    return 0


def cmd_bench(args) -> int:
    cfg = resolve_config(args)
    report = bench_model(cfg.model_config(), repeats=args.repeats, warmup=args.warmup, threads=_threads(args),
                         seed=cfg.seed)
    print(report.to_text())
    if args.out:
        with output_dir(args.out, args.force) as out:
            (out / "bench.json").write_text(json.dumps(report.to_dict(), indent=2))
    return 0 if report.kernel is None or report.kernel.equivalent else 1


def cmd_split(args) -> int:
    if not args.data:
        raise UsageError("split needs --data MANIFEST")
    seed = args.seed if args.seed is not None else 42
    records = parse_manifest(args.data)
    train_ids, val_ids = patient_split(records, args.ratio, seed)
    with output_dir(args.out, args.force) as out:
        write_split_lists(out, train_ids, val_ids)
    print(f"{len(train_ids)} train / {len(val_ids)} val patients -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(num_patients=args.patients, image_size=args.image_size,
                     seed=args.seed if args.seed is not None else 0)
    with output_dir(args.out, args.force) as out:
        synth_generate(spec, out)
    print(f"{spec.num_patients} patients ({spec.image_size}px) -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    scopes = SCOPES if args.scope == "all" else (args.scope,)
    reports = [r for s in scopes for r in run_scope(s, args.seed or 0)]
    for r in reports:
        print(r)
    failed = [r.op for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed")
    return 1 if failed else 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "bench": cmd_bench,
    "split": cmd_split,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cliffordm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out_required=False):
        if config:
            sp.add_argument("--config", help="key=value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--force", action="store_true", help="replace an existing output directory")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--threads", type=int, default=1, help="BLAS worker threads (default 1: reference mode)")

    sp = sub.add_parser("train", help="train on a manifest")
    common(sp, out_required=True)
    sp.add_argument("--data", help="manifest CSV")
    sp.add_argument("--ratio", type=float, default=0.8, help="train fraction per stratum")

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, config=False)
    sp.add_argument("--checkpoint", help="checkpoint archive")
    sp.add_argument("--data", help="manifest CSV")
    sp.add_argument("--split", choices=("train", "val", "all"), default="val")
    sp.add_argument("--ratio", type=float, default=None)

    sp = sub.add_parser("profile", help="parameter and FLOP counts")
    common(sp)
    sp.add_argument("--input-size", type=int, default=None)

    sp = sub.add_parser("bench", help="batch-1 latency and kernel equivalence")
    common(sp)
    sp.add_argument("--repeats", type=int, default=20)
    sp.add_argument("--warmup", type=int, default=3)

    sp = sub.add_parser("split", help="patient-level stratified split")
    common(sp, config=False, out_required=True)
    sp.add_argument("--data", help="manifest CSV")
    sp.add_argument("--ratio", type=float, default=0.8)

    sp = sub.add_parser("synth", help="generate the synthetic dataset")
    common(sp, config=False, out_required=True)
    sp.add_argument("--patients", type=int, default=800)
    sp.add_argument("--image-size", type=int, default=128)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    common(sp, config=False)
    sp.add_argument("--scope", choices=SCOPES + ("all",), default="ops")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ConfigurationError) as e:
        print(f"cliffordm {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ManifestError, TrainingError, ValueError, OSError) as e:
        print(f"cliffordm {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
