"""Command-line entry points.

Subcommands: ``gen-data``, ``train``, ``eval``, ``check-grad``,
``bench-scaling``.  Every command exits 0 on success, writes a
machine-readable CSV report plus a short human summary, and records a
JSON run manifest (config snapshot, seed, version, outputs, wall time)
atomically at the end of the run.  Unknown flags are errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import _kernels as kernels
from .bench import CSV_HEADER as BENCH_HEADER
from .bench import run_scaling_bench, scaling_summary
from .dataset import SyntheticSpec, generate, read_csv
from .errors import LmnError
from .kvconfig import load_kv
from .metrics import MetricsReport
from .model import Batch, CtrModel
from .train import TrainConfig, evaluate, train, vocab_sizes
from .gradcheck import default_check_config, run_grad_check


@dataclass
class RunManifest:
    """What a run did, written atomically when it finishes."""

    command: str
    seed: int
    config: dict[str, str]
    outputs: list[str] = field(default_factory=list)
    version: str = __version__
    started_unix: float = 0.0
    wall_seconds: float = 0.0

    def write(self, path: str) -> None:
        payload = {
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "outputs": self.outputs,
            "version": self.version,
            "started_unix": self.started_unix,
            "wall_seconds": self.wall_seconds,
        }
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)


def _write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = time.time()
    spec = SyntheticSpec.from_mapping(load_kv(args.spec)) if args.spec \
        else SyntheticSpec()
    result = generate(spec, out_dir=args.out)
    report_path = os.path.join(args.out, "gen_report.csv")
    _write_text(report_path, "split,rows,path\n"
                f"train,{len(result.train_rows)},{result.train_path}\n"
                f"eval,{len(result.eval_rows)},{result.eval_path}\n")
    manifest = RunManifest(
        command="gen-data", seed=spec.seed, config=spec.to_mapping(),
        outputs=[result.train_path, result.eval_path, report_path],
        started_unix=started, wall_seconds=time.time() - started,
    )
    manifest.write(os.path.join(args.out, "manifest.json"))
    print(f"gen-data: {len(result.train_rows)} train rows, "
          f"{len(result.eval_rows)} eval rows -> {args.out}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    config = TrainConfig.from_mapping(load_kv(args.config)) if args.config \
        else TrainConfig()
    train_samples = read_csv(args.train, seq_len=config.seq_len)
    eval_samples = read_csv(args.eval, seq_len=config.seq_len) if args.eval else []
    result = train(config, train_samples, eval_samples, log=print)
    os.makedirs(args.out, exist_ok=True)

    ckpt_path = os.path.join(args.out, "checkpoint.lmn")
    result.model.save(ckpt_path, values_override=result.final_values())
    report_path = os.path.join(args.out, "report.csv")
    lines = ["epoch,train_logloss," + MetricsReport.CSV_HEADER]
    for epoch, train_ll in enumerate(result.train_logloss, start=1):
        row = (result.reports[epoch - 1].csv_row()
               if epoch - 1 < len(result.reports) else ",,,,0")
        lines.append(f"{epoch},{train_ll:.6f},{row}")
    _write_text(report_path, "\n".join(lines) + "\n")

    outputs = [ckpt_path, report_path]
    if result.store is not None and args.dump_shards:
        shard_dir = os.path.join(args.out, "shards")
        result.store.dump(shard_dir)
        outputs.append(shard_dir)
    manifest = RunManifest(
        command="train", seed=config.seed, config=config.to_mapping(),
        outputs=outputs, started_unix=started,
        wall_seconds=time.time() - started,
    )
    if result.lookup_stats:
        manifest.config.update(
            {f"mps.{k}": str(v) for k, v in result.lookup_stats.items()})
    manifest.write(os.path.join(args.out, "manifest.json"))
    if result.reports:
        last = result.reports[-1]
        print(f"train: eval auc={last.auc:.4f} logloss={last.logloss:.4f} "
              f"-> {ckpt_path}")
    else:
        print(f"train: done -> {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    model = CtrModel.load(args.checkpoint)
    samples = read_csv(args.data, seq_len=model.config.seq_len)
    labels, scores = evaluate(model, samples)
    report = MetricsReport.from_scores(
        labels, scores,
        base_auc=args.base_auc, base_logloss=args.base_logloss,
    )
    text = MetricsReport.CSV_HEADER + "\n" + report.csv_row() + "\n"
    if args.out:
        _write_text(args.out, text)
        manifest = RunManifest(
            command="eval", seed=model.seed,
            config={"checkpoint": args.checkpoint, "data": args.data},
            outputs=[args.out], started_unix=started,
            wall_seconds=time.time() - started,
        )
        manifest.write(args.out + ".manifest.json")
    print(text, end="")
    return 0


def cmd_check_grad(args) -> int:
    started = time.time()
    config = default_check_config()
    if args.config:
        config = TrainConfig.from_mapping(load_kv(args.config))
    report = run_grad_check(config, epsilon=args.epsilon,
                            tolerance=args.tolerance)
    print(report.format())
    if args.out:
        lines = ["block,max_rel_err,ok"]
        for b in report.blocks:
            lines.append(f"{b.name},{b.max_rel_err:.6e},{int(b.ok)}")
        _write_text(args.out, "\n".join(lines) + "\n")
        manifest = RunManifest(
            command="check-grad", seed=config.seed, config=config.to_mapping(),
            outputs=[args.out], started_unix=started,
            wall_seconds=time.time() - started,
        )
        manifest.write(args.out + ".manifest.json")
    return 0 if report.ok else 1


def cmd_bench_scaling(args) -> int:
    started = time.time()
    sqrt_ns = [int(p) for p in args.sqrt_n.split(",") if p]
    rows = run_scaling_bench(sqrt_ns, d=args.dim, reps=args.reps,
                             queries=args.queries, seed=args.seed,
                             float32=args.float32)
    lines = [BENCH_HEADER] + [r.csv_row() for r in rows]
    _write_text(args.out, "\n".join(lines) + "\n")
    manifest = RunManifest(
        command="bench-scaling", seed=args.seed,
        config={"sqrt_n": args.sqrt_n, "dim": str(args.dim),
                "reps": str(args.reps), "queries": str(args.queries),
                "float32": str(int(args.float32)),
                "backends": ",".join(kernels.available_backends())},
        outputs=[args.out], started_unix=started,
        wall_seconds=time.time() - started,
    )
    manifest.write(args.out + ".manifest.json")
    print(f"bench-scaling: {len(rows)} rows -> {args.out}")
    if len(sqrt_ns) >= 2:
        for line in scaling_summary(rows, min(sqrt_ns), max(sqrt_ns)):
            print(line)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmn",
        description="Memory-augmented CTR model: data generation, training, "
                    "evaluation, gradient checking, and scaling benchmarks.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic train/eval CSVs")
    p.add_argument("--spec", help="key=value dataset spec file (defaults used otherwise)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a CTR model variant")
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--train", required=True, help="training CSV")
    p.add_argument("--eval", help="evaluation CSV (per-epoch metrics)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dump-shards", action="store_true",
                   help="also dump per-shard value store state")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="CSV report path")
    p.add_argument("--base-auc", type=float, default=None,
                   help="baseline AUC for the improvement column")
    p.add_argument("--base-logloss", type=float, default=None,
                   help="baseline LogLoss for the improvement column")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-grad", help="finite-difference gradient check")
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", help="CSV report path")
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("bench-scaling",
                       help="count and time naive vs decomposed scoring")
    p.add_argument("--sqrt-n", default="50,100,200,300,500",
                   help="comma-separated per-axis key counts")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--queries", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--float32", action="store_true",
                   help="time 32-bit arrays (NumPy backend only)")
    p.add_argument("--out", required=True, help="CSV report path")
    p.set_defaults(func=cmd_bench_scaling)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LmnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
