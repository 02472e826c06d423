"""Command-line pipeline driver.

Subcommands cover the whole workflow: cube synthesis, supervised training,
active-learning rounds, cross-domain transfer, checkpoint evaluation, and
the strategy/component ablation sweep.

Settings resolve in three layers: built-in defaults, then a JSON file
passed with --config, then explicit flags. The resolved settings are
printed once at startup so any run can be reproduced from its log.
Accuracy numbers on stdout and in the ablation CSV are percentages with
two decimals; JSON artifacts keep raw full-precision fractions.

Exit codes: 0 success, 1 usage error, 2 data or file-format error,
3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from hsiatl.checkpoint import load_model, save_model
from hsiatl.data import (
    FormatError,
    HsiCube,
    LabelMap,
    SplitManifest,
    load_cube,
    load_labels,
    load_manifest,
    make_split,
    save_cube,
    save_labels,
    save_manifest,
    synth_cube,
    validate_split,
)
from hsiatl.metrics import MetricsReport
from hsiatl.model import SstConfig, SstModel, init_model
from hsiatl.queries import STRATEGIES, QueryConfig
from hsiatl.training import (
    NumericalError,
    TrainConfig,
    WindowBank,
    evaluate_pixels,
    run_active_learning,
    train_model,
)
from hsiatl.transfer import MmdConfig, run_transfer


class UsageError(Exception):
    """Bad flags or flag values; maps to exit code 1."""


@dataclasses.dataclass
class RunConfig:
    """Union of the tunables every subcommand draws from.

    Field names double as the keys accepted in the --config JSON file.
    Flags override file values, which override these defaults.
    """

    window: int = 8
    subpatch: int = 2
    d_model: int = 56
    n_layers: int = 4
    n_heads: int = 8
    d_ff: int | None = None
    dropout: float = 0.1
    calibration: float = 0.5
    renormalize: bool = False
    strategy: str = "hybrid"
    query_size: int = 16
    n_neighborhood: int = 3
    beta: int = 5
    rounds: int = 6
    epochs: int = 50
    batch_size: int = 56
    lr: float = 0.001
    decay: float = 1e-6
    kernel: str = "rbf"
    bandwidth: float | None = None
    sample_count: int = 256
    rho: float = 0.5
    target_fraction: float = 0.10
    ratios: tuple[float, float, float] = (0.01, 0.49, 0.50)
    seed: int = 0

    def model_config(self, bands: int, n_classes: int) -> SstConfig:
        return SstConfig(
            bands=bands,
            n_classes=n_classes,
            window=self.window,
            subpatch=self.subpatch,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            dropout=self.dropout,
            calibration=self.calibration,
            renormalize=self.renormalize,
        )

    def query_config(self, strategy: str | None = None) -> QueryConfig:
        return QueryConfig(
            query_size=self.query_size,
            n_neighborhood=self.n_neighborhood,
            beta=self.beta,
            strategy=strategy or self.strategy,
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            decay=self.decay,
            seed=self.seed if seed is None else seed,
        )

    def mmd_config(self) -> MmdConfig:
        return MmdConfig(
            kernel=self.kernel,
            bandwidth=self.bandwidth,
            sample_count=self.sample_count,
        )


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_size(value: str) -> tuple[int, int, int]:
    parts = value.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("size must look like 32x32x16")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad size {value!r}") from exc
    if any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError("size dimensions must be positive")
    return dims


def _parse_ratios(value: str) -> tuple[float, float, float]:
    parts = value.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("ratios must look like 0.01,0.49,0.5")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad ratios {value!r}") from exc


def _parse_seeds(value: str) -> list[int]:
    try:
        return [int(p) for p in value.split(",") if p != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {value!r}") from exc


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig overrides")
    p.add_argument("--seed", type=int, help="master RNG seed (default 0)")
    p.add_argument("--cube", help="cube file (HSIC)")
    p.add_argument("--labels", help="label file (HSIL)")
    p.add_argument("--manifest", help="split manifest JSON")
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--out", help="primary output artifact path")


def _add_al_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--query-size", dest="query_size", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--beta", type=int)
    p.add_argument("--neighborhood", dest="n_neighborhood", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hsiatl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic cube + labels")
    _add_shared(p)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--size", type=_parse_size, default=(32, 32, 16),
                   help="rows x cols x bands, e.g. 32x32x16")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--shift", type=float, default=0.0,
                   help="spectral phase shift, radians")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on the manifest's train split")
    _add_shared(p)
    p.add_argument("--ratios", type=_parse_ratios,
                   help="train,pool,test fractions for an auto-made manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("al", help="run active-learning rounds")
    _add_shared(p)
    _add_al_flags(p)
    p.set_defaults(func=cmd_al)

    p = sub.add_parser("transfer", help="adapt a source checkpoint to a new domain")
    _add_shared(p)
    p.add_argument("--source-ckpt", dest="source_ckpt")
    p.add_argument("--target-cube", dest="target_cube")
    p.add_argument("--target-labels", dest="target_labels")
    p.add_argument("--rho", type=float)
    p.add_argument("--target-fraction", dest="target_fraction", type=float)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    _add_shared(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="strategy and component comparison sweep")
    _add_shared(p)
    _add_al_flags(p)
    p.add_argument("--seeds", type=_parse_seeds, default=[0, 1, 2],
                   help="comma-separated seed list")
    p.add_argument("--target-cube", dest="target_cube",
                   help="optional second domain; adds freezing rows")
    p.add_argument("--target-labels", dest="target_labels")
    p.add_argument("--rho", type=float)
    p.set_defaults(func=cmd_ablate)

    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = dataclasses.asdict(RunConfig())
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(values))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        values.update(loaded)
    for name in values:
        override = getattr(args, name, None)
        if override is not None:
            values[name] = override
    if isinstance(values["ratios"], list):
        values["ratios"] = tuple(values["ratios"])
    return RunConfig(**values)


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [n for n in names if not getattr(args, n, None)]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args.command} requires {flags}")


def _load_dataset(args: argparse.Namespace) -> tuple[HsiCube, LabelMap]:
    _require(args, "cube", "labels")
    return load_cube(args.cube), load_labels(args.labels)


def _resolve_manifest(
    args: argparse.Namespace, run: RunConfig, labels: LabelMap
) -> SplitManifest:
    """Load the manifest if its file exists, otherwise create and save one."""
    path = Path(args.manifest) if args.manifest else Path(str(args.cube) + ".manifest.json")
    if path.exists():
        manifest = load_manifest(path)
        validate_split(manifest, labels)
        return manifest
    manifest = make_split(labels, run.ratios, run.seed)
    save_manifest(manifest, path)
    print(f"manifest {path} train {manifest.train.size} "
          f"pool {manifest.pool.size} test {manifest.test.size}")
    return manifest


def _format_metrics(tag: str, report: MetricsReport) -> str:
    return (f"{tag} oa {report.oa * 100:.2f} aa {report.aa * 100:.2f} "
            f"kappa {report.kappa * 100:.2f} n {report.n_samples}")


def _write_json(path: str | None, payload: dict) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_synth(args: argparse.Namespace, run: RunConfig) -> int:
    _require(args, "cube", "labels")
    rows, cols, bands = args.size
    cube, labels = synth_cube(
        n_classes=args.classes,
        rows=rows,
        cols=cols,
        bands=bands,
        noise=args.noise,
        shift=args.shift,
        seed=run.seed,
    )
    save_cube(cube, args.cube)
    save_labels(labels, args.labels)
    print(f"cube {rows}x{cols}x{bands} classes {labels.n_classes} "
          f"noise {args.noise} -> {args.cube}, {args.labels}")
    return 0


def cmd_train(args: argparse.Namespace, run: RunConfig) -> int:
    cube, labels = _load_dataset(args)
    manifest = _resolve_manifest(args, run, labels)
    model = init_model(run.model_config(cube.bands, labels.n_classes), seed=run.seed)
    bank = WindowBank(cube, labels, run.window, run.subpatch)
    features, targets = bank.take(manifest.train)
    losses = train_model(model, features, targets, run.train_config())
    report = evaluate_pixels(model, bank, manifest.test)
    print(_format_metrics("test", report))
    if args.checkpoint:
        save_model(model, args.checkpoint)
    _write_json(args.out, {
        "final_loss": losses[-1] if losses else None,
        "train_size": int(manifest.train.size),
        "test": report.as_dict(),
    })
    return 0


def cmd_al(args: argparse.Namespace, run: RunConfig) -> int:
    cube, labels = _load_dataset(args)
    manifest = _resolve_manifest(args, run, labels)
    model = init_model(run.model_config(cube.bands, labels.n_classes), seed=run.seed)
    records = run_active_learning(
        model, cube, labels, manifest,
        run.query_config(), run.rounds, run.train_config(),
    )
    if args.out:
        with open(args.out, "a") as log:
            for record in records:
                log.write(json.dumps(record, sort_keys=True) + "\n")
    for record in records:
        print(f"round {record['round']} train {record['train_size']} "
              f"oa {record['oa'] * 100:.2f} aa {record['aa'] * 100:.2f} "
              f"kappa {record['kappa'] * 100:.2f}")
    if args.checkpoint:
        save_model(model, args.checkpoint)
    return 0


def cmd_transfer(args: argparse.Namespace, run: RunConfig) -> int:
    _require(args, "source_ckpt", "target_cube", "target_labels")
    cube, labels = _load_dataset(args)
    model = load_model(args.source_ckpt)
    target_cube = load_cube(args.target_cube)
    target_labels = load_labels(args.target_labels)
    model, report = run_transfer(
        model, cube, labels, target_cube, target_labels,
        rho=run.rho,
        mmd_cfg=run.mmd_config(),
        train_cfg=run.train_config(),
        target_fraction=run.target_fraction,
        seed=run.seed,
    )
    report["source"] = str(args.cube)
    report["target"] = str(args.target_cube)
    if report["zero_shot"] is not None:
        print(f"zero-shot oa {report['zero_shot']['oa'] * 100:.2f}")
    print(f"fine-tuned oa {report['fine_tuned']['oa'] * 100:.2f} "
          f"frozen {report['frozen']}")
    if args.checkpoint:
        save_model(model, args.checkpoint)
    _write_json(args.out, report)
    return 0


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> int:
    _require(args, "checkpoint")
    cube, labels = _load_dataset(args)
    model = load_model(args.checkpoint)
    bank = WindowBank(cube, labels, model.config.window, model.config.subpatch)
    if args.manifest:
        manifest = load_manifest(args.manifest)
        validate_split(manifest, labels)
        pixels = manifest.test
        scope = "test"
    else:
        pixels = labels.labeled_indices()
        scope = "all-labeled"
    report = evaluate_pixels(model, bank, pixels)
    print(_format_metrics(scope, report))
    print(f"{'class':>5}  {'accuracy':>8}")
    for class_id, value in enumerate(report.per_class, start=1):
        cell = "n/a" if np.isnan(value) else f"{value * 100:.2f}"
        print(f"{class_id:>5}  {cell:>8}")
    _write_json(args.out, {"scope": scope, "metrics": report.as_dict()})
    return 0


def _ablation_rows(run: RunConfig) -> list[tuple[str, str, float]]:
    """(row label, query strategy, attention calibration) per ablation arm.

    no_al spends the whole budget in one random draw (no iterative
    refinement); no_diversity ranks by uncertainty alone; lambda0 disables
    the entropy calibration while keeping the hybrid query.
    """
    return [
        ("random", "random", run.calibration),
        ("entropy", "entropy", run.calibration),
        ("margin", "margin", run.calibration),
        ("diversity_only", "diversity_only", run.calibration),
        ("hybrid", "hybrid", run.calibration),
        ("no_al", "random", run.calibration),
        ("no_diversity", "uncertainty", run.calibration),
        ("lambda0", "hybrid", 0.0),
    ]


def cmd_ablate(args: argparse.Namespace, run: RunConfig) -> int:
    cube, labels = _load_dataset(args)
    bank = WindowBank(cube, labels, run.window, run.subpatch)
    want_transfer = bool(args.target_cube or args.target_labels)
    if want_transfer:
        _require(args, "target_cube", "target_labels")
        target_cube = load_cube(args.target_cube)
        target_labels = load_labels(args.target_labels)
    rows_out: list[dict] = []
    budget = run.rounds * run.query_size
    for seed in args.seeds:
        manifest = make_split(labels, run.ratios, seed)
        for label, strategy, calibration in _ablation_rows(run):
            cfg = dataclasses.replace(
                run.model_config(cube.bands, labels.n_classes),
                calibration=calibration,
            )
            model = init_model(cfg, seed=seed)
            if label == "no_al":
                rounds, sizes = 1, [budget]
            else:
                rounds, sizes = run.rounds, None
            records = run_active_learning(
                model, cube, labels, manifest,
                run.query_config(strategy), rounds,
                run.train_config(seed), bank=bank, round_query_sizes=sizes,
            )
            last = records[-1]
            rows_out.append({
                "strategy": label, "budget": last["train_size"], "seed": seed,
                "oa": last["oa"], "aa": last["aa"], "kappa": last["kappa"],
            })
        if want_transfer:
            for label, rho in (("freezing", run.rho), ("no_freezing", 0.0)):
                model = init_model(
                    run.model_config(cube.bands, labels.n_classes), seed=seed)
                features, targets = bank.take(manifest.train)
                train_model(model, features, targets, run.train_config(seed))
                _, report = run_transfer(
                    model, cube, labels, target_cube, target_labels,
                    rho=rho, mmd_cfg=run.mmd_config(),
                    train_cfg=run.train_config(seed),
                    target_fraction=run.target_fraction, seed=seed,
                )
                fine = report["fine_tuned"]
                n_tune = int(
                    round(target_labels.labeled_indices().size * run.target_fraction))
                rows_out.append({
                    "strategy": label, "budget": n_tune, "seed": seed,
                    "oa": fine["oa"], "aa": fine["aa"], "kappa": fine["kappa"],
                })
    def emit(handle) -> None:
        writer = csv.writer(handle)
        writer.writerow(["strategy", "budget", "seed", "oa", "aa", "kappa"])
        for row in rows_out:
            writer.writerow([
                row["strategy"], row["budget"], row["seed"],
                f"{row['oa'] * 100:.2f}", f"{row['aa'] * 100:.2f}",
                f"{row['kappa'] * 100:.2f}",
            ])

    if args.out:
        with open(args.out, "w", newline="") as handle:
            emit(handle)
    else:
        emit(sys.stdout)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 1
    try:
        run = resolve_config(args)
        print("run-config " + json.dumps(dataclasses.asdict(run), sort_keys=True))
        return args.func(args, run)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
