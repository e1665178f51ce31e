"""Command-line entry point: config-driven, reproducible experiments.

Commands: generate (write dataset files), pipeline (run the three phases),
biasness (phi report from a predictions CSV), curves (theory curves CSV).
Exit codes: 0 success, 2 config error, 3 data/format error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

from . import biasness as bz
from .bias_predictor import save_predictor, save_pseudo_labels
from .data import (
    DEFAULT_PALETTE,
    BiasSpec,
    Dataset,
    as_generator,
    colorize,
    generate_synthetic,
    load_idx,
    make_validation_split,
)
from .end_reg import EndWeights
from .errors import (
    ConfigError,
    DebiaslabError,
    EvaluationError,
    FormatError,
    ParameterError,
    RunError,
)
from .model import save_checkpoint
from .pipeline import TrainConfig, default_snapshot_epochs, run_pipeline

OUTPUT_ROOT_ENV = "DEBIASLAB_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

_SCHEMA = {
    "data": {
        "kind",
        "rho",
        "n_classes",
        "dim_target",
        "dim_bias",
        "noise_target",
        "noise_bias",
        "n_train",
        "n_val",
        "n_test",
        "images",
        "labels",
        "palette",
        "val_fraction",
    },
    "model": {"hidden", "embedding_dim"},
    "training": {
        "epochs",
        "batch_size",
        "optimizer",
        "learning_rate",
        "weight_decay",
        "snapshot_epochs",
    },
    "search": {"budget", "interval", "alpha", "beta"},
}
_TOP_KEYS = {"data", "model", "training", "search", "seed", "output_dir"}


def _check_keys(section: dict, allowed: set, path: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key {path}.{sorted(unknown)[0]}")


def load_config(path: str | Path) -> dict:
    """Parse and validate an experiment config; raises ConfigError with the
    offending field path.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")

    cfg = {
        "data": dict(raw.get("data", {})),
        "model": dict(raw.get("model", {})),
        "training": dict(raw.get("training", {})),
        "search": dict(raw.get("search", {})),
        "seed": raw.get("seed", 0),
        "output_dir": raw.get("output_dir"),
    }
    for name in ("data", "model", "training", "search"):
        if not isinstance(cfg[name], dict):
            raise ConfigError(f"config.{name} must be an object")
        _check_keys(cfg[name], _SCHEMA[name], name)

    data = cfg["data"]
    kind = data.setdefault("kind", "synthetic")
    if kind not in ("synthetic", "idx"):
        raise ConfigError(f"data.kind must be 'synthetic' or 'idx', got {kind!r}")
    data.setdefault("rho", 0.999)
    if not isinstance(data["rho"], (int, float)) or not 0 < data["rho"] <= 1:
        raise ConfigError(f"data.rho must be in (0, 1], got {data['rho']!r}")
    if kind == "synthetic":
        data.setdefault("n_classes", 10)
        data.setdefault("dim_target", 16)
        data.setdefault("dim_bias", 10)
        data.setdefault("noise_target", 0.25)
        data.setdefault("noise_bias", 0.05)
        data.setdefault("n_train", 5000)
        data.setdefault("n_val", 1500)
        data.setdefault("n_test", 2000)
        for key in ("n_train", "n_val", "n_test"):
            if not isinstance(data[key], int) or data[key] < 1:
                raise ConfigError(f"data.{key} must be a positive integer")
        if data["noise_bias"] > data["noise_target"]:
            raise ConfigError("data.noise_bias must not exceed data.noise_target")
    else:
        for key in ("images", "labels"):
            if key not in data:
                raise ConfigError(f"data.{key} is required for kind 'idx'")
        data.setdefault("palette", [list(c) for c in DEFAULT_PALETTE])
        data.setdefault("val_fraction", 0.3)
        if not 0 < data["val_fraction"] < 1:
            raise ConfigError("data.val_fraction must be in (0, 1)")

    model = cfg["model"]
    model.setdefault("hidden", [64, 64])
    model.setdefault("embedding_dim", 32)
    if not isinstance(model["hidden"], list) or not all(
        isinstance(h, int) and h > 0 for h in model["hidden"]
    ):
        raise ConfigError("model.hidden must be a list of positive integers")
    if not isinstance(model["embedding_dim"], int) or model["embedding_dim"] < 2:
        raise ConfigError("model.embedding_dim must be an integer >= 2")

    training = cfg["training"]
    training.setdefault("epochs", 40)
    training.setdefault("batch_size", 256)
    training.setdefault("optimizer", "adam")
    training.setdefault("learning_rate", 1e-3)
    training.setdefault("weight_decay", 1e-4)
    training.setdefault(
        "snapshot_epochs", list(default_snapshot_epochs(training["epochs"]))
    )
    if training["optimizer"] not in ("sgd", "adam"):
        raise ConfigError("training.optimizer must be 'sgd' or 'adam'")
    if not isinstance(training["epochs"], int) or training["epochs"] < 0:
        raise ConfigError("training.epochs must be a nonnegative integer")
    for t in training["snapshot_epochs"]:
        if not isinstance(t, int) or not 1 <= t <= training["epochs"]:
            raise ConfigError(
                f"training.snapshot_epochs entry {t} outside [1, {training['epochs']}]"
            )

    search = cfg["search"]
    search.setdefault("budget", 24)
    search.setdefault("interval", [0, 50])
    if not isinstance(search["budget"], int) or search["budget"] < 1:
        raise ConfigError("search.budget must be a positive integer")
    if ("alpha" in search) != ("beta" in search):
        raise ConfigError("search.alpha and search.beta must be given together")

    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    return cfg


def _resolve_out(cfg: dict, args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg.get("output_dir"):
        return Path(cfg["output_dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / "run"


def _build_datasets(cfg: dict):
    data = cfg["data"]
    seed = cfg["seed"]
    if data["kind"] == "synthetic":
        spec = BiasSpec(
            rho=data["rho"],
            n_classes=data["n_classes"],
            dim_target=data["dim_target"],
            dim_bias=data["dim_bias"],
            noise_target=data["noise_target"],
            noise_bias=data["noise_bias"],
            seed=seed,
        )
        rng = as_generator(seed)
        pool = generate_synthetic(spec, data["n_train"] + data["n_val"], rng)
        train, val = make_validation_split(
            pool, fraction=data["n_val"] / len(pool), rng=rng
        )
        test_rho = 1.0 / data["n_classes"]
        test = generate_synthetic(
            BiasSpec(
                rho=test_rho,
                n_classes=data["n_classes"],
                dim_target=data["dim_target"],
                dim_bias=data["dim_bias"],
                noise_target=data["noise_target"],
                noise_bias=data["noise_bias"],
                seed=seed,
            ),
            data["n_test"],
            rng,
        )
        return train, val, test

    images, labels = load_idx(data["images"], data["labels"])
    rng = as_generator(seed)
    n = len(images)
    perm = rng.permutation(n)
    n_val = int(round(data["val_fraction"] * n))
    n_test = n_val  # held-out unbiased test, same size as validation
    val_idx = perm[:n_val]
    test_idx = perm[n_val : n_val + n_test]
    train_idx = perm[n_val + n_test :]
    palette = data["palette"]
    rho_val = 1.0 / len(palette)
    train = colorize(images[train_idx], labels[train_idx], data["rho"], palette, rng)
    val = colorize(images[val_idx], labels[val_idx], rho_val, palette, rng)
    test = colorize(images[test_idx], labels[test_idx], rho_val, palette, rng)
    return train, val, test


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _resolve_out(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    train, val, test = _build_datasets(cfg)
    train.save_csv(out / "train.csv")
    val.save_csv(out / "val.csv")
    test.save_csv(out / "test.csv")
    if not args.quiet:
        print(f"wrote {len(train)}/{len(val)}/{len(test)} samples under {out}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _resolve_out(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "reports").mkdir(exist_ok=True)
    shutil.copyfile(args.config, out / "config.json")

    train, val, test = _build_datasets(cfg)
    training, search = cfg["training"], cfg["search"]
    end_weights = None
    if "alpha" in search:
        end_weights = EndWeights(search["alpha"], search["beta"])
    config = TrainConfig(
        epochs=training["epochs"],
        batch_size=training["batch_size"],
        optimizer=training["optimizer"],
        learning_rate=training["learning_rate"],
        weight_decay=training["weight_decay"],
        seed=cfg["seed"],
        snapshot_epochs=tuple(training["snapshot_epochs"]),
        hidden=tuple(cfg["model"]["hidden"]),
        embedding_dim=cfg["model"]["embedding_dim"],
        end_weights=end_weights,
        search_budget=search["budget"],
        rho=cfg["data"]["rho"],
    )
    result = run_pipeline(
        config,
        train,
        val,
        test,
        phase=args.phase,
        search_rng=as_generator(cfg["seed"]),
    )

    for epoch, params in result.snapshots.items():
        save_checkpoint(out / "checkpoints" / f"vanilla_epoch{epoch:03d}.npz", params, epoch=epoch)
    save_checkpoint(out / "checkpoints" / "vanilla_final.npz", result.vanilla_params,
                    epoch=config.epochs)
    _write_report_csv(out / "reports" / "vanilla.csv", result.vanilla_report)

    manifest = {
        "seed": cfg["seed"],
        "rho": cfg["data"]["rho"],
        "phase": args.phase,
        "vanilla": {
            "test_acc": result.vanilla_report.test_acc,
            "final_val_acc": result.vanilla_report.val_acc[-1]
            if result.vanilla_report.val_acc
            else None,
        },
        "phi_curve": [[e, phi] for e, phi in result.phi_curve],
    }
    if result.predictor is not None:
        save_predictor(out / "reports" / "predictor.npz", result.predictor)
        save_pseudo_labels(
            out / "reports" / "pseudo_labels.csv", result.pseudo_train.biases
        )
        manifest["pseudo"] = {
            "k": result.predictor.k,
            "permutation_acc": result.pseudo_permutation_acc,
        }
    if result.debiased_params is not None:
        save_checkpoint(out / "checkpoints" / "debiased_final.npz",
                        result.debiased_params, epoch=config.epochs)
        _write_report_csv(out / "reports" / "debiased.csv", result.debiased_report)
        _write_trials_csv(out / "reports" / "trials.csv", result.trials)
        manifest["debiased"] = {
            "alpha": result.chosen_weights.alpha,
            "beta": result.chosen_weights.beta,
            "test_acc": result.debiased_report.test_acc,
        }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    if not args.quiet:
        print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def _write_report_csv(path: Path, report) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,train_acc,val_acc,val_bias_pseudo_acc\n")
        for row in report.epoch_rows():
            fh.write(
                f"{row['epoch']},{row['train_loss']:.6f},{row['train_acc']:.6f},"
                f"{row['val_acc']:.6f},{row['val_bias_pseudo_acc']:.6f}\n"
            )


def _write_trials_csv(path: Path, trials: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("trial,alpha,beta,val_acc\n")
        for i, t in enumerate(trials):
            fh.write(f"{i},{t['alpha']:.6g},{t['beta']:.6g},{t['val_acc']:.6f}\n")


def cmd_biasness(args) -> int:
    path = Path(args.predictions)
    if not path.exists():
        raise FormatError(f"predictions file not found: {path}")
    biases, preds = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if lineno == 1 and not line[0].isdigit():
                continue  # header
            parts = line.split(",")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected two columns")
            try:
                biases.append(int(parts[0]))
                preds.append(int(parts[1]))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer label")
    if not biases:
        raise ParameterError(f"{path}: no data rows")
    joint = bz.empirical_joint(biases, preds, args.n_classes)
    report = bz.estimate_phi(joint, args.rho)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload + "\n")
    if not args.quiet:
        print(payload)
    return EXIT_OK


def cmd_curves(args) -> int:
    rhos = [float(r) for r in args.rhos.split(",")]
    for rho in rhos:
        if not 0.0 < rho < 1.0:
            raise ParameterError(f"rho grid values must be in (0, 1), got {rho}")
    phis = [float(p) for p in args.phis.split(",")]
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    perfect_path = out / "nmi_perfect.csv"
    with open(perfect_path, "w") as fh:
        fh.write("rho,nmi_perfect\n")
        for rho in rhos:
            fh.write(f"{rho!r},{bz.nmi_perfect(rho, args.n_classes)!r}\n")
    grid_path = out / "nmi_grid.csv"
    with open(grid_path, "w") as fh:
        fh.write("rho,phi,nmi\n")
        for rho in rhos:
            for phi in phis:
                value = bz.nmi_by(
                    bz.TheoryParams(rho=rho, phi=phi, n_t=args.n_classes)
                )
                fh.write(f"{rho!r},{phi!r},{value!r}\n")
    if not args.quiet:
        print(f"wrote {perfect_path} and {grid_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="debiaslab",
        description="Desk-scale unsupervised debiasing experiments.",
    )
    parser.add_argument("--quiet", action="store_true", help="suppress stdout chatter")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write train/val/test dataset files")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pipeline", help="run the three-phase pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--phase", choices=["1", "2", "3", "all"], default="all")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("biasness", help="phi report from a (bias, prediction) CSV")
    p.add_argument("predictions", help="CSV with columns bias,prediction")
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--n-classes", type=int, default=10)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=cmd_biasness)

    p = sub.add_parser("curves", help="theory curve CSVs for plotting")
    p.add_argument("--rhos", required=True, help="comma-separated rho grid")
    p.add_argument(
        "--phis",
        default="0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0",
        help="comma-separated phi grid",
    )
    p.add_argument("--n-classes", type=int, default=10)
    p.add_argument("--out", default=None, help="output directory")
    p.set_defaults(func=cmd_curves)
    return parser


def _error_json(exc: Exception) -> str:
    return json.dumps(
        {"error": {"type": type(exc).__name__, "message": str(exc)}},
        sort_keys=True,
    )


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(_error_json(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ParameterError, EvaluationError) as exc:
        print(_error_json(exc), file=sys.stderr)
        return EXIT_DATA
    except (RunError, DebiaslabError, OSError) as exc:
        print(_error_json(exc), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
