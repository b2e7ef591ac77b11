"""Batch command-line interface tying the library together.

Subcommands cover campaign synthesis, training, the two evaluation
protocols, architecture grid search, single-cut prediction and report
re-rendering. Every command is deterministic given the dataset bytes,
the configuration and the seed; every failure exits nonzero with a
one-line message on stderr.

Option precedence: built-in defaults, then a key=value config file,
then the WEARBENCH_SEED environment variable (seed only), then
command-line flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .condnet import Checkpoint, ModelSpec, TrainConfig, grid_search
from .experiments import (assemble_training, load_dataset, load_report,
                          logo_cv, reference_of, render_report, save_report,
                          train_on_fixed, variable_transfer)
from .signalprep import (RawCut, apply_stats, assemble_window,
                         channels_for_mode, extract_window)
from .synthmill import (MANIFEST_NAME, SynthConfig, default_plan,
                        generate_campaign, read_manifest)
from .tensorcore import NumericError
from .weartargets import TARGET_NAMES


class CliError(ValueError):
    """Bad invocation: missing inputs or invalid option values."""


@dataclass(frozen=True)
class Profile:
    """Scale preset: sampling rates, window length, training defaults."""

    external_rate_hz: float
    internal_rate_hz: float
    window_len: int
    epochs: int
    patience: int
    batch_size: int


# "full" mirrors the measurement campaign's recorder settings; "ci" is the
# desk-scale variant (1 kHz, 2 s windows) for quick end-to-end runs
PROFILES = {
    "full": Profile(10_000.0, 100.0, 20_000, epochs=300, patience=20, batch_size=16),
    "ci": Profile(1_000.0, 100.0, 2_000, epochs=60, patience=10, batch_size=16),
}


@dataclass(frozen=True)
class RunConfig:
    """Merged options for one command, validated before any work starts."""

    dataset: str | None = None
    out: str | None = None
    checkpoint: str | None = None
    report: str | None = None
    cut: str | None = None
    profile: str = "full"
    channels: str = "all"
    conditioned: bool = True
    seed: int = 42
    n_filters_exp: int = 4
    units: int = 4
    kernel: int = 3
    dropout: float = 0.2
    lr: float = 1e-3
    epochs: int | None = None
    batch: int | None = None
    patience: int | None = None
    vc: float | None = None
    fz: float | None = None
    force: bool = False


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("true", "1"):
        return True
    if low in ("false", "0"):
        return False
    raise CliError(f"expected true or false, got {text!r}")


_COERCE = {
    "dataset": str, "out": str, "checkpoint": str, "report": str, "cut": str,
    "profile": str, "channels": str,
    "conditioned": _bool, "force": _bool,
    "seed": int, "n_filters_exp": int, "units": int, "kernel": int,
    "epochs": int, "batch": int, "patience": int,
    "dropout": float, "lr": float, "vc": float, "fz": float,
}


def read_config_file(path: Path) -> dict:
    """Parse a key=value options file; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise CliError(f"{path}:{lineno}: expected key=value, got {line.strip()!r}")
        key, _, raw = text.partition("=")
        key = key.strip().replace("-", "_")
        if key not in _COERCE:
            raise CliError(f"{path}:{lineno}: unknown option {key!r}")
        try:
            values[key] = _COERCE[key](raw.strip())
        except CliError:
            raise
        except ValueError as err:
            raise CliError(f"{path}:{lineno}: {err}") from err
    return values


def build_config(args: argparse.Namespace) -> RunConfig:
    """Apply the option precedence and validate everything up front."""
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(read_config_file(args.config))
    env_seed = os.environ.get("WEARBENCH_SEED")
    if env_seed is not None:
        try:
            merged["seed"] = int(env_seed)
        except ValueError:
            raise CliError(
                f"WEARBENCH_SEED must be an integer, got {env_seed!r}") from None
    for key in _COERCE:
        value = getattr(args, key, None)
        if value is None:
            continue
        merged[key] = _bool(value) if key in ("conditioned", "force") else value
    cfg = RunConfig(**merged)

    if cfg.profile not in PROFILES:
        raise CliError(f"unknown profile {cfg.profile!r} "
                       f"(available: {', '.join(sorted(PROFILES))})")
    channels_for_mode(cfg.channels)
    if not 0 <= cfg.n_filters_exp <= 12:
        raise CliError(f"--n-filters-exp must be in [0, 12], got {cfg.n_filters_exp}")
    # constructing the derived objects validates the remaining overrides
    model_spec(cfg)
    train_config(cfg)
    return cfg


def model_spec(cfg: RunConfig, conditioned: bool | None = None) -> ModelSpec:
    profile = PROFILES[cfg.profile]
    return ModelSpec(
        signal_channels=len(channels_for_mode(cfg.channels)),
        window_len=profile.window_len,
        param_dim=2,
        conditioned=cfg.conditioned if conditioned is None else conditioned,
        units=cfg.units,
        base_filters=2 ** cfg.n_filters_exp,
        kernel=cfg.kernel,
        dropout_rate=cfg.dropout,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    profile = PROFILES[cfg.profile]
    return TrainConfig(
        epochs=profile.epochs if cfg.epochs is None else cfg.epochs,
        batch_size=profile.batch_size if cfg.batch is None else cfg.batch,
        learning_rate=cfg.lr,
        patience=profile.patience if cfg.patience is None else cfg.patience,
        seed=cfg.seed,
    )


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def _banner(command: str, cfg: RunConfig) -> None:
    spec = model_spec(cfg)
    print(f"{command}: profile={cfg.profile} channels={cfg.channels} "
          f"units={spec.units} filters={spec.base_filters} seed={cfg.seed} "
          f"config={config_hash(cfg)}")


def _need(value: str | None, flag: str) -> Path:
    if value is None:
        raise CliError(f"{flag} is required for this command")
    return Path(value)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    out = _need(cfg.out, "--out")
    if out.exists() and any(out.iterdir()) and not cfg.force:
        raise CliError(f"{out} is not empty (pass --force to write anyway)")
    _banner("synth", cfg)
    profile = PROFILES[cfg.profile]
    synth_cfg = SynthConfig(external_rate_hz=profile.external_rate_hz,
                            internal_rate_hz=profile.internal_rate_hz,
                            master_seed=cfg.seed)
    generate_campaign(default_plan(), synth_cfg, out)
    print(out / MANIFEST_NAME)
    return 0


def cmd_train(cfg: RunConfig) -> int:
    dataset_dir = _need(cfg.dataset, "--dataset")
    out = _need(cfg.out, "--out")
    _banner("train", cfg)
    dataset = load_dataset(dataset_dir, cfg.channels)
    checkpoint, history = train_on_fixed(dataset, model_spec(cfg), train_config(cfg))
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out)
    print(f"best epoch {history.best_epoch + 1}, "
          f"validation VB_max RMSE {history.best_val_rmse_um:.3f} um")
    print(out)
    return 0


def _run_eval(cfg: RunConfig, protocol) -> int:
    dataset_dir = _need(cfg.dataset, "--dataset")
    out = _need(cfg.out, "--out")
    dataset = load_dataset(dataset_dir, cfg.channels)
    spec = model_spec(cfg, conditioned=True)
    report = protocol(dataset, spec, reference_of(spec), train_config(cfg))
    out.mkdir(parents=True, exist_ok=True)
    save_report(report, out / "report.json")
    render_report(report, out)
    print(f"mean VB_max RMSE: test {report.mean_rmse_um('test'):.3f} um, "
          f"reference {report.mean_rmse_um('reference'):.3f} um")
    print(f"RMSE improvement {report.rmse_improvement_pct:.1f} %, "
          f"test wins {report.wins}/{len(report.fold_pairs())}")
    print(out / "folds.csv")
    return 0


def cmd_eval_logo(cfg: RunConfig) -> int:
    _banner("eval-logo", cfg)
    return _run_eval(cfg, logo_cv)


def cmd_eval_variable(cfg: RunConfig) -> int:
    _banner("eval-variable", cfg)
    return _run_eval(cfg, variable_transfer)


def cmd_gridsearch(cfg: RunConfig) -> int:
    dataset_dir = _need(cfg.dataset, "--dataset")
    _banner("gridsearch", cfg)
    dataset = load_dataset(dataset_dir, cfg.channels)
    td = assemble_training(list(dataset.fixed_tools))
    result = grid_search(model_spec(cfg, conditioned=True),
                         td.x_train, td.p_train, td.y_train,
                         td.x_val, td.p_val, td.y_val, train_config(cfg))
    for entry in result.entries:
        print(f"units={entry.spec.units} filters={entry.spec.base_filters} "
              f"weights={entry.weight_count} val_rmse={entry.val_rmse_um:.3f} um")
    best = result.best_entry
    print(f"selected: units={best.spec.units} filters={best.spec.base_filters}")
    if cfg.out is not None:
        doc = {"units": best.spec.units,
               "base_filters": best.spec.base_filters,
               "n_filters_exp": best.spec.base_filters.bit_length() - 1,
               "val_rmse_um": best.val_rmse_um}
        out = Path(cfg.out)
        out.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
        print(out)
    return 0


_CUT_ID = re.compile(r"^t(\d+)_c(\d+)$")


def cmd_predict(cfg: RunConfig) -> int:
    checkpoint_path = _need(cfg.checkpoint, "--checkpoint")
    dataset_dir = _need(cfg.dataset, "--dataset")
    if cfg.cut is None:
        raise CliError("--cut is required for this command (e.g. t05_c011)")
    match = _CUT_ID.match(cfg.cut)
    if match is None:
        raise CliError(f"cut id must look like t05_c011, got {cfg.cut!r}")
    tool_id, cut_index = int(match.group(1)), int(match.group(2))

    checkpoint = Checkpoint.load(checkpoint_path)
    if checkpoint.channel_stats is None:
        raise CliError(f"{checkpoint_path} carries no normalization statistics")
    manifest = read_manifest(dataset_dir)
    entry = next((t for t in manifest["tools"] if t["tool"] == tool_id), None)
    if entry is None:
        raise CliError(f"tool {tool_id} not in dataset")
    cut = next((c for c in entry["cuts"] if c["cut"] == cut_index), None)
    if cut is None:
        raise CliError(f"cut {cut_index} not recorded for tool {tool_id}")

    mode = _mode_for(checkpoint.channel_stats.channels)
    raw = RawCut.load(Path(dataset_dir) / cut["signals"])
    window = apply_stats(assemble_window(extract_window(raw), mode),
                         checkpoint.channel_stats)
    v_c = cut["v_c"] if cfg.vc is None else cfg.vc
    f_z = cut["f_z"] if cfg.fz is None else cfg.fz
    pred = checkpoint.predict(window.values[None], np.array([[v_c, f_z]]))[0]
    for name, value in zip(TARGET_NAMES, pred):
        print(f"{name}={value:.6f}")
    return 0


def _mode_for(channels) -> str:
    for mode in ("external", "internal", "all"):
        if channels_for_mode(mode) == tuple(channels):
            return mode
    raise CliError("checkpoint channels match no known channel mode")


def cmd_report(cfg: RunConfig) -> int:
    source = _need(cfg.report, "--report")
    out = _need(cfg.out, "--out")
    report = load_report(source)
    files = render_report(report, out)
    print(f"{len(files)} files -> {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval-logo": cmd_eval_logo,
    "eval-variable": cmd_eval_variable,
    "gridsearch": cmd_gridsearch,
    "predict": cmd_predict,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="key=value options file (flags override it)")
    common.add_argument("--dataset", metavar="DIR", help="campaign directory")
    common.add_argument("--out", metavar="PATH", help="output file or directory")
    common.add_argument("--profile", metavar="{full,ci}",
                        help="scale preset (default full: 10 kHz, 20000-sample windows; "
                             "ci: 1 kHz, 2000)")
    common.add_argument("--channels", choices=("external", "internal", "all"),
                        help="sensor channel group (default all)")
    common.add_argument("--conditioned", choices=("true", "false"),
                        help="feed cutting parameters to the network (default true)")
    common.add_argument("--seed", type=int, help="master seed (default 42)")
    common.add_argument("--n-filters-exp", type=int, metavar="N",
                        help="first conv unit gets 2^N filters (default 4)")
    common.add_argument("--units", type=int, help="conv unit count (default 4)")
    common.add_argument("--kernel", type=int, help="conv kernel width (default 3)")
    common.add_argument("--dropout", type=float, help="dropout rate (default 0.2)")
    common.add_argument("--epochs", type=int, help="training epochs (profile default)")
    common.add_argument("--batch", type=int, help="batch size (profile default)")
    common.add_argument("--patience", type=int,
                        help="early-stopping patience (profile default)")
    common.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    common.add_argument("--force", action="store_true", default=None,
                        help="allow writing into a nonempty directory")

    parser = argparse.ArgumentParser(
        prog="wearbench",
        description="Tool wear estimation benchmark: synthetic milling campaigns, "
                    "parameter-conditioned CNN training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("synth", parents=[common],
                   help="generate the default synthetic campaign into --out")
    sub.add_parser("train", parents=[common],
                   help="train one model on the fixed-parameter tools, "
                        "write a checkpoint to --out")
    sub.add_parser("eval-logo", parents=[common],
                   help="leave-one-set-out cross-validation, report into --out")
    sub.add_parser("eval-variable", parents=[common],
                   help="variable-sequence transfer evaluation, report into --out")
    sub.add_parser("gridsearch", parents=[common],
                   help="search conv units x base filters on validation RMSE")
    predict = sub.add_parser("predict", parents=[common],
                             help="predict the 8 wear targets for one recorded cut")
    predict.add_argument("--checkpoint", metavar="FILE", help="trained model file")
    predict.add_argument("--cut", metavar="ID", help="cut id, e.g. t05_c011")
    predict.add_argument("--vc", type=float, metavar="M_MIN",
                         help="override cutting speed for the prediction")
    predict.add_argument("--fz", type=float, metavar="MM",
                         help="override feed per tooth for the prediction")
    report = sub.add_parser("report", parents=[common],
                            help="re-render CSVs and figures from a saved report.json")
    report.add_argument("--report", metavar="PATH",
                        help="report.json file or directory containing it")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except (ValueError, OSError, NumericError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
