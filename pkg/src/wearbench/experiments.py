"""Evaluation harnesses comparing the conditioned network to its reference.

Two protocols: leave-one-set-out cross-validation over the fixed-parameter
tools, and a transfer run that trains on all fixed tools and scores the
variable-sequence tools. Each fold trains the parameter-conditioned model
("test") and an architecturally identical unconditioned model ("reference")
with shared seed, splits and training configuration, then reports VB_max
RMSE and R^2 plus per-cut prediction curves.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .condnet import ModelSpec, TrainConfig, train
from .signalprep import (ChannelStats, RawCut, SignalWindow, apply_stats,
                         assemble_window, extract_window, fit_stats)
from .synthmill import PARAM_SETS, read_manifest
from .tensorcore import ParameterError
from .weartargets import VB_MAX_INDEX, read_edge_curves, targets_from_edge_curves

# fraction of each training tool's cuts held out (chronologically last) for
# early stopping
VAL_FRACTION = 0.15

MODEL_KINDS = ("test", "reference")


class DatasetError(ValueError):
    """The dataset on disk cannot support the requested protocol."""


class MetricError(ValueError):
    """The metric is undefined for the given inputs."""


class ReportError(ValueError):
    """The report cannot be rendered."""


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _metric_inputs(pred, truth, min_len: int) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim != 1 or truth.ndim != 1 or pred.shape != truth.shape:
        raise ParameterError(
            f"metrics need equal-length vectors, got {pred.shape} and {truth.shape}")
    if pred.size < min_len:
        raise ParameterError(f"metric needs at least {min_len} samples, got {pred.size}")
    return pred, truth


def rmse(pred, truth) -> float:
    """Root mean square error, in the unit of the inputs."""
    pred, truth = _metric_inputs(pred, truth, 1)
    d = pred - truth
    return float(np.sqrt(np.mean(d * d)))


def r_squared(pred, truth) -> float:
    """Coefficient of determination, 1 - SS_res/SS_tot about the truth mean."""
    pred, truth = _metric_inputs(pred, truth, 2)
    centered = truth - truth.mean()
    ss_tot = float(np.dot(centered, centered))
    if ss_tot == 0.0:
        raise MetricError("R^2 is undefined for a constant truth vector")
    resid = pred - truth
    return 1.0 - float(np.dot(resid, resid)) / ss_tot


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldResult:
    """Scores of one model on one held-out fold.

    curves associates each test tool with its per-cut rows of
    (l_f_mm, measured VB_max um, estimated VB_max um).
    """

    fold_id: str
    model: str
    rmse_um: float
    r2: float
    curves: tuple[tuple[int, np.ndarray], ...]

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ParameterError(f"unknown model kind {self.model!r}")
        if self.rmse_um < 0.0:
            raise ParameterError("RMSE cannot be negative")
        if self.r2 > 1.0:
            raise ParameterError("R^2 cannot exceed 1")
        for tool_id, arr in self.curves:
            if arr.ndim != 2 or arr.shape[1] != 3:
                raise ParameterError(
                    f"tool {tool_id} curve needs columns l_f/measured/estimated")

    @property
    def n_cuts(self) -> int:
        return sum(arr.shape[0] for _, arr in self.curves)


@dataclass(frozen=True)
class ComparisonReport:
    """Paired test/reference fold results for one protocol run."""

    protocol: str
    folds: tuple[FoldResult, ...]
    seed: int

    def __post_init__(self):
        seen: dict[str, list[str]] = {}
        for f in self.folds:
            seen.setdefault(f.fold_id, []).append(f.model)
        for fold_id, kinds in seen.items():
            if sorted(kinds) != ["reference", "test"]:
                raise ParameterError(
                    f"fold {fold_id} needs exactly one test and one reference result")

    def fold_pairs(self) -> list[tuple[FoldResult, FoldResult]]:
        """(test, reference) per fold, in first-appearance order."""
        by_id: dict[str, dict[str, FoldResult]] = {}
        for f in self.folds:
            by_id.setdefault(f.fold_id, {})[f.model] = f
        return [(pair["test"], pair["reference"]) for pair in by_id.values()]

    def _mean(self, model: str, attr: str) -> float:
        vals = [getattr(f, attr) for f in self.folds if f.model == model]
        if not vals:
            raise MetricError("report has no folds")
        return float(np.mean(vals))

    def mean_rmse_um(self, model: str) -> float:
        return self._mean(model, "rmse_um")

    def mean_r2(self, model: str) -> float:
        return self._mean(model, "r2")

    @property
    def rmse_improvement_pct(self) -> float:
        """(reference - test) / reference x 100, on mean fold RMSE."""
        ref = self.mean_rmse_um("reference")
        if ref == 0.0:
            raise MetricError("reference RMSE is zero, improvement undefined")
        return (ref - self.mean_rmse_um("test")) / ref * 100.0

    @property
    def r2_increase_pct(self) -> float:
        ref = self.mean_r2("reference")
        if ref == 0.0:
            raise MetricError("reference R^2 is zero, increase undefined")
        return (self.mean_r2("test") - ref) / abs(ref) * 100.0

    @property
    def wins(self) -> int:
        """Folds where the test model's RMSE is strictly lower."""
        return sum(1 for test, ref in self.fold_pairs() if test.rmse_um < ref.rmse_um)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToolData:
    """All cuts of one tool: raw windows plus wear targets in um."""

    tool_id: int
    fixed_set: int | None
    set_ids: tuple[int, ...]
    params: np.ndarray      # (n, 2) raw [v_c, f_z] per cut
    l_f_mm: np.ndarray      # (n,) cumulative feed travel after each cut
    windows: tuple[SignalWindow, ...]
    targets_um: np.ndarray  # (n, 8)

    @property
    def n_cuts(self) -> int:
        return len(self.windows)


@dataclass(frozen=True)
class WearDataset:
    root: Path
    channel_mode: str
    tools: tuple[ToolData, ...]

    def tool(self, tool_id: int) -> ToolData:
        for t in self.tools:
            if t.tool_id == tool_id:
                return t
        raise DatasetError(f"tool {tool_id} not in dataset")

    @property
    def fixed_tools(self) -> tuple[ToolData, ...]:
        return tuple(t for t in self.tools if t.fixed_set is not None)

    @property
    def variable_tools(self) -> tuple[ToolData, ...]:
        return tuple(t for t in self.tools if t.fixed_set is None)

    @property
    def window_shape(self) -> tuple[int, int]:
        return self.tools[0].windows[0].values.shape


def load_dataset(dataset_dir: Path, mode: str = "all") -> WearDataset:
    """Read a campaign directory into memory-resident windows and targets.

    Windows come out unnormalized; normalization statistics are fit per
    fold on the training split only.
    """
    root = Path(dataset_dir)
    manifest = read_manifest(root)
    tools = []
    for entry in sorted(manifest["tools"], key=lambda e: e["tool"]):
        if not entry["cuts"]:
            raise DatasetError(f"tool {entry['tool']} has no cuts")
        windows, params, travel, sets, targets = [], [], [], [], []
        for cut in entry["cuts"]:
            raw = RawCut.load(root / cut["signals"])
            windows.append(assemble_window(extract_window(raw), mode))
            targets.append(targets_from_edge_curves(
                read_edge_curves(root / cut["wear"])))
            params.append([cut["v_c"], cut["f_z"]])
            travel.append(cut["l_f_mm"])
            sets.append(cut["set"])
        tools.append(ToolData(entry["tool"], entry.get("fixed_set"), tuple(sets),
                              np.array(params), np.array(travel),
                              tuple(windows), np.stack(targets)))
    if not tools:
        raise DatasetError(f"{root}: campaign manifest lists no tools")
    shapes = {w.values.shape for t in tools for w in t.windows}
    if len(shapes) > 1:
        raise DatasetError(f"inconsistent window shapes across cuts: {sorted(shapes)}")
    return WearDataset(root, mode, tuple(tools))


def validation_split(n_cuts: int, fraction: float = VAL_FRACTION) -> tuple[int, int]:
    """(train, val) cut counts; validation takes each tool's last cuts."""
    if n_cuts < 2:
        raise DatasetError(
            "need at least 2 cuts per training tool to hold out validation")
    n_val = min(max(1, round(n_cuts * fraction)), n_cuts - 1)
    return n_cuts - n_val, n_val


@dataclass(frozen=True)
class TrainingData:
    """Per-tool chronological split with train-only normalization."""

    x_train: np.ndarray
    p_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    p_val: np.ndarray
    y_val: np.ndarray
    stats: ChannelStats


def _norm_stack(windows: list[SignalWindow], stats: ChannelStats) -> np.ndarray:
    return np.stack([apply_stats(w, stats).values for w in windows])


def assemble_training(tools: list[ToolData]) -> TrainingData:
    """Split each tool's cuts chronologically and z-score all windows.

    Normalization moments are fit on the training cuts only, never on
    the per-tool validation tail.
    """
    if not tools:
        raise DatasetError("no tools to train on")
    train_w, val_w = [], []
    p_tr, y_tr, p_va, y_va = [], [], [], []
    for t in tools:
        n_train, _ = validation_split(t.n_cuts)
        train_w += list(t.windows[:n_train])
        val_w += list(t.windows[n_train:])
        p_tr.append(t.params[:n_train])
        y_tr.append(t.targets_um[:n_train])
        p_va.append(t.params[n_train:])
        y_va.append(t.targets_um[n_train:])
    stats = fit_stats(train_w)
    return TrainingData(_norm_stack(train_w, stats),
                        np.concatenate(p_tr), np.concatenate(y_tr),
                        _norm_stack(val_w, stats),
                        np.concatenate(p_va), np.concatenate(y_va), stats)


@dataclass(frozen=True)
class _FoldData:
    training: TrainingData
    x_test: np.ndarray
    p_test: np.ndarray
    y_test: np.ndarray
    l_f_test: np.ndarray
    test_slices: tuple[tuple[int, slice], ...]

    @property
    def stats(self) -> ChannelStats:
        return self.training.stats


def _assemble_fold(train_tools: list[ToolData], test_tools: list[ToolData]) -> _FoldData:
    overlap = {t.tool_id for t in train_tools} & {t.tool_id for t in test_tools}
    assert not overlap, f"train/test tool overlap: {sorted(overlap)}"

    training = assemble_training(train_tools)
    test_w, p_te, y_te, l_te, slices = [], [], [], [], []
    pos = 0
    for t in test_tools:
        test_w += list(t.windows)
        p_te.append(t.params)
        y_te.append(t.targets_um)
        l_te.append(t.l_f_mm)
        slices.append((t.tool_id, slice(pos, pos + t.n_cuts)))
        pos += t.n_cuts
    return _FoldData(training, _norm_stack(test_w, training.stats),
                     np.concatenate(p_te), np.concatenate(y_te),
                     np.concatenate(l_te), tuple(slices))


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------

def reference_of(spec: ModelSpec) -> ModelSpec:
    """The architecturally identical spec with parameter inputs removed."""
    return replace(spec, conditioned=False)


def _check_specs(test_spec: ModelSpec, reference_spec: ModelSpec,
                 window_shape: tuple[int, int]) -> None:
    if not test_spec.conditioned or reference_spec.conditioned:
        raise ParameterError(
            "expected a conditioned test spec and an unconditioned reference spec")
    for spec in (test_spec, reference_spec):
        if (spec.signal_channels, spec.window_len) != window_shape:
            raise ParameterError(
                f"spec expects {spec.signal_channels}x{spec.window_len} windows, "
                f"dataset provides {window_shape[0]}x{window_shape[1]}")


def _score(fold_id: str, model: str, pred: np.ndarray, data: _FoldData,
           only: slice | None = None) -> FoldResult:
    truth = data.y_test[:, VB_MAX_INDEX]
    keep = data.test_slices if only is None else [s for s in data.test_slices if s[1] == only]
    curves = tuple(
        (tool_id, np.column_stack((data.l_f_test[sl], truth[sl], pred[sl])))
        for tool_id, sl in keep)
    sel = slice(None) if only is None else only
    return FoldResult(fold_id, model, rmse(pred[sel], truth[sel]),
                      r_squared(pred[sel], truth[sel]), curves)


def train_on_fixed(dataset: WearDataset, spec: ModelSpec, cfg: TrainConfig):
    """Fit one model on every fixed-parameter tool; (checkpoint, history)."""
    tools = list(dataset.fixed_tools)
    if not tools:
        raise DatasetError("dataset has no fixed-parameter tools to train on")
    td = assemble_training(tools)
    return train(spec, td.x_train, td.p_train, td.y_train,
                 td.x_val, td.p_val, td.y_val, cfg, channel_stats=td.stats)


def _train_and_predict(spec: ModelSpec, data: _FoldData,
                       cfg: TrainConfig) -> np.ndarray:
    td = data.training
    checkpoint, _ = train(spec, td.x_train, td.p_train, td.y_train,
                          td.x_val, td.p_val, td.y_val, cfg,
                          channel_stats=td.stats)
    return checkpoint.predict(data.x_test, data.p_test)[:, VB_MAX_INDEX]


def logo_cv(dataset: WearDataset, test_spec: ModelSpec,
            reference_spec: ModelSpec, cfg: TrainConfig) -> ComparisonReport:
    """Leave-one-set-out cross-validation over the fixed-parameter tools.

    One fold per parameter set: both tools of the held-out set form the
    test pool, every other fixed tool trains. All 8 sets must be present.
    """
    _check_specs(test_spec, reference_spec, dataset.window_shape)
    by_set: dict[int, list[ToolData]] = {}
    for t in dataset.fixed_tools:
        by_set.setdefault(t.fixed_set, []).append(t)
    missing = [s for s in sorted(PARAM_SETS) if s not in by_set]
    if missing:
        raise DatasetError(f"parameter sets missing from dataset: {missing}")

    folds: list[FoldResult] = []
    for set_id in sorted(by_set):
        train_tools = [t for t in dataset.fixed_tools if t.fixed_set != set_id]
        data = _assemble_fold(train_tools, by_set[set_id])
        for kind, spec in (("test", test_spec), ("reference", reference_spec)):
            pred = _train_and_predict(spec, data, cfg)
            folds.append(_score(f"set_{set_id}", kind, pred, data))
    return ComparisonReport("logo", tuple(folds), cfg.seed)


def variable_transfer(dataset: WearDataset, test_spec: ModelSpec,
                      reference_spec: ModelSpec, cfg: TrainConfig) -> ComparisonReport:
    """Train on all fixed tools once, score each variable-sequence tool.

    Every parameter set appearing in a test sequence must occur in
    training, so the transfer probes unseen sequences, not unseen
    parameters.
    """
    _check_specs(test_spec, reference_spec, dataset.window_shape)
    train_tools = list(dataset.fixed_tools)
    test_tools = list(dataset.variable_tools)
    if not train_tools:
        raise DatasetError("dataset has no fixed-parameter tools to train on")
    if not test_tools:
        raise DatasetError("dataset has no variable-sequence tools to test on")
    train_sets = {t.fixed_set for t in train_tools}
    for t in test_tools:
        unseen = sorted(set(t.set_ids) - train_sets)
        if unseen:
            raise DatasetError(
                f"tool {t.tool_id} uses parameter sets unseen in training: {unseen}")

    data = _assemble_fold(train_tools, test_tools)
    by_fold: dict[str, list[FoldResult]] = {}
    for kind, spec in (("test", test_spec), ("reference", reference_spec)):
        pred = _train_and_predict(spec, data, cfg)
        for tool_id, sl in data.test_slices:
            result = _score(f"tool_{tool_id}", kind, pred, data, only=sl)
            by_fold.setdefault(result.fold_id, []).append(result)
    ordered = tuple(r for fold_id in by_fold for r in by_fold[fold_id])
    return ComparisonReport("variable", ordered, cfg.seed)


# ---------------------------------------------------------------------------
# Persistence and rendering
# ---------------------------------------------------------------------------

def save_report(report: ComparisonReport, path: Path) -> Path:
    """Serialize a report to JSON with exact float round-trip."""
    doc = {
        "protocol": report.protocol,
        "seed": report.seed,
        "folds": [{
            "fold_id": f.fold_id,
            "model": f.model,
            "rmse_um": f.rmse_um,
            "r2": f.r2,
            "curves": [{"tool": tool, "rows": arr.tolist()}
                       for tool, arr in f.curves],
        } for f in report.folds],
    }
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def load_report(path: Path) -> ComparisonReport:
    """Read back a report written by save_report.

    Accepts either the JSON file itself or a directory containing
    report.json.
    """
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    try:
        doc = json.loads(p.read_text())
        folds = tuple(
            FoldResult(f["fold_id"], f["model"], f["rmse_um"], f["r2"],
                       tuple((c["tool"],
                              np.array(c["rows"], dtype=np.float64).reshape(-1, 3))
                             for c in f["curves"]))
            for f in doc["folds"])
        return ComparisonReport(doc["protocol"], folds, doc["seed"])
    except (KeyError, TypeError, ValueError) as err:
        raise ReportError(f"{p}: not a report file ({err})") from err


def _fmt(x: float) -> str:
    return format(x, ".12g")


def _pyplot():
    import matplotlib
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt
    return plt


# stripping the Software tag keeps PNG output byte-identical across renders
_SAVEFIG_KW = {"dpi": 120, "metadata": {"Software": None}}


def _write_folds_csv(report: ComparisonReport, path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "model", "cuts", "rmse_um", "r2"])
        for f in report.folds:
            writer.writerow([f.fold_id, f.model, f.n_cuts, _fmt(f.rmse_um), _fmt(f.r2)])
    return path


def _write_summary(report: ComparisonReport, path: Path) -> Path:
    pairs = report.fold_pairs()
    lines = [
        f"protocol: {report.protocol}",
        f"seed: {report.seed}",
        f"folds: {len(pairs)}",
        "",
        f"{'fold':<10}{'cuts':>6}{'test rmse':>12}{'ref rmse':>12}"
        f"{'test R2':>10}{'ref R2':>10}",
    ]
    for test, ref in pairs:
        lines.append(f"{test.fold_id:<10}{test.n_cuts:>6}{test.rmse_um:>12.3f}"
                     f"{ref.rmse_um:>12.3f}{test.r2:>10.4f}{ref.r2:>10.4f}")
    lines += [
        "",
        f"mean test RMSE:      {report.mean_rmse_um('test'):.3f} um",
        f"mean reference RMSE: {report.mean_rmse_um('reference'):.3f} um",
        f"RMSE improvement:    {report.rmse_improvement_pct:.1f} %",
        f"R2 increase:         {report.r2_increase_pct:.1f} %",
        f"test wins:           {report.wins} of {len(pairs)} folds",
    ]
    path.write_text("\n".join(lines) + "\n")
    return path


def _merged_tool_curves(report: ComparisonReport) -> list[tuple[int, np.ndarray]]:
    """Per tool: columns l_f_mm, measured_um, test_um, reference_um."""
    per_tool: dict[int, dict[str, np.ndarray]] = {}
    for fold in report.folds:
        for tool_id, arr in fold.curves:
            per_tool.setdefault(tool_id, {})[fold.model] = arr
    merged = []
    for tool_id in sorted(per_tool):
        pair = per_tool[tool_id]
        if set(pair) != set(MODEL_KINDS):
            raise ReportError(f"tool {tool_id} lacks curves for both models")
        t, r = pair["test"], pair["reference"]
        if t.shape != r.shape or not np.array_equal(t[:, :2], r[:, :2]):
            raise ReportError(f"tool {tool_id} curves disagree on l_f or measured wear")
        merged.append((tool_id, np.column_stack((t, r[:, 2]))))
    return merged


def _write_curve_csv(rows: np.ndarray, path: Path) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["l_f_mm", "measured_um", "test_um", "reference_um"])
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _plot_tool_curve(tool_id: int, rows: np.ndarray, path: Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(rows[:, 0], rows[:, 1], "k.-", label="measured")
    ax.plot(rows[:, 0], rows[:, 2], ".-", label="test")
    ax.plot(rows[:, 0], rows[:, 3], ".-", label="reference")
    ax.set_xlabel("feed travel l_f (mm)")
    ax.set_ylabel("VB_max (um)")
    ax.set_title(f"tool {tool_id}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)
    return path


def _plot_fold_rmse(report: ComparisonReport, path: Path) -> Path:
    plt = _pyplot()
    pairs = report.fold_pairs()
    x = np.arange(len(pairs))
    width = 0.38
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.bar(x - width / 2, [t.rmse_um for t, _ in pairs], width, label="test")
    ax.bar(x + width / 2, [r.rmse_um for _, r in pairs], width, label="reference")
    ax.set_xticks(x)
    ax.set_xticklabels([t.fold_id for t, _ in pairs], rotation=45, ha="right")
    ax.set_ylabel("VB_max RMSE (um)")
    ax.set_title(f"{report.protocol} evaluation")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)
    return path


def render_report(report: ComparisonReport, out_dir: Path) -> list[Path]:
    """Write summary.txt, folds.csv, per-tool curve CSVs and PNG figures.

    Rendering the same report twice produces byte-identical files.
    """
    if not report.folds:
        raise ReportError("cannot render a report with no folds")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [_write_folds_csv(report, out / "folds.csv"),
               _write_summary(report, out / "summary.txt")]
    for tool_id, rows in _merged_tool_curves(report):
        written.append(_write_curve_csv(rows, out / f"tool_{tool_id:02d}_curve.csv"))
        written.append(_plot_tool_curve(tool_id, rows, out / f"tool_{tool_id:02d}_curve.png"))
    written.append(_plot_fold_rmse(report, out / "rmse_by_fold.png"))
    return written
