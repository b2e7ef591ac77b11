"""Parameter-conditioned 1D CNN for wear estimation, and its unconditioned twin.

The network consumes a K x L normalized signal window. In the conditioned
variant the scaled cutting parameters are tiled to the current sequence length
and concatenated below the feature rows before every conv unit, so each stage
sees them at its own resolution. A unit is conv(k=3, same padding) -> ReLU ->
conv -> ReLU -> maxpool(3); after the last unit, global average pooling,
dropout, and one dense layer emit the 8 wear targets. The reference model is
the identical architecture with conditioning disabled.

Filter counts double per unit from base_filters = 2^N, capped. Training
minimizes the mean squared error over the 8 targets scaled to [0, 1] by their
training maxima, with early stopping on the validation RMSE of the global
VB_max in um.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .signalprep import ChannelId, ChannelStats
from .tensorcore import (Conv1dLayer, DenseLayer, DropoutLayer,
                         GlobalAvgPoolLayer, MaxPool1dLayer, NumericError,
                         OptimizerState, ParameterError, ReluLayer, ShapeError,
                         adam_step, mse_multi)
from .weartargets import VB_MAX_INDEX

CHECKPOINT_VERSION = 1
_MAGIC = b"WBCK"


class SpecError(ValueError):
    """Model specification is internally inconsistent."""


class CheckpointError(ValueError):
    """Checkpoint file is unreadable, truncated, or version-incompatible."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters; `conditioned` switches test vs reference."""

    signal_channels: int
    window_len: int
    param_dim: int = 2
    conditioned: bool = True
    units: int = 4
    convs_per_unit: int = 2
    base_filters: int = 16
    filter_cap: int = 256
    kernel: int = 3
    pool: int = 3
    dropout_rate: float = 0.2
    output_dim: int = 8

    def __post_init__(self):
        if self.signal_channels < 1:
            raise SpecError("need at least one signal channel")
        if self.units < 1 or self.convs_per_unit < 1:
            raise SpecError("units and convs_per_unit must be at least 1")
        bf = self.base_filters
        if bf < 1 or bf & (bf - 1):
            raise SpecError(f"base_filters must be a power of two, got {bf}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise SpecError(f"kernel must be odd for same padding, got {self.kernel}")
        if self.pool < 2:
            raise SpecError(f"pool must be at least 2, got {self.pool}")
        if self.window_len < self.pool ** self.units:
            raise SpecError(
                f"window length {self.window_len} underflows {self.units} "
                f"pool-{self.pool} stages (needs >= {self.pool ** self.units})")
        if self.conditioned and self.param_dim < 1:
            raise SpecError("conditioned model needs at least one cutting parameter")
        if self.output_dim < 1:
            raise SpecError("output_dim must be positive")

    @property
    def injected_params(self) -> int:
        return self.param_dim if self.conditioned else 0

    def filters_at(self, unit: int) -> int:
        return min(self.base_filters * 2 ** unit, self.filter_cap)

    def length_trace(self) -> list[int]:
        """Sequence lengths entering unit 1, 2, ... and leaving the last unit."""
        trace = [self.window_len]
        for _ in range(self.units):
            trace.append(trace[-1] // self.pool)
        return trace

    def weight_count(self) -> int:
        h = self.injected_params
        total = 0
        c_in = self.signal_channels
        for u in range(self.units):
            c_out = self.filters_at(u)
            total += c_out * (c_in + h) * self.kernel + c_out
            for _ in range(self.convs_per_unit - 1):
                total += c_out * c_out * self.kernel + c_out
            c_in = c_out
        total += self.output_dim * c_in + self.output_dim
        return total


@dataclass(frozen=True)
class ParamScaler:
    """Min-max scaling of cutting parameters to [0, 1], fit on training data."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ParameterError("scaler bounds must be 1-D and congruent")
        if not np.all(hi > lo):
            raise ParameterError(f"degenerate parameter range: lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def fit(cls, raw: np.ndarray) -> "ParamScaler":
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[0] < 1:
            raise ParameterError("scaler fit needs a nonempty (samples, params) array")
        return cls(raw.min(axis=0), raw.max(axis=0))

    def transform(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        return (raw - self.lo) / (self.hi - self.lo)


def tile_params(params_scaled: np.ndarray, length: int) -> np.ndarray:
    """H scaled values -> H x length tensor of constant rows."""
    params_scaled = np.asarray(params_scaled, dtype=np.float64)
    if params_scaled.ndim != 1:
        raise ShapeError(f"expected 1-D parameter vector, got shape {params_scaled.shape}")
    if length < 1:
        raise ParameterError(f"tile length must be positive, got {length}")
    return np.repeat(params_scaled[:, None], length, axis=1)


def inject_and_concat(signal: np.ndarray, params_scaled: np.ndarray) -> np.ndarray:
    """Append tiled parameter rows below a C x L signal block."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 2:
        raise ShapeError(f"expected C x L signal, got shape {signal.shape}")
    params_scaled = np.asarray(params_scaled, dtype=np.float64)
    if params_scaled.size == 0:
        return signal
    return np.concatenate([signal, tile_params(params_scaled, signal.shape[1])])


def _inject_batch(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    if p.shape[1] == 0:
        return x
    tiles = np.broadcast_to(p[:, :, None], (x.shape[0], p.shape[1], x.shape[2]))
    return np.concatenate([x, tiles], axis=1)


class ConditionedCNN:
    """The network, assembled from the hand-rolled layers.

    forward/backward run batch-first on (B, C, L) float64 arrays; parameter
    gradients accumulate in each layer and are collected by grads().
    """

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
        h = spec.injected_params
        self._named: list[tuple[str, Conv1dLayer | DenseLayer]] = []
        self._units = []
        c_in = spec.signal_channels
        for u in range(spec.units):
            c_out = spec.filters_at(u)
            stages = []
            for j in range(spec.convs_per_unit):
                conv = Conv1dLayer(c_in + h if j == 0 else c_out, c_out, spec.kernel, rng)
                self._named.append((f"u{u + 1}c{j + 1}", conv))
                stages.append((conv, ReluLayer()))
            self._units.append((stages, MaxPool1dLayer(spec.pool)))
            c_in = c_out
        self.gap = GlobalAvgPoolLayer()
        self.dropout = DropoutLayer(spec.dropout_rate)
        self.dense = DenseLayer(c_in, spec.output_dim, rng)
        self._named.append(("dense", self.dense))

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._named:
            out[f"{name}_w"] = layer.weights
            out[f"{name}_b"] = layer.bias
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._named:
            out[f"{name}_w"] = layer.grads["w"]
            out[f"{name}_b"] = layer.grads["b"]
        return out

    def set_weights(self, weights: dict[str, np.ndarray]) -> None:
        mine = self.params()
        if set(weights) != set(mine):
            raise CheckpointError("weight names do not match the model spec")
        for name, value in weights.items():
            if mine[name].shape != value.shape:
                raise CheckpointError(
                    f"{name}: stored shape {value.shape} != model shape {mine[name].shape}")
            mine[name][...] = value

    def forward(self, x: np.ndarray, p: np.ndarray, training: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64).reshape(x.shape[0], -1)
        if x.ndim != 3 or x.shape[1] != self.spec.signal_channels:
            raise ShapeError(f"expected (B, {self.spec.signal_channels}, L), got {x.shape}")
        if x.shape[2] != self.spec.window_len:
            raise ShapeError(
                f"window length {x.shape[2]} != spec length {self.spec.window_len}")
        h = self.spec.injected_params
        if h and p.shape[1] != h:
            raise ShapeError(f"expected {h} parameters per sample, got {p.shape[1]}")
        p_eff = p if h else p[:, :0]
        for stages, pool in self._units:
            x = _inject_batch(x, p_eff)
            for conv, act in stages:
                x = act.forward(conv.forward(x, training), training)
            x = pool.forward(x, training)
        x = self.gap.forward(x, training)
        x = self.dropout.forward(x, training)
        return self.dense.forward(x, training)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        d = self.dense.backward(upstream)
        d = self.dropout.backward(d)
        d = self.gap.backward(d)
        h = self.spec.injected_params
        for stages, pool in reversed(self._units):
            d = pool.backward(d)
            for conv, act in reversed(stages):
                d = conv.backward(act.backward(d))
            if h:
                d = d[:, :-h, :]
        return d


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    learning_rate: float = 1e-3
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 0:
            raise ParameterError("epochs/batch_size must be >= 1, patience >= 0")
        if self.learning_rate <= 0:
            raise ParameterError("learning rate must be positive")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_rmse_um: list[float] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_rmse_um(self) -> float:
        return self.val_rmse_um[self.best_epoch]


@dataclass(frozen=True)
class Checkpoint:
    """Everything needed to reproduce predictions bit-exactly."""

    spec: ModelSpec
    param_scaler: ParamScaler | None
    target_max_um: np.ndarray
    channel_stats: ChannelStats | None
    weights: dict[str, np.ndarray]
    seed: int
    version: int = CHECKPOINT_VERSION

    def predict(self, x: np.ndarray, params_raw: np.ndarray,
                batch_size: int = 64) -> np.ndarray:
        """Predictions in um for normalized windows and raw parameters."""
        x = np.asarray(x, dtype=np.float64)
        net = ConditionedCNN(self.spec, self.seed)
        net.set_weights(self.weights)
        p = self._scaled_params(params_raw, x.shape[0])
        outs = []
        for i in range(0, x.shape[0], batch_size):
            outs.append(net.forward(x[i:i + batch_size], p[i:i + batch_size]))
        return np.concatenate(outs) * self.target_max_um

    def _scaled_params(self, params_raw: np.ndarray, n: int) -> np.ndarray:
        if not self.spec.conditioned:
            return np.zeros((n, 0))
        return self.param_scaler.transform(np.asarray(params_raw, dtype=np.float64))

    def save(self, path: Path) -> None:
        header = {
            "version": self.version,
            "spec": asdict(self.spec),
            "param_scaler": None if self.param_scaler is None else
                {"lo": self.param_scaler.lo.tolist(), "hi": self.param_scaler.hi.tolist()},
            "target_max_um": self.target_max_um.tolist(),
            "channel_stats": _stats_to_dict(self.channel_stats),
            "seed": self.seed,
            "weights": [{"name": k, "shape": list(v.shape)}
                        for k, v in self.weights.items()],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for k in self.weights:
                fh.write(self.weights[k].astype("<f8", copy=False).tobytes(order="C"))

    @classmethod
    def load(cls, path: Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:4] != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if len(raw) < 12:
            raise CheckpointError(f"{path}: truncated header")
        (hlen,) = struct.unpack("<Q", raw[4:12])
        try:
            header = json.loads(raw[12:12 + hlen])
        except ValueError as err:
            raise CheckpointError(f"{path}: corrupt header") from err
        if header["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: version {header['version']} unsupported "
                f"(expected {CHECKPOINT_VERSION})")
        flat = np.frombuffer(raw[12 + hlen:], dtype="<f8")
        shapes = [(w["name"], tuple(w["shape"])) for w in header["weights"]]
        expected = sum(int(np.prod(s)) for _, s in shapes)
        if flat.size != expected:
            raise CheckpointError(
                f"{path}: weight block holds {flat.size} values, header implies {expected}")
        weights = {}
        pos = 0
        for name, shape in shapes:
            n = int(np.prod(shape))
            weights[name] = flat[pos:pos + n].astype(np.float64).reshape(shape)
            pos += n
        sc = header["param_scaler"]
        return cls(
            spec=ModelSpec(**header["spec"]),
            param_scaler=None if sc is None else ParamScaler(np.array(sc["lo"]),
                                                             np.array(sc["hi"])),
            target_max_um=np.array(header["target_max_um"]),
            channel_stats=_stats_from_dict(header["channel_stats"]),
            weights=weights,
            seed=header["seed"],
            version=header["version"],
        )


def _stats_to_dict(stats: ChannelStats | None) -> dict | None:
    if stats is None:
        return None
    return {"channels": [c.value for c in stats.channels],
            "mean": stats.mean.tolist(), "std": stats.std.tolist()}


def _stats_from_dict(d: dict | None) -> ChannelStats | None:
    if d is None:
        return None
    std = np.array(d["std"])
    return ChannelStats(tuple(ChannelId(v) for v in d["channels"]),
                        np.array(d["mean"]), std, std == 0.0)


def _vb_max_rmse_um(pred_um: np.ndarray, truth_um: np.ndarray) -> float:
    diff = pred_um[:, VB_MAX_INDEX] - truth_um[:, VB_MAX_INDEX]
    return float(np.sqrt(np.mean(diff * diff)))


def train(spec: ModelSpec, x_train, p_train, y_train, x_val, p_val, y_val,
          cfg: TrainConfig, channel_stats: ChannelStats | None = None
          ) -> tuple[Checkpoint, TrainHistory]:
    """Fit one model; early-stops on validation VB_max RMSE, returns the best.

    Targets are scaled to [0, 1] by their per-target training maxima; cutting
    parameters are min-max scaled over the training split. Both models of a
    comparison should be trained with the same cfg and seed.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    x_val = np.asarray(x_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise ParameterError("training and validation splits must be nonempty")
    if y_train.shape[1] != spec.output_dim:
        raise ShapeError(f"targets have {y_train.shape[1]} columns, "
                         f"spec emits {spec.output_dim}")

    rng = np.random.default_rng(cfg.seed)
    net = ConditionedCNN(spec, cfg.seed)
    net.dropout.rng = rng

    scaler = ParamScaler.fit(p_train) if spec.conditioned else None
    p_tr = scaler.transform(p_train) if scaler else np.zeros((x_train.shape[0], 0))
    p_va = scaler.transform(p_val) if scaler else np.zeros((x_val.shape[0], 0))
    target_max = y_train.max(axis=0)
    target_max = np.where(target_max > 0, target_max, 1.0)
    y_tr = y_train / target_max

    opt = OptimizerState(learning_rate=cfg.learning_rate)
    history = TrainHistory()
    best_rmse = np.inf
    best_weights = {k: v.copy() for k, v in net.params().items()}
    stale = 0
    n = x_train.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pred = net.forward(x_train[idx], p_tr[idx], training=True)
            loss, grad = mse_multi(pred, y_tr[idx])
            if not np.isfinite(loss):
                raise NumericError(
                    f"training diverged: non-finite loss at epoch {epoch + 1}, "
                    f"batch starting {start}")
            net.backward(grad)
            try:
                adam_step(net.params(), net.grads(), opt)
            except NumericError as err:
                raise NumericError(f"epoch {epoch + 1}: {err}") from err
            epoch_loss += loss * idx.size
        history.train_loss.append(epoch_loss / n)

        val_pred = _forward_batched(net, x_val, p_va) * target_max
        val_rmse = _vb_max_rmse_um(val_pred, y_val)
        history.val_rmse_um.append(val_rmse)
        if val_rmse < best_rmse:
            best_rmse = val_rmse
            best_weights = {k: v.copy() for k, v in net.params().items()}
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience > 0:
                break

    checkpoint = Checkpoint(spec, scaler, target_max, channel_stats,
                            best_weights, cfg.seed)
    return checkpoint, history


def _forward_batched(net: ConditionedCNN, x, p, batch_size: int = 64) -> np.ndarray:
    outs = [net.forward(x[i:i + batch_size], p[i:i + batch_size])
            for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(outs)


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridEntry:
    spec: ModelSpec
    val_rmse_um: float
    weight_count: int
    best_epoch: int


@dataclass(frozen=True)
class GridSearchResult:
    best: Checkpoint
    best_entry: GridEntry
    entries: tuple[GridEntry, ...]


def grid_search(template: ModelSpec, x_train, p_train, y_train, x_val, p_val,
                y_val, cfg: TrainConfig, units_grid=(2, 3, 4, 5),
                filters_exp_grid=(3, 4, 5)) -> GridSearchResult:
    """Train every (units, 2^N) cell with a shared seed; lowest validation
    VB_max RMSE wins, ties broken by fewer weights, then by grid order."""
    if not units_grid or not filters_exp_grid:
        raise ParameterError("grid must be nonempty")
    entries = []
    checkpoints = []
    for units in units_grid:
        for n_exp in filters_exp_grid:
            spec = replace(template, units=units, base_filters=2 ** n_exp)
            ckpt, history = train(spec, x_train, p_train, y_train,
                                  x_val, p_val, y_val, cfg)
            entries.append(GridEntry(spec, history.best_val_rmse_um,
                                     spec.weight_count(), history.best_epoch))
            checkpoints.append(ckpt)
    order = min(range(len(entries)),
                key=lambda i: (entries[i].val_rmse_um, entries[i].weight_count, i))
    return GridSearchResult(checkpoints[order], entries[order], tuple(entries))
