"""Raw per-cut recordings to fixed-size K x L signal windows.

A cut is recorded on two clocks: dynamometer channels at a high external rate
(10 kHz in production) and machine-internal drive signals at 100 Hz, plus the
feed-axis position trace. Preparation segments the milling phase from the
position trace, keeps the last two seconds, derives the planar resultant
channels, aligns the internal channels to the external sample count by linear
interpolation, and z-scores every channel with statistics fitted on the
training split only.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorcore import ParameterError, ShapeError

WINDOW_SECONDS = 2.0
# cut-in/cut-out margin: one tool diameter of feed travel on either end
CUT_MARGIN_MM = 6.0


class WindowError(ValueError):
    """Milling phase missing or too short for the requested window."""


class AssemblyError(ValueError):
    """A channel required for window assembly is absent."""


class ChannelId(str, enum.Enum):
    """The 15 signal channels, in fixed assembly order.

    External (dynamometer) channels come first: torque at the tool, rotating
    dynamometer force components and their resultant, then the stationary
    dynamometer components and resultant. Machine-internal channels follow:
    spindle torque and current, feed-drive torques and currents with their
    planar resultants.
    """

    M_T = "M_T"
    F_RCDX = "F_RCDx"
    F_RCDY = "F_RCDy"
    F_RCDXY = "F_RCDxy"
    F_SDX = "F_SDx"
    F_SDY = "F_SDy"
    F_SDXY = "F_SDxy"
    M_S = "M_S"
    I_S = "I_S"
    M_X = "M_x"
    M_Y = "M_y"
    M_XY = "M_xy"
    I_X = "I_x"
    I_Y = "I_y"
    I_XY = "I_xy"

    @property
    def is_external(self) -> bool:
        return self in _EXTERNAL_SET

    @property
    def is_derived(self) -> bool:
        return self in DERIVED_SOURCES


EXTERNAL_CHANNELS = (
    ChannelId.M_T,
    ChannelId.F_RCDX, ChannelId.F_RCDY, ChannelId.F_RCDXY,
    ChannelId.F_SDX, ChannelId.F_SDY, ChannelId.F_SDXY,
)
INTERNAL_CHANNELS = (
    ChannelId.M_S, ChannelId.I_S,
    ChannelId.M_X, ChannelId.M_Y, ChannelId.M_XY,
    ChannelId.I_X, ChannelId.I_Y, ChannelId.I_XY,
)
CHANNEL_ORDER = EXTERNAL_CHANNELS + INTERNAL_CHANNELS
_EXTERNAL_SET = frozenset(EXTERNAL_CHANNELS)

# resultant channel -> the orthogonal component pair it is computed from
DERIVED_SOURCES = {
    ChannelId.F_RCDXY: (ChannelId.F_RCDX, ChannelId.F_RCDY),
    ChannelId.F_SDXY: (ChannelId.F_SDX, ChannelId.F_SDY),
    ChannelId.M_XY: (ChannelId.M_X, ChannelId.M_Y),
    ChannelId.I_XY: (ChannelId.I_X, ChannelId.I_Y),
}

RECORDED_EXTERNAL = tuple(c for c in EXTERNAL_CHANNELS if not c.is_derived)
RECORDED_INTERNAL = tuple(c for c in INTERNAL_CHANNELS if not c.is_derived)


def channels_for_mode(mode: str) -> tuple[ChannelId, ...]:
    """Channel rows selected by a sensor mode: external, internal or all."""
    try:
        return {
            "external": EXTERNAL_CHANNELS,
            "internal": INTERNAL_CHANNELS,
            "all": CHANNEL_ORDER,
        }[mode]
    except KeyError:
        raise ParameterError(f"unknown channel mode {mode!r}") from None


@dataclass
class RawCut:
    """One recorded cut: channel samples on two clocks plus feed position.

    `external` holds recorded dynamometer channels at `external_rate_hz`,
    `internal` holds recorded machine channels at `internal_rate_hz`, and
    `position_mm` is the feed-axis position sampled on the internal clock.
    Resultant channels are not stored; they are derived during assembly.
    """

    cut_id: str
    external: dict[ChannelId, np.ndarray]
    internal: dict[ChannelId, np.ndarray]
    position_mm: np.ndarray
    external_rate_hz: float
    internal_rate_hz: float

    def __post_init__(self):
        if self.external_rate_hz <= 0 or self.internal_rate_hz <= 0:
            raise ParameterError("sample rates must be positive")
        self.position_mm = np.asarray(self.position_mm, dtype=np.float64)
        for pool in (self.external, self.internal):
            for cid, sig in pool.items():
                pool[cid] = np.asarray(sig, dtype=np.float64)
        n_ext = {s.size for s in self.external.values()}
        if len(n_ext) > 1:
            raise ShapeError(f"cut {self.cut_id}: external channel lengths differ: {sorted(n_ext)}")
        n_int = {s.size for s in self.internal.values()} | {self.position_mm.size}
        if len(n_int) > 1:
            raise ShapeError(f"cut {self.cut_id}: internal channel lengths differ: {sorted(n_int)}")

    @property
    def duration_s(self) -> float:
        return self.position_mm.size / self.internal_rate_hz

    def save(self, path: Path) -> None:
        """Write one raw little-endian float64 block plus a JSON sidecar."""
        path = Path(path)
        n_ext = next(iter(self.external.values())).size if self.external else 0
        blocks = [self.external[c] for c in RECORDED_EXTERNAL if c in self.external]
        blocks += [self.internal[c] for c in RECORDED_INTERNAL if c in self.internal]
        blocks.append(self.position_mm)
        path.write_bytes(np.concatenate(blocks).astype("<f8").tobytes())
        sidecar = {
            "cut_id": self.cut_id,
            "external_rate_hz": self.external_rate_hz,
            "internal_rate_hz": self.internal_rate_hz,
            "external_channels": [c.value for c in RECORDED_EXTERNAL if c in self.external],
            "internal_channels": [c.value for c in RECORDED_INTERNAL if c in self.internal],
            "external_len": n_ext,
            "internal_len": int(self.position_mm.size),
            "dtype": "<f8",
        }
        _sidecar_path(path).write_text(json.dumps(sidecar, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path) -> "RawCut":
        path = Path(path)
        meta = json.loads(_sidecar_path(path).read_text())
        flat = np.frombuffer(path.read_bytes(), dtype="<f8").astype(np.float64)
        n_ext, n_int = meta["external_len"], meta["internal_len"]
        ext_ids = [ChannelId(v) for v in meta["external_channels"]]
        int_ids = [ChannelId(v) for v in meta["internal_channels"]]
        expected = n_ext * len(ext_ids) + n_int * (len(int_ids) + 1)
        if flat.size != expected:
            raise ShapeError(f"{path}: block holds {flat.size} values, sidecar implies {expected}")
        pos = 0
        external = {}
        for cid in ext_ids:
            external[cid] = flat[pos:pos + n_ext].copy()
            pos += n_ext
        internal = {}
        for cid in int_ids:
            internal[cid] = flat[pos:pos + n_int].copy()
            pos += n_int
        return cls(meta["cut_id"], external, internal, flat[pos:pos + n_int].copy(),
                   meta["external_rate_hz"], meta["internal_rate_hz"])


def _sidecar_path(path: Path) -> Path:
    return path.parent / (path.name + ".json")


def extract_window(cut: RawCut, window_s: float = WINDOW_SECONDS,
                   margin_mm: float = CUT_MARGIN_MM) -> RawCut:
    """Trim a cut to the last `window_s` seconds of its milling phase.

    The milling phase is the contiguous span where the feed position has
    advanced at least `margin_mm` beyond travel start and has at least
    `margin_mm` of travel left, i.e. approach and exit are dropped. All
    channels and the position trace are trimmed on their native clocks.
    """
    pos = cut.position_mm
    if pos.size < 2:
        raise WindowError(f"cut {cut.cut_id}: position trace too short")
    p_lo, p_hi = float(pos.min()), float(pos.max())
    inside = np.flatnonzero((pos >= p_lo + margin_mm) & (pos <= p_hi - margin_mm))
    if inside.size == 0:
        raise WindowError(f"cut {cut.cut_id}: no milling phase inside {margin_mm} mm margins")
    first, last = int(inside[0]), int(inside[-1])
    phase_s = (last - first + 1) / cut.internal_rate_hz
    if phase_s < window_s - 1e-9:
        raise WindowError(
            f"cut {cut.cut_id}: milling phase {phase_s:.3f} s shorter than window {window_s:.3f} s")

    n_int = int(round(window_s * cut.internal_rate_hz))
    n_ext = int(round(window_s * cut.external_rate_hz))
    end_int = last + 1
    t_end = end_int / cut.internal_rate_hz
    end_ext = min(int(round(t_end * cut.external_rate_hz)),
                  next(iter(cut.external.values())).size if cut.external else 0)
    if cut.external and end_ext - n_ext < 0:
        raise WindowError(f"cut {cut.cut_id}: external recording shorter than window")

    external = {c: s[end_ext - n_ext:end_ext] for c, s in cut.external.items()}
    internal = {c: s[end_int - n_int:end_int] for c, s in cut.internal.items()}
    return RawCut(cut.cut_id, external, internal, pos[end_int - n_int:end_int],
                  cut.external_rate_hz, cut.internal_rate_hz)


def resample_linear(signal: np.ndarray, target_len: int) -> np.ndarray:
    """Piecewise-linear resampling onto `target_len` equally spaced points
    spanning the first and last sample instants inclusive."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1 or signal.size < 2:
        raise ParameterError("resampling needs a 1-D signal of at least 2 samples")
    if target_len < 2:
        raise ParameterError(f"target length must be at least 2, got {target_len}")
    xp = np.linspace(0.0, 1.0, signal.size)
    xq = np.linspace(0.0, 1.0, target_len)
    return np.interp(xq, xp, signal)


def resultant(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Elementwise planar magnitude sqrt(x^2 + y^2)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"component shapes differ: {x.shape} vs {y.shape}")
    return np.hypot(x, y)


@dataclass(frozen=True)
class SignalWindow:
    """Fixed-size K x L float64 window with its channel labels."""

    values: np.ndarray
    channels: tuple[ChannelId, ...]
    sample_rate_hz: float
    cut_id: str

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"window must be 2-D, got shape {v.shape}")
        if v.shape[0] != len(self.channels):
            raise ShapeError(
                f"window has {v.shape[0]} rows but {len(self.channels)} channel labels")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def save(self, path: Path) -> None:
        """Raw little-endian float64 block in row-major order plus sidecar."""
        path = Path(path)
        path.write_bytes(self.values.astype("<f8", copy=False).tobytes(order="C"))
        sidecar = {
            "cut_id": self.cut_id,
            "sample_rate_hz": self.sample_rate_hz,
            "shape": list(self.values.shape),
            "channels": [c.value for c in self.channels],
            "dtype": "<f8",
        }
        _sidecar_path(path).write_text(json.dumps(sidecar, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Path) -> "SignalWindow":
        path = Path(path)
        meta = json.loads(_sidecar_path(path).read_text())
        shape = tuple(meta["shape"])
        flat = np.frombuffer(path.read_bytes(), dtype="<f8")
        if flat.size != shape[0] * shape[1]:
            raise ShapeError(f"{path}: block holds {flat.size} values, sidecar says {shape}")
        values = flat.astype(np.float64).reshape(shape)
        return cls(values, tuple(ChannelId(v) for v in meta["channels"]),
                   meta["sample_rate_hz"], meta["cut_id"])


def _channel_samples(cut: RawCut, cid: ChannelId) -> np.ndarray:
    pool = cut.external if cid.is_external else cut.internal
    if cid.is_derived:
        sx, sy = DERIVED_SOURCES[cid]
        if sx not in pool or sy not in pool:
            raise AssemblyError(f"cut {cut.cut_id}: missing components for {cid.value}")
        return resultant(pool[sx], pool[sy])
    if cid not in pool:
        raise AssemblyError(f"cut {cut.cut_id}: missing channel {cid.value}")
    return pool[cid]


def assemble_window(cut: RawCut, mode: str = "all") -> SignalWindow:
    """Stack the selected channels of a trimmed cut into a K x L window.

    Resultants are derived from their orthogonal components at the native
    rate, then every internal channel is linearly resampled to the external
    sample count L. Row order follows CHANNEL_ORDER restricted to the mode.
    """
    if not cut.external:
        raise AssemblyError(f"cut {cut.cut_id}: no external channels to define the window length")
    length = next(iter(cut.external.values())).size
    rows = []
    for cid in channels_for_mode(mode):
        samples = _channel_samples(cut, cid)
        if not cid.is_external:
            samples = resample_linear(samples, length)
        rows.append(samples)
    return SignalWindow(np.stack(rows), channels_for_mode(mode),
                        cut.external_rate_hz, cut.cut_id)


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel normalization moments fitted on the training split."""

    channels: tuple[ChannelId, ...]
    mean: np.ndarray
    std: np.ndarray
    is_constant: np.ndarray

    def __post_init__(self):
        if not np.all((self.std > 0) | self.is_constant):
            raise ParameterError("non-constant channel with non-positive std")


def fit_stats(train_windows: list[SignalWindow]) -> ChannelStats:
    """Per-channel mean and population std over all training samples."""
    if not train_windows:
        raise ParameterError("cannot fit normalization on an empty training split")
    channels = train_windows[0].channels
    for w in train_windows:
        if w.channels != channels:
            raise ParameterError("training windows have inconsistent channel sets")
    data = np.concatenate([w.values for w in train_windows], axis=1)
    mean = data.mean(axis=1)
    std = data.std(axis=1)
    return ChannelStats(channels, mean, std, std == 0.0)


def apply_stats(window: SignalWindow, stats: ChannelStats) -> SignalWindow:
    """Z-score each channel; channels constant in training map to zero."""
    if window.channels != stats.channels:
        raise ParameterError("window channels do not match fitted statistics")
    safe_std = np.where(stats.is_constant, 1.0, stats.std)
    values = (window.values - stats.mean[:, None]) / safe_std[:, None]
    values[stats.is_constant, :] = 0.0
    return SignalWindow(values, window.channels, window.sample_rate_hz, window.cut_id)
