"""Synthetic 20-tool milling campaign generator.

Produces wear progressions and wear-coupled multichannel cut recordings for a
shoulder-milling campaign: 16 tools at 8 fixed cutting-parameter sets (2 tools
per set) plus 4 tools cycled through varying set sequences. The generative
model is intentionally simple; every coefficient lives in SynthConfig so the
generated data acts as its own ground truth for the evaluation harness.

Wear model per cut of feed travel dl_f:

    dVB = a * (v_c/30)^p * (f_z/0.03)^q * (1 + VB/VB_ref) * (dl_f/50) * (1+eta)

applied per edge through a tip-peaked profile shape. eta is multiplicative
per-cut noise whose spread is boosted at high cutting speed, mimicking the
destabilized wear development observed there. Signals are DC plus a
tooth-passing harmonic, both scaled by feed and by current mean wear, with
speed-scaled additive noise; machine-internal channels are slow 100 Hz
analogs of the dynamometer channels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .signalprep import RawCut, ChannelId
from .tensorcore import ParameterError
from .weartargets import REQUIRED_SPAN_UM, WearCurve, write_edge_curves

V_C_REF = 30.0   # m/min
F_Z_REF = 0.03   # mm per tooth


class ConfigError(ValueError):
    """Generator configuration cannot honor its own constraints."""


@dataclass(frozen=True)
class CuttingParams:
    """Cutting speed v_c (m/min) and feed per tooth f_z (mm)."""

    v_c: float
    f_z: float

    def __post_init__(self):
        if self.v_c <= 0 or self.f_z <= 0:
            raise ParameterError(f"cutting parameters must be positive: {self}")


# parameter sets 1..8 and the two tools assigned to each
PARAM_SETS = {
    1: CuttingParams(30.0, 0.03),
    2: CuttingParams(40.0, 0.04),
    3: CuttingParams(20.0, 0.03),
    4: CuttingParams(20.0, 0.04),
    5: CuttingParams(30.0, 0.02),
    6: CuttingParams(30.0, 0.04),
    7: CuttingParams(40.0, 0.02),
    8: CuttingParams(40.0, 0.03),
}
FIXED_TOOL_SETS = {
    1: 1, 2: 1, 3: 2, 4: 2, 5: 3, 6: 3, 7: 4, 8: 4,
    9: 5, 10: 5, 11: 6, 12: 6, 13: 7, 14: 7, 15: 8, 16: 8,
}
VARIABLE_TOOL_SEQUENCES = {
    17: (6, 3, 5, 8, 1, 7, 6, 3, 8, 7, 2),
    18: (1, 4, 8, 3, 3, 3, 7, 1, 8),
    19: (8, 4, 3, 8, 6, 1, 1, 5, 8, 7, 6, 4, 1, 5),
    20: (3, 8, 6, 5, 4, 6, 1, 8, 8, 4, 6, 2),
}


@dataclass(frozen=True)
class CampaignPlan:
    """Which tool cuts with which parameters, plus the shared geometry."""

    param_sets: dict[int, CuttingParams]
    fixed_tools: dict[int, int]                    # tool id -> set id
    variable_tools: dict[int, tuple[int, ...]]     # tool id -> set sequence
    feed_travel_mm: float = 50.0
    depth_mm: float = 1.5
    width_mm: float = 1.5
    tool_diameter_mm: float = 6.0
    edge_count: int = 4
    max_cuts: int = 30
    wear_stop_um: float = 120.0

    @property
    def tool_ids(self) -> list[int]:
        return sorted(self.fixed_tools) + sorted(self.variable_tools)

    def tool_params(self, tool_id: int) -> CuttingParams | None:
        """Fixed parameters of a tool, or None for variable tools."""
        set_id = self.fixed_tools.get(tool_id)
        return None if set_id is None else self.param_sets[set_id]


def default_plan() -> CampaignPlan:
    return CampaignPlan(dict(PARAM_SETS), dict(FIXED_TOOL_SETS),
                        dict(VARIABLE_TOOL_SEQUENCES))


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def spindle_speed_rpm(params: CuttingParams, diameter_mm: float = 6.0) -> float:
    return 1000.0 * params.v_c / (np.pi * diameter_mm)


def feed_rate_mm_min(params: CuttingParams, edges: int = 4,
                     diameter_mm: float = 6.0) -> float:
    return spindle_speed_rpm(params, diameter_mm) * edges * params.f_z


def cut_duration_s(params: CuttingParams, travel_mm: float = 50.0,
                   edges: int = 4, diameter_mm: float = 6.0) -> float:
    return travel_mm / feed_rate_mm_min(params, edges, diameter_mm) * 60.0


def tooth_passing_hz(params: CuttingParams, edges: int = 4,
                     diameter_mm: float = 6.0) -> float:
    return spindle_speed_rpm(params, diameter_mm) * edges / 60.0


# ---------------------------------------------------------------------------
# Wear progression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """All generator coefficients; defaults define the canonical campaign."""

    wear_rate_um: float = 0.9          # dVB for a fresh edge at (30, 0.03) per 50 mm
    speed_exponent: float = 3.5        # p
    feed_exponent: float = 1.0         # q
    self_accel_vb_um: float = 60.0     # VB_ref of the (1 + VB/VB_ref) term
    wear_noise_std: float = 0.05       # eta spread below the destabilization onset
    destab_gain: float = 3.0           # eta spread multiplier at/above the onset
    destab_onset_vc: float = 40.0      # m/min
    edge_spread: float = 0.08          # per-edge wear factor half-range
    profile_decay_um: float = 380.0    # e-folding of the tip-peaked wear shape
    profile_floor: float = 0.3         # shape value far from the tip
    force_wear_gain: float = 0.5       # c_w: amplitude gain per 100 um VB_mean
    noise_floor: float = 0.02          # signal noise std relative to channel scale
    noise_speed_gain: float = 0.9      # noise growth with v_c/30
    external_rate_hz: float = 10_000.0
    internal_rate_hz: float = 100.0
    master_seed: int = 42

    def __post_init__(self):
        for name in ("wear_rate_um", "wear_noise_std", "destab_gain", "edge_spread",
                     "force_wear_gain", "noise_floor", "noise_speed_gain"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.self_accel_vb_um <= 0 or self.profile_decay_um <= 0:
            raise ConfigError("wear reference scales must be positive")
        if not 0.0 < self.profile_floor <= 1.0:
            raise ConfigError("profile_floor must lie in (0, 1]")
        if self.external_rate_hz <= 0 or self.internal_rate_hz <= 0:
            raise ConfigError("sample rates must be positive")

    def deterministic(self) -> "SynthConfig":
        """Noise-free copy: same means, zero spread everywhere."""
        return replace(self, wear_noise_std=0.0, edge_spread=0.0, noise_floor=0.0)


@dataclass(frozen=True)
class WearState:
    """Per-edge wear profiles over the measured span, plus feed-travel odometer."""

    distance_um: np.ndarray     # (G,) shared grid, covers [0, 1350]
    vb_um: np.ndarray           # (edges, G)
    edge_factor: np.ndarray     # (edges,) fixed per-tool wear multipliers
    l_f_mm: float
    cut_index: int

    @classmethod
    def fresh(cls, cfg: SynthConfig, rng: np.random.Generator,
              edges: int = 4, grid_spacing_um: float = 10.0) -> "WearState":
        grid = np.arange(0.0, REQUIRED_SPAN_UM + grid_spacing_um / 2, grid_spacing_um)
        factors = np.clip(1.0 + rng.uniform(-cfg.edge_spread, cfg.edge_spread, edges), 0.05, None)
        return cls(grid, np.zeros((edges, grid.size)), factors, 0.0, 0)

    @property
    def vb_max_um(self) -> float:
        return float(self.vb_um.max())

    @property
    def vb_mean_um(self) -> float:
        return float(self.vb_um.mean())

    def curves(self) -> list[WearCurve]:
        return [WearCurve(self.distance_um, self.vb_um[e])
                for e in range(self.vb_um.shape[0])]


def wear_increment_um(params: CuttingParams, vb_um: float, cfg: SynthConfig,
                      dl_f_mm: float = 50.0) -> float:
    """Deterministic tip increment for one cut at the given wear level."""
    speed = (params.v_c / V_C_REF) ** cfg.speed_exponent
    feed = (params.f_z / F_Z_REF) ** cfg.feed_exponent
    accel = 1.0 + vb_um / cfg.self_accel_vb_um
    return cfg.wear_rate_um * speed * feed * accel * (dl_f_mm / 50.0)


def step_wear(state: WearState, params: CuttingParams, cfg: SynthConfig,
              rng: np.random.Generator, dl_f_mm: float = 50.0) -> WearState:
    """Advance wear by one cut; nondecreasing per edge by construction."""
    if dl_f_mm <= 0:
        raise ParameterError(f"feed travel increment must be positive, got {dl_f_mm}")
    std = cfg.wear_noise_std
    if params.v_c >= cfg.destab_onset_vc:
        std *= cfg.destab_gain
    eta = rng.normal(0.0, std) if std > 0 else 0.0
    shape = cfg.profile_floor + (1.0 - cfg.profile_floor) * np.exp(
        -state.distance_um / cfg.profile_decay_um)
    tips = state.vb_um.max(axis=1)
    base = np.array([wear_increment_um(params, t, cfg, dl_f_mm) for t in tips])
    per_edge = np.clip(base * state.edge_factor * (1.0 + eta), 0.0, None)
    vb = state.vb_um + per_edge[:, None] * shape[None, :]
    return WearState(state.distance_um, vb, state.edge_factor,
                     state.l_f_mm + dl_f_mm, state.cut_index + 1)


# ---------------------------------------------------------------------------
# Signal synthesis
# ---------------------------------------------------------------------------

# nominal channel scales (torques Nm, forces N, currents A)
_DC_M_T, _DC_F_RCD, _DC_F_SDX, _DC_F_SDY = 2.4, 180.0, 120.0, 85.0
_DC_M_S, _DC_I_S = 2.2, 7.5
_DC_M_X, _DC_M_Y, _DC_I_X, _DC_I_Y = 1.1, 0.8, 3.2, 2.6
# slow drive-side modulation so internal channels are never flat
_SLOW_HZ = 0.8
_SLOW_AMP = 0.02
_SLOW_PHASES = {ChannelId.M_S: 0.0, ChannelId.I_S: 1.1, ChannelId.M_X: 2.2,
                ChannelId.M_Y: 3.3, ChannelId.I_X: 4.4, ChannelId.I_Y: 5.5}


def synthesize_cut_signals(params: CuttingParams, state: WearState,
                           cfg: SynthConfig, rng: np.random.Generator,
                           cut_id: str, duration_s: float | None = None,
                           travel_mm: float = 50.0,
                           margin_mm: float = 6.0) -> RawCut:
    """One cut's recorded channels, coupled to the pre-cut wear level.

    Dynamometer channels carry a tooth-passing harmonic; the rotating pair is
    in quadrature so its resultant is the envelope itself. Machine-internal
    channels are DC analogs with a slow modulation. Everything scales with
    feed and with (1 + c_w * VB_mean/100); noise std grows with speed.
    """
    if duration_s is None:
        duration_s = cut_duration_s(params, travel_mm)
    if duration_s < 2.0:
        raise ConfigError(
            f"cut {cut_id}: duration {duration_s:.2f} s cannot honor the 2 s window")

    f_tooth = tooth_passing_hz(params)
    wear_fac = 1.0 + cfg.force_wear_gain * state.vb_mean_um / 100.0
    feed_fac = params.f_z / F_Z_REF
    speed_fac = params.v_c / V_C_REF
    noise_std = cfg.noise_floor * max(1.0 + cfg.noise_speed_gain * (speed_fac - 1.0), 0.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)

    n_ext = int(round(duration_s * cfg.external_rate_hz))
    t_ext = np.arange(n_ext) / cfg.external_rate_hz
    pos_ext = travel_mm * t_ext / duration_s
    env_ext = np.clip(np.minimum(pos_ext, travel_mm - pos_ext) / margin_mm, 0.0, 1.0)
    theta = 2.0 * np.pi * f_tooth * t_ext + phase

    def noisy(nominal, shaped, n):
        return shaped + rng.normal(0.0, noise_std * nominal, n)

    a_rcd = _DC_F_RCD * feed_fac * wear_fac
    external = {
        ChannelId.M_T: noisy(_DC_M_T, _DC_M_T * feed_fac * wear_fac * env_ext
                             * (1.0 + 0.35 * np.cos(theta)), n_ext),
        ChannelId.F_RCDX: noisy(_DC_F_RCD, a_rcd * env_ext * np.cos(theta), n_ext),
        ChannelId.F_RCDY: noisy(_DC_F_RCD, a_rcd * env_ext * np.sin(theta), n_ext),
        ChannelId.F_SDX: noisy(_DC_F_SDX, _DC_F_SDX * feed_fac * wear_fac * env_ext
                               * (1.0 + 0.3 * np.cos(theta)), n_ext),
        ChannelId.F_SDY: noisy(_DC_F_SDY, _DC_F_SDY * feed_fac * wear_fac * env_ext
                               * (1.0 + 0.3 * np.sin(theta)), n_ext),
    }

    n_int = int(round(duration_s * cfg.internal_rate_hz))
    t_int = np.arange(n_int) / cfg.internal_rate_hz
    pos_int = travel_mm * t_int / duration_s
    env_int = np.clip(np.minimum(pos_int, travel_mm - pos_int) / margin_mm, 0.0, 1.0)

    def internal_channel(cid, nominal, extra_fac=1.0):
        slow = 1.0 + _SLOW_AMP * np.sin(2.0 * np.pi * _SLOW_HZ * t_int + _SLOW_PHASES[cid])
        dc = nominal * feed_fac * wear_fac * extra_fac
        return noisy(nominal, dc * env_int * slow, n_int)

    internal = {
        ChannelId.M_S: internal_channel(ChannelId.M_S, _DC_M_S),
        ChannelId.I_S: internal_channel(ChannelId.I_S, _DC_I_S, speed_fac),
        ChannelId.M_X: internal_channel(ChannelId.M_X, _DC_M_X),
        ChannelId.M_Y: internal_channel(ChannelId.M_Y, _DC_M_Y),
        ChannelId.I_X: internal_channel(ChannelId.I_X, _DC_I_X, speed_fac),
        ChannelId.I_Y: internal_channel(ChannelId.I_Y, _DC_I_Y, speed_fac),
    }

    return RawCut(cut_id, external, internal, pos_int,
                  cfg.external_rate_hz, cfg.internal_rate_hz)


# ---------------------------------------------------------------------------
# Campaign generation and dataset layout
# ---------------------------------------------------------------------------

MANIFEST_NAME = "campaign.json"


def _tool_rng(master_seed: int, tool_id: int) -> np.random.Generator:
    # per-tool substream: reproducible regardless of generation order
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(tool_id,)))


def _tool_set_sequence(plan: CampaignPlan, tool_id: int) -> tuple[list[int], bool]:
    """Set ids this tool cuts through; flag says the stop rule applies."""
    if tool_id in plan.fixed_tools:
        return [plan.fixed_tools[tool_id]] * plan.max_cuts, True
    return list(plan.variable_tools[tool_id]), False


def generate_campaign(plan: CampaignPlan, cfg: SynthConfig, out_dir: Path) -> dict:
    """Write the full dataset and its manifest; returns the manifest dict.

    Per tool: synthesize signals from the pre-cut wear state, advance wear,
    write the post-cut edge curves. Fixed-parameter tools stop at VB_max >=
    the plan threshold or the cut cap; variable tools run their sequence.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tools = []
    for tool_id in plan.tool_ids:
        rng = _tool_rng(cfg.master_seed, tool_id)
        state = WearState.fresh(cfg, rng, plan.edge_count)
        sets, stoppable = _tool_set_sequence(plan, tool_id)
        tool_dir = out / f"tool_{tool_id:02d}"
        tool_dir.mkdir(exist_ok=True)
        cuts = []
        for set_id in sets:
            params = plan.param_sets[set_id]
            index = state.cut_index + 1
            cut_id = f"t{tool_id:02d}_c{index:03d}"
            sig_rel = f"tool_{tool_id:02d}/cut_{index:03d}.sig"
            wear_rel = f"tool_{tool_id:02d}/cut_{index:03d}_wear.csv"
            raw = synthesize_cut_signals(params, state, cfg, rng, cut_id,
                                         travel_mm=plan.feed_travel_mm,
                                         margin_mm=plan.tool_diameter_mm)
            raw.save(out / sig_rel)
            state = step_wear(state, params, cfg, rng, plan.feed_travel_mm)
            write_edge_curves(out / wear_rel, state.curves())
            cuts.append({
                "cut": index,
                "set": set_id,
                "v_c": params.v_c,
                "f_z": params.f_z,
                "l_f_mm": state.l_f_mm,
                "signals": sig_rel,
                "wear": wear_rel,
            })
            if stoppable and state.vb_max_um >= plan.wear_stop_um:
                break
        tools.append({"tool": tool_id,
                      "fixed_set": plan.fixed_tools.get(tool_id),
                      "cuts": cuts})
    manifest = {
        "plan": _plan_dict(plan),
        "config": asdict(cfg),
        "tools": tools,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _plan_dict(plan: CampaignPlan) -> dict:
    d = asdict(plan)
    d["param_sets"] = {str(k): [v.v_c, v.f_z] for k, v in plan.param_sets.items()}
    d["fixed_tools"] = {str(k): v for k, v in plan.fixed_tools.items()}
    d["variable_tools"] = {str(k): list(v) for k, v in plan.variable_tools.items()}
    return d


def read_manifest(dataset_dir: Path) -> dict:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no campaign manifest at {path}")
    manifest = json.loads(path.read_text())
    if "tools" not in manifest:
        raise ConfigError(f"{path}: not a campaign manifest")
    return manifest
