"""Run configuration: JSON file <-> dataclasses, with field-level diagnostics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .geometry import (PilotConfig, Position, ServiceArea, SystemLayout, default_noise_power,
                       path_loss_amplitude)
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists one message per bad field."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


SINGLE_RIS_AREA = ServiceArea((20.0, 0.0, -20.0), (15.0, 35.0))
MULTI_RIS_AREA = ServiceArea((-20.0, 40.0, -20.0), (15.0, 35.0))


def single_ris_layout(N: int = 64, C: int = 8, M: int = 1) -> SystemLayout:
    return SystemLayout(Position(0.0, 0.0, 0.0), (Position(-40.0, 40.0, 0.0),), M=M, N=N, C=C,
                        service_area=SINGLE_RIS_AREA)


def multi_ris_layout(K: int = 2, N: int = 64, C: int = 8, M: int = 8) -> SystemLayout:
    ris = {2: [(-40.0, 20.0, 0.0), (-40.0, 60.0, 0.0)],
           3: [(-40.0, 20.0, 0.0), (-40.0, 40.0, 0.0), (-40.0, 60.0, 0.0)]}[K]
    return SystemLayout(Position(0.0, 0.0, 0.0), tuple(Position(*p) for p in ris), M=M, N=N, C=C,
                        service_area=MULTI_RIS_AREA)


@dataclass
class EvalSettings:
    n_eval: int = 2000
    seed: int = 12345
    batch_size: int = 500
    t_sweep: tuple[int, ...] = ()


@dataclass
class OutputPaths:
    out_dir: str = "runs/default"
    checkpoint_every: int = 0


@dataclass
class RunConfig:
    layout: SystemLayout
    model: ModelConfig
    train: TrainConfig
    pilot: PilotConfig
    eval: EvalSettings = field(default_factory=EvalSettings)
    output: OutputPaths = field(default_factory=OutputPaths)
    baseline_widths: tuple[int, ...] = (200, 200, 200, 3)

    def to_dict(self) -> dict:
        lay = self.layout
        return {
            "layout": {
                "bs_position": list(lay.bs_position.as_array()),
                "ris_positions": [list(p.as_array()) for p in lay.ris_positions],
                "M": lay.M, "N": lay.N, "C": lay.C,
                "spacing_ris": lay.spacing_ris, "spacing_bs": lay.spacing_bs,
                "service_area": {"center": list(lay.service_area.center),
                                 "half_extents": list(lay.service_area.half_extents)},
            },
            "model": _model_dict(self.model),
            "train": asdict(self.train),
            "pilot": {"sigma2": self.pilot.sigma2,
                      "pilot_symbol": [self.pilot.pilot_symbol.real, self.pilot.pilot_symbol.imag]},
            "eval": {**asdict(self.eval), "t_sweep": list(self.eval.t_sweep)},
            "output": asdict(self.output),
            "baseline_widths": list(self.baseline_widths),
        }


def _model_dict(m: ModelConfig) -> dict:
    d = asdict(m)
    d["pos_head_widths"] = list(m.pos_head_widths)
    d["position_bias"] = list(m.position_bias)
    return d


def feature_scale_for(pilot: PilotConfig, layout: SystemLayout) -> float:
    """1 / (sqrt(P_u) * direct-path amplitude at the service-area center).

    Keeps the LSTM inputs near unit size at any SNR; it is a fixed linear
    rescaling, so it changes no information in the measurements.
    """
    center = np.array(layout.service_area.center)
    d = float(np.linalg.norm(center - layout.bs_position.as_array()))
    return 1.0 / (math.sqrt(pilot.p_u) * path_loss_amplitude("direct", d))


_MODEL_DERIVED = ("K", "N", "M", "feature_scale", "position_bias")


def _build(cls, raw: dict, where: str, problems: list[str], skip=()):
    if not isinstance(raw, dict):
        problems.append(f"{where}: expected an object")
        return None
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    for u in unknown:
        problems.append(f"{where}.{u}: unknown field")
    kw = {k: v for k, v in raw.items() if k in names and k not in skip}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        problems.append(f"{where}: {e}")
        return None


def _position(v, where, problems):
    try:
        if len(v) != 3:
            raise ValueError
        return Position(*(float(c) for c in v))
    except (TypeError, ValueError):
        problems.append(f"{where}: expected [x, y, z] numbers, got {v!r}")
        return None


def from_dict(d: Any) -> RunConfig:
    problems: list[str] = []
    if not isinstance(d, dict):
        raise ConfigError(["top level: expected a JSON object"])
    for key in ("layout", "model", "train"):
        if key not in d:
            problems.append(f"{key}: missing section")
    if problems:
        raise ConfigError(problems)

    lay = d["layout"]
    layout = None
    if not isinstance(lay, dict):
        problems.append("layout: expected an object")
    else:
        try:
            bs = _position(lay.get("bs_position"), "layout.bs_position", problems)
            ris_raw = lay.get("ris_positions")
            if not isinstance(ris_raw, list) or not ris_raw:
                problems.append("layout.ris_positions: expected a non-empty list")
                ris = None
            else:
                ris = [_position(p, f"layout.ris_positions[{i}]", problems) for i, p in enumerate(ris_raw)]
            sa = lay.get("service_area", {})
            area = ServiceArea(tuple(float(v) for v in sa["center"]),
                               tuple(float(v) for v in sa["half_extents"]))
            if len(area.center) != 3 or len(area.half_extents) != 2:
                raise ValueError("service_area needs a 3-D center and 2 half-extents")
            if bs is not None and ris is not None and None not in ris:
                layout = SystemLayout(bs, tuple(ris), M=int(lay["M"]), N=int(lay["N"]), C=int(lay["C"]),
                                      service_area=area,
                                      spacing_ris=float(lay.get("spacing_ris", 1.0)),
                                      spacing_bs=float(lay.get("spacing_bs", 1.0)))
        except KeyError as e:
            problems.append(f"layout.{e.args[0]}: missing field")
        except (TypeError, ValueError) as e:
            problems.append(f"layout: {e}")

    train = _build(TrainConfig, d["train"], "train", problems)
    pilot = None
    if train is not None:
        pr = d.get("pilot", {}) or {}
        try:
            sym = pr.get("pilot_symbol", [1.0, 0.0])
            pilot = PilotConfig.from_snr_db(train.snr_db, sigma2=float(pr.get("sigma2", default_noise_power())),
                                            pilot_symbol=complex(float(sym[0]), float(sym[1])))
        except (TypeError, ValueError, IndexError) as e:
            problems.append(f"pilot: {e}")

    model = None
    mraw = d["model"]
    if isinstance(mraw, dict) and layout is not None and pilot is not None:
        for k in _MODEL_DERIVED:
            if k in mraw and k not in ("feature_scale", "position_bias"):
                want = getattr(layout, k)
                if mraw[k] != want:
                    problems.append(f"model.{k}: {mraw[k]} disagrees with layout ({want})")
        kw = {k: v for k, v in mraw.items() if k not in ("K", "N", "M")}
        kw.setdefault("feature_scale", feature_scale_for(pilot, layout))
        kw.setdefault("position_bias", tuple(layout.service_area.center))
        model = _build(ModelConfig, {**kw, "K": layout.K, "N": layout.N, "M": layout.M}, "model", problems)
    elif not isinstance(mraw, dict):
        problems.append("model: expected an object")

    ev = _build(EvalSettings, d.get("eval", {}) or {}, "eval", problems)
    if ev is not None:
        ev.t_sweep = tuple(int(t) for t in ev.t_sweep)
    out = _build(OutputPaths, d.get("output", {}) or {}, "output", problems)
    widths = tuple(int(w) for w in d.get("baseline_widths", (200, 200, 200, 3)))
    if not widths or widths[-1] != 3:
        problems.append("baseline_widths: must end in 3")
    if problems:
        raise ConfigError(problems)
    return RunConfig(layout, model, train, pilot, ev, out, widths)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: not valid JSON ({e})"]) from None
    return from_dict(raw)


def dump(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
