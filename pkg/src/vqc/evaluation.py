"""RMSE evaluation, the non-adaptive baselines and radio-map rendering."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .codebook import Codebook, init_codebook, normalize_unit_modulus, to_complex
from .config import RunConfig
from .geometry import (ChannelRealization, PilotConfig, Position, ServiceArea, SystemLayout, field_map,
                       grid_centers, los_channel)
from .model import ChannelBatch, estimate_position, init_mlp, measure_pilot_graph, mlp, run_episode
from .training import (EVAL_STREAM, TRAIN_STREAM, VALID_STREAM, Adam, EpisodeBatch, NumericalError,
                       TrainConfig, VQCState, sample_batch)

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    rmse: float
    per_t: list[tuple[int, float]]
    n_episodes: int
    config: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        if not self.rmse >= 0.0:
            raise ValueError(f"rmse must be non-negative, got {self.rmse}")

    def to_dict(self) -> dict:
        return {"label": self.label, "rmse": self.rmse, "per_t": [list(p) for p in self.per_t],
                "n_episodes": self.n_episodes, "config": self.config}

    def lines(self) -> list[str]:
        out = [f"{self.label or 'model'}: RMSE {self.rmse:.3f} m over {self.n_episodes} episodes"]
        out += [f"  T={t}: {r:.3f} m" for t, r in self.per_t]
        return out


def centroid_rmse(area: ServiceArea) -> float:
    """RMSE of always guessing the center of a uniform rectangle."""
    lx, ly = 2 * area.half_extents[0], 2 * area.half_extents[1]
    return math.sqrt((lx ** 2 + ly ** 2) / 12.0)


def _sq_err(est: np.ndarray, pos: np.ndarray) -> float:
    return float(np.sum((est - pos) ** 2))


def evaluate_rmse(state: VQCState, layout: SystemLayout, pilot: PilotConfig, n_eval: int, seed: int,
                  epsilon: float = 10.0, codebook_free: bool = False, batch_size: int = 500,
                  threads: int = 1, config: dict | None = None, label: str = "") -> EvalReport:
    """RMSE on held-out episodes; ``per_t`` applies the position head after each frame."""
    T = state.model_cfg.T
    sums = np.zeros(T)
    for start in range(0, n_eval, batch_size):
        batch = sample_batch(layout, pilot, T, epsilon, seed, EVAL_STREAM,
                             range(start, min(n_eval, start + batch_size)), threads)
        tr = run_episode(batch.channel_batch(), state.params, state.codebooks, state.model_cfg, pilot,
                         batch.noise, codebook_free=codebook_free)
        for t in range(T - 1):
            est = estimate_position(tr.cells[t], state.params, state.model_cfg).value
            sums[t] += _sq_err(est, batch.positions)
        sums[T - 1] += _sq_err(tr.estimate.value, batch.positions)
    per_t = [(t + 1, math.sqrt(sums[t] / n_eval)) for t in range(T)]
    return EvalReport(per_t[-1][1], per_t, n_eval, dict(config or {}), label)


def codebook_free_eval(state: VQCState, meta: dict, layout: SystemLayout, pilot: PilotConfig,
                       n_eval: int, seed: int, **kw) -> EvalReport:
    if not meta.get("codebook_free", False):
        raise ValueError("checkpoint was not trained in codebook-free mode")
    return evaluate_rmse(state, layout, pilot, n_eval, seed, codebook_free=True,
                         label=kw.pop("label", "codebook-free"), **kw)


# --------------------------------------------------------------------------- baselines

@dataclass
class BaselineState:
    """Feedforward estimator on the 2T pilot features plus its sensing scheme.

    ``kind="random"`` draws codewords uniformly from fixed random codebooks
    each frame; ``kind="learned"`` trains one shared unit-modulus sensing
    vector per frame and surface, identical for every episode.
    """
    kind: str
    T: int
    K: int
    widths: tuple[int, ...]
    feature_scale: float
    params: dict[str, ad.Node]
    codebooks: dict[str, Codebook] = field(default_factory=dict)
    seed: int = 0

    def trainables(self) -> dict[str, ad.Node]:
        return dict(self.params)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.value for k, v in self.params.items()}
        for k, cb in self.codebooks.items():
            out[f"codebook.{k}"] = cb.table.value
        return out


def new_baseline(kind: str, layout: SystemLayout, T: int, V: int, B: int, widths: Sequence[int],
                 feature_scale: float, seed: int) -> BaselineState:
    if kind not in ("random", "learned"):
        raise ValueError(f"unknown baseline kind {kind!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 98]))
    params = init_mlp("est", 2 * T, tuple(widths), rng, layout.service_area.center)
    codebooks = {}
    if kind == "random":
        codebooks = {"ris": init_codebook(layout.N, V, rng, trainable=False),
                     "bs": init_codebook(layout.M, B, rng, trainable=False)}
    else:
        for t in range(T):
            params[f"fixed.w_{t}"] = normalize_unit_modulus(rng.normal(size=(1, 2 * layout.M)))
            for k in range(layout.K):
                params[f"fixed.theta_{t}_{k}"] = normalize_unit_modulus(rng.normal(size=(1, 2 * layout.N)))
    nodes = {k: ad.parameter(v, name=k) for k, v in params.items()}
    return BaselineState(kind, T, layout.K, tuple(widths), feature_scale, nodes, codebooks, seed)


def _random_choices(state: BaselineState, batch: EpisodeBatch, stream: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-episode uniform codeword indices, from a generator separate from the channel draws."""
    V, B = state.codebooks["ris"].W, state.codebooks["bs"].W
    ris = np.empty((batch.n, state.T, state.K), dtype=np.int64)
    bs = np.empty((batch.n, state.T), dtype=np.int64)
    for r, idx in enumerate(batch.indices):
        g = np.random.default_rng(np.random.SeedSequence([state.seed, stream, int(idx), 1]))
        ris[r] = g.integers(V, size=(state.T, state.K))
        bs[r] = g.integers(B, size=state.T)
    return ris, bs


def baseline_sensing(state: BaselineState, batch: EpisodeBatch, stream: int):
    """Per frame: (w node (n, 2M), [theta_k node (n, 2N)])."""
    n = batch.n
    frames = []
    if state.kind == "random":
        ris, bs = _random_choices(state, batch, stream)
        for t in range(state.T):
            w = ad.constant(state.codebooks["bs"].table.value[:, bs[:, t]].T)
            th = [ad.constant(state.codebooks["ris"].table.value[:, ris[:, t, k]].T) for k in range(state.K)]
            frames.append((w, th))
    else:
        ones = ad.constant(np.ones((n, 1)))
        for t in range(state.T):
            w = ad.matmul(ones, state.params[f"fixed.w_{t}"])
            th = [ad.matmul(ones, state.params[f"fixed.theta_{t}_{k}"]) for k in range(state.K)]
            frames.append((w, th))
    return frames


def baseline_predict(state: BaselineState, batch: EpisodeBatch, pilot: PilotConfig, stream: int) -> ad.Node:
    chb = batch.channel_batch()
    feats = [ad.mul(measure_pilot_graph(chb, w, th, pilot, batch.noise[:, t]), state.feature_scale)
             for t, (w, th) in enumerate(baseline_sensing(state, batch, stream))]
    # [Re y1, Im y1, Re y2, Im y2, ...]
    return mlp(ad.concat(feats, axis=1), state.params, "est", len(state.widths))


def _project_fixed(state: BaselineState) -> None:
    for name, p in state.params.items():
        if name.startswith("fixed."):
            p.value = normalize_unit_modulus(p.value)


def baseline_rmse(state: BaselineState, layout: SystemLayout, pilot: PilotConfig, n: int, seed: int,
                  stream: int, epsilon: float, batch_size: int = 500, threads: int = 1) -> float:
    sq = 0.0
    for start in range(0, n, batch_size):
        batch = sample_batch(layout, pilot, state.T, epsilon, seed, stream,
                             range(start, min(n, start + batch_size)), threads)
        sq += _sq_err(baseline_predict(state, batch, pilot, stream).value, batch.positions)
    return math.sqrt(sq / n)


def train_baseline(state: BaselineState, layout: SystemLayout, pilot: PilotConfig, cfg: TrainConfig,
                   metrics_path=None) -> tuple[BaselineState, list[dict]]:
    """MSE-only training on fresh episodes, same budget and seeds as VQ-C training."""
    opt = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    params = state.trainables()
    steps = cfg.steps
    val_every = max(1, steps // cfg.epochs)
    history = []
    fh = open(metrics_path, "w") if metrics_path else None
    try:
        for step in range(steps):
            batch = sample_batch(layout, pilot, state.T, cfg.epsilon, cfg.seed, TRAIN_STREAM,
                                 range(step * cfg.batch_size, (step + 1) * cfg.batch_size), cfg.threads)
            for p in params.values():
                p.zero_grad()
            est = baseline_predict(state, batch, pilot, TRAIN_STREAM)
            mse = ad.mean(ad.sum(ad.square(ad.sub(est, batch.positions)), axis=1))
            if not math.isfinite(float(mse.value)):
                raise NumericalError(f"non-finite baseline loss at step {step}")
            ad.backward(mse)
            opt.update(params)
            if state.kind == "learned":
                _project_fixed(state)
            rec = {"step": step + 1, "mse": float(mse.value)}
            if (step + 1) % val_every == 0 or step + 1 == steps:
                rec["val_rmse"] = baseline_rmse(state, layout, pilot, cfg.val_episodes, cfg.seed,
                                                VALID_STREAM, cfg.epsilon, threads=cfg.threads)
                log.info("%s baseline step %d/%d val_rmse %.3f", state.kind, step + 1, steps, rec["val_rmse"])
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    return state, history


def _run_baseline(kind: str, run: RunConfig, metrics_path=None) -> tuple[EvalReport, BaselineState]:
    m = run.model
    state = new_baseline(kind, run.layout, m.T, m.V, m.B, run.baseline_widths, m.feature_scale, run.train.seed)
    state, _ = train_baseline(state, run.layout, run.pilot, run.train, metrics_path)
    ev = run.eval
    rmse = baseline_rmse(state, run.layout, run.pilot, ev.n_eval, ev.seed, EVAL_STREAM, run.train.epsilon,
                         ev.batch_size, run.train.threads)
    label = {"random": "random sensing", "learned": "learned non-adaptive sensing"}[kind]
    return EvalReport(rmse, [(m.T, rmse)], ev.n_eval, run.to_dict(), label), state


def random_sensing_baseline(run: RunConfig, metrics_path=None) -> tuple[EvalReport, BaselineState]:
    return _run_baseline("random", run, metrics_path)


def learned_nonadaptive_baseline(run: RunConfig, metrics_path=None) -> tuple[EvalReport, BaselineState]:
    return _run_baseline("learned", run, metrics_path)


# --------------------------------------------------------------------------- radio maps

@dataclass
class RadioMap:
    frame: int                  # 1-based frame number
    ris_subset: tuple[int, ...]  # 0-based RIS indices
    include_direct: bool
    rss: np.ndarray             # (nx, ny), rows index x
    area: ServiceArea
    resolution: float = 1.0

    @property
    def subset_label(self) -> str:
        return "+".join(str(k + 1) for k in self.ris_subset)

    def header(self) -> str:
        x0, x1, y0, y1 = self.area.bounds()
        return (f"# x_range={x0:g}:{x1:g},y_range={y0:g}:{y1:g},resolution={self.resolution:g},"
                f"frame={self.frame},ris_subset={self.subset_label},direct={int(self.include_direct)}")

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            fh.write(self.header() + "\n")
            for row in self.rss:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        return path

    def value_at(self, x: float, y: float) -> float:
        i, j = cell_index(self.area, x, y, self.resolution)
        return float(self.rss[i, j])


def read_radio_map(path) -> tuple[dict[str, str], np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}: missing radio-map header")
    meta = dict(item.split("=", 1) for item in lines[0][2:].split(","))
    grid = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:] if ln])
    return meta, grid


def cell_index(area: ServiceArea, x: float, y: float, resolution: float = 1.0) -> tuple[int, int]:
    x0, x1, y0, y1 = area.bounds()
    nx, ny = int(round((x1 - x0) / resolution)), int(round((y1 - y0) / resolution))
    i = min(nx - 1, max(0, int(math.floor((x - x0) / resolution))))
    j = min(ny - 1, max(0, int(math.floor((y - y0) / resolution))))
    return i, j


def episode_designs(state: VQCState, layout: SystemLayout, pilot: PilotConfig, channel: ChannelRealization,
                    codebook_free: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Zero-noise episode; returns the complex (T, M) beamformers and (T, K, N) reflections used."""
    T = state.model_cfg.T
    tr = run_episode(ChannelBatch.from_realizations([channel]), state.params, state.codebooks,
                     state.model_cfg, pilot, np.zeros((1, T)), codebook_free=codebook_free)
    return to_complex(tr.used_w[0]), to_complex(tr.used_theta[0])


def emit_radio_maps(state: VQCState, ue, layout: SystemLayout, pilot: PilotConfig, out_dir=None,
                    channel: ChannelRealization | None = None, codebook_free: bool = False,
                    frames: Sequence[int] | None = None) -> list[RadioMap]:
    """RSS maps of the configurations chosen in one zero-noise episode for ``ue``.

    Per frame: one reflected-only map per RIS (BS codeword applied), and for
    K >= 2 also the combined map of all RISs plus the direct path.  With no
    ``channel`` the episode runs on the LOS channel at ``ue``.
    """
    ue = ue if isinstance(ue, Position) else Position(*ue)
    channel = channel if channel is not None else los_channel(layout, ue)
    ws, thetas = episode_designs(state, layout, pilot, channel, codebook_free)
    T, K = state.model_cfg.T, layout.K
    maps = []
    for t in (range(T) if frames is None else [f - 1 for f in frames]):
        th = list(thetas[t])
        for k in range(K):
            grid = np.abs(field_map(layout, ws[t], th, pilot, ris_subset=[k], include_direct=False)) ** 2
            maps.append(RadioMap(t + 1, (k,), False, grid, layout.service_area))
        if K >= 2:
            grid = np.abs(field_map(layout, ws[t], th, pilot)) ** 2
            maps.append(RadioMap(t + 1, tuple(range(K)), True, grid, layout.service_area))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for m in maps:
            m.write_csv(out / f"radiomap_frame{m.frame}_ris{m.subset_label}.csv")
    return maps


def focusing_fraction(state: VQCState, layout: SystemLayout, pilot: PilotConfig, n: int, seed: int,
                      epsilon: float = 10.0) -> float:
    """Share of held-out episodes whose final-frame RSS at the UE cell beats the grid median."""
    T = state.model_cfg.T
    batch = sample_batch(layout, pilot, T, epsilon, seed, EVAL_STREAM, range(n))
    hits = 0
    for pos, ch in zip(batch.positions, batch.channels):
        rmap = emit_radio_maps(state, pos, layout, pilot, channel=ch, frames=[T])[0]
        hits += rmap.value_at(pos[0], pos[1]) > float(np.median(rmap.rss))
    return hits / n
