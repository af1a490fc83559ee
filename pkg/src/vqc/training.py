"""Episode sampling, Adam, and the outer training loop."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .codebook import Codebook, max_modulus_error, project_codebook
from .geometry import (ChannelRealization, PilotConfig, Position, SystemLayout, draw_noise,
                       sample_channel)
from .model import ChannelBatch, ModelConfig, composite_loss, init_codebooks, init_params, run_episode

log = logging.getLogger(__name__)

TRAIN_STREAM = 0
VALID_STREAM = 1
EVAL_STREAM = 2


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    episodes_total: int = 51200
    batch_size: int = 256
    epochs: int = 10
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    snr_db: float = 25.0
    seed: int = 0
    commitment_weight: float = 1.0
    codebook_free: bool = False
    epsilon: float = 10.0
    val_episodes: int = 1000
    threads: int = 1

    def __post_init__(self):
        for name in ("episodes_total", "batch_size", "epochs", "val_episodes", "threads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.learning_rate < 0 or self.adam_eps <= 0:
            raise ValueError("learning_rate must be >= 0 and adam_eps > 0")

    @property
    def steps(self) -> int:
        return max(1, self.episodes_total // self.batch_size)


# --------------------------------------------------------------------------- sampling

def sample_ue(layout: SystemLayout, rng: np.random.Generator) -> Position:
    x0, x1, y0, y1 = layout.service_area.bounds()
    return Position(float(rng.uniform(x0, x1)), float(rng.uniform(y0, y1)), layout.service_area.z)


def episode_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Independent generator per (seed, stream, episode index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(index)]))


@dataclass
class EpisodeBatch:
    positions: np.ndarray           # (n, 3)
    channels: list[ChannelRealization]
    noise: np.ndarray               # (n, T) complex
    indices: np.ndarray

    @property
    def n(self) -> int:
        return len(self.channels)

    def channel_batch(self) -> ChannelBatch:
        return ChannelBatch.from_realizations(self.channels)


def sample_episode(layout: SystemLayout, pilot: PilotConfig, T: int, epsilon: float,
                   seed: int, stream: int, index: int):
    rng = episode_rng(seed, stream, index)
    ue = sample_ue(layout, rng)
    ch = sample_channel(layout, ue, epsilon, rng)
    noise = draw_noise(rng, pilot.sigma2, T)
    return ue.as_array(), ch, noise


def sample_batch(layout: SystemLayout, pilot: PilotConfig, T: int, epsilon: float, seed: int,
                 stream: int, indices: Iterable[int], threads: int = 1) -> EpisodeBatch:
    indices = np.asarray(list(indices), dtype=np.int64)

    def one(i):
        return sample_episode(layout, pilot, T, epsilon, seed, stream, int(i))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            eps = list(ex.map(one, indices))      # map keeps submission order
    else:
        eps = [one(i) for i in indices]
    return EpisodeBatch(np.stack([e[0] for e in eps]), [e[1] for e in eps],
                        np.stack([e[2] for e in eps]), indices)


# --------------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def update(self, params: dict[str, ad.Node]) -> None:
        """One bias-corrected step on every parameter, in sorted-name order."""
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** st.step
        c2 = 1.0 - b2 ** st.step
        for name in sorted(params):
            p = params[name]
            g = p.grad
            if name not in st.m:
                st.m[name] = np.zeros_like(p.value)
                st.v[name] = np.zeros_like(p.value)
            st.m[name] = b1 * st.m[name] + (1.0 - b1) * g
            st.v[name] = b2 * st.v[name] + (1.0 - b2) * g * g
            mhat = st.m[name] / c1
            vhat = st.v[name] / c2
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# --------------------------------------------------------------------------- model bundle

@dataclass
class VQCState:
    """Everything a checkpoint holds for a VQ-C (or codebook-free) model."""
    model_cfg: ModelConfig
    params: dict[str, ad.Node]
    codebooks: dict[str, Codebook]
    step: int = 0

    def trainables(self, codebook_free: bool = False) -> dict[str, ad.Node]:
        out = dict(self.params)
        if not codebook_free:
            out["codebook.ris"] = self.codebooks["ris"].table
            out["codebook.bs"] = self.codebooks["bs"].table
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.value for k, v in self.params.items()}
        out["codebook.ris"] = self.codebooks["ris"].table.value
        out["codebook.bs"] = self.codebooks["bs"].table.value
        return out


def new_state(model_cfg: ModelConfig, seed: int) -> VQCState:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 99]))
    params = init_params(model_cfg, rng)
    codebooks = init_codebooks(model_cfg, rng)
    return VQCState(model_cfg, params, codebooks)


def predict(state: VQCState, batch: EpisodeBatch, pilot: PilotConfig, codebook_free: bool = False,
            commitment_weight: float = 1.0):
    return run_episode(batch.channel_batch(), state.params, state.codebooks, state.model_cfg, pilot,
                       batch.noise, commitment_weight, codebook_free)


def train_step(state: VQCState, batch: EpisodeBatch, pilot: PilotConfig, opt: Adam,
               cfg: TrainConfig) -> dict[str, float]:
    trainables = state.trainables(cfg.codebook_free)
    for p in trainables.values():
        p.zero_grad()
    trace = predict(state, batch, pilot, cfg.codebook_free, cfg.commitment_weight)
    losses = composite_loss(trace, batch.positions)
    metrics = losses.as_dict()
    if not all(math.isfinite(v) for v in metrics.values()):
        raise NumericalError(f"non-finite loss at step {state.step}: {metrics}")
    ad.backward(losses.total)
    opt.update(trainables)
    if not cfg.codebook_free:
        for cb in state.codebooks.values():
            project_codebook(cb)
    state.step += 1
    metrics["step"] = state.step
    return metrics


def rmse_of(state: VQCState, layout: SystemLayout, pilot: PilotConfig, n: int, seed: int,
            stream: int, epsilon: float, codebook_free: bool, batch_size: int = 500,
            threads: int = 1) -> float:
    sq = 0.0
    for start in range(0, n, batch_size):
        idx = range(start, min(n, start + batch_size))
        batch = sample_batch(layout, pilot, state.model_cfg.T, epsilon, seed, stream, idx, threads)
        est = predict(state, batch, pilot, codebook_free).estimate.value
        sq += float(np.sum((est - batch.positions) ** 2))
    return math.sqrt(sq / n)


def train_loop(cfg: TrainConfig, layout: SystemLayout, model_cfg: ModelConfig, pilot: PilotConfig,
               state: VQCState | None = None, metrics_path: str | Path | None = None,
               on_checkpoint: Callable[[VQCState, int], None] | None = None,
               checkpoint_every: int = 0) -> tuple[VQCState, list[dict]]:
    """Fresh episodes every step; validation RMSE at each epoch boundary."""
    state = state or new_state(model_cfg, cfg.seed)
    opt = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    steps = cfg.steps
    val_every = max(1, steps // cfg.epochs)
    history: list[dict] = []
    fh = open(metrics_path, "w") if metrics_path else None
    t0 = time.perf_counter()
    try:
        for step in range(steps):
            idx = range(step * cfg.batch_size, (step + 1) * cfg.batch_size)
            batch = sample_batch(layout, pilot, model_cfg.T, cfg.epsilon, cfg.seed, TRAIN_STREAM, idx,
                                 cfg.threads)
            rec = train_step(state, batch, pilot, opt, cfg)
            if (step + 1) % val_every == 0 or step + 1 == steps:
                rec["val_rmse"] = rmse_of(state, layout, pilot, cfg.val_episodes, cfg.seed, VALID_STREAM,
                                          cfg.epsilon, cfg.codebook_free, threads=cfg.threads)
                log.info("step %d/%d loss %.3f val_rmse %.3f (%.0fs)", step + 1, steps, rec["loss"],
                         rec["val_rmse"], time.perf_counter() - t0)
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if on_checkpoint and checkpoint_every and (step + 1) % checkpoint_every == 0:
                on_checkpoint(state, step + 1)
    finally:
        if fh:
            fh.close()
    if not cfg.codebook_free:
        for cb in state.codebooks.values():
            if max_modulus_error(cb.table.value.T) > 1e-9:
                raise NumericalError("codebook left the unit-modulus set")
    return state, history
