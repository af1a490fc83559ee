"""The VQ-C network: LSTM history compressor, sensing head, VQ and position head.

Episodes run batched: every tensor carries a leading episode axis, and each
episode owns its own channel and noise draws, so an episode's result does not
depend on which batch it rides in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .codebook import Codebook, SelectionRecord, init_codebook, straight_through_select, unit_modulus
from .geometry import ChannelRealization, PilotConfig


@dataclass(frozen=True)
class ModelConfig:
    T: int
    K: int
    N: int
    M: int
    V: int
    B: int
    hidden: int = 512
    dnn_width: int = 1024
    dnn_depth: int = 2
    pos_head_widths: tuple[int, ...] = (200, 200, 200, 3)
    activation: str = "relu"
    # multiplies received pilots before they enter the LSTM
    feature_scale: float = 1.0
    # initial bias of the last position-head layer (service-area center)
    position_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # init gain of the last position-head layer, roughly the area half-extent in meters
    position_gain: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "pos_head_widths", tuple(int(w) for w in self.pos_head_widths))
        object.__setattr__(self, "position_bias", tuple(float(v) for v in self.position_bias))
        for name in ("T", "K", "N", "M", "V", "B", "hidden", "dnn_width", "dnn_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.pos_head_widths or self.pos_head_widths[-1] != 3:
            raise ValueError("position head must end in 3 outputs")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


GATES = ("i", "f", "o", "c")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, ad.Node]:
    """Fan-in scaled uniform initialization; weights are stored (in, out)."""
    H = cfg.hidden
    p: dict[str, np.ndarray] = {}
    for g in GATES:
        p[f"lstm.r_{g}"] = _uniform(rng, 2, (2, H))
        p[f"lstm.u_{g}"] = _uniform(rng, H, (H, H))
        p[f"lstm.b_{g}"] = np.zeros(H)
    width_in = H
    for l in range(1, cfg.dnn_depth + 1):
        p[f"sense.A_{l}"] = _uniform(rng, width_in, (width_in, cfg.dnn_width))
        p[f"sense.b_{l}"] = np.zeros(cfg.dnn_width)
        width_in = cfg.dnn_width
    p["sense.A_ris"] = _uniform(rng, width_in, (width_in, 2 * cfg.N * cfg.K))
    p["sense.b_ris"] = _uniform(rng, width_in, 2 * cfg.N * cfg.K)
    p["sense.A_bs"] = _uniform(rng, width_in, (width_in, 2 * cfg.M))
    p["sense.b_bs"] = _uniform(rng, width_in, 2 * cfg.M)
    p.update(init_mlp("pos", H, cfg.pos_head_widths, rng, cfg.position_bias, cfg.position_gain))
    return {k: ad.parameter(v, name=k) for k, v in p.items()}


def init_mlp(prefix: str, width_in: int, widths: Sequence[int], rng: np.random.Generator,
             last_bias=None, last_gain: float = 1.0) -> dict[str, np.ndarray]:
    """Feedforward weights ``{prefix}.W_l`` (in, out) and biases ``{prefix}.b_l``."""
    p = {}
    for l, w in enumerate(widths):
        p[f"{prefix}.W_{l}"] = _uniform(rng, width_in, (width_in, w))
        p[f"{prefix}.b_{l}"] = np.zeros(w)
        width_in = w
    last = len(widths) - 1
    p[f"{prefix}.W_{last}"] *= last_gain
    if last_bias is not None:
        p[f"{prefix}.b_{last}"] = np.array(last_bias, dtype=np.float64)
    return p


def mlp(h: ad.Node, params, prefix: str, depth: int, activation: str = "relu") -> ad.Node:
    """Affine layers with ``activation`` between them and a linear output."""
    act = ad.ACTIVATIONS[activation]
    for l in range(depth):
        h = ad.affine(h, params[f"{prefix}.W_{l}"], params[f"{prefix}.b_{l}"])
        if l < depth - 1:
            h = act(h)
    return h


def init_codebooks(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Codebook]:
    return {"ris": init_codebook(cfg.N, cfg.V, rng), "bs": init_codebook(cfg.M, cfg.B, rng)}


# --------------------------------------------------------------------------- network pieces

def lstm_step(pi: ad.Node, c_prev: ad.Node, s_prev: ad.Node, params) -> tuple[ad.Node, ad.Node]:
    def gate(g):
        return ad.add_rowvec(ad.add(ad.matmul(pi, params[f"lstm.r_{g}"]),
                                    ad.matmul(s_prev, params[f"lstm.u_{g}"])), params[f"lstm.b_{g}"])
    i = ad.sigmoid(gate("i"))
    f = ad.sigmoid(gate("f"))
    o = ad.sigmoid(gate("o"))
    g = ad.tanh(gate("c"))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    s = ad.mul(o, ad.tanh(c))
    return c, s


def design_sensing(s: ad.Node, params, cfg: ModelConfig) -> tuple[ad.Node, list[ad.Node]]:
    """Hidden state -> (w_tilde (n, 2M), [theta_tilde_k (n, 2N)] * K), all unit modulus."""
    act = ad.ACTIVATIONS[cfg.activation]
    h = s
    for l in range(1, cfg.dnn_depth + 1):
        h = act(ad.affine(h, params[f"sense.A_{l}"], params[f"sense.b_{l}"]))
    ris_raw = ad.affine(h, params["sense.A_ris"], params["sense.b_ris"])
    bs_raw = ad.affine(h, params["sense.A_bs"], params["sense.b_bs"])
    w_tilde = unit_modulus(bs_raw)
    n2 = 2 * cfg.N
    thetas = [unit_modulus(ad.slice(ris_raw, k * n2, (k + 1) * n2, axis=1)) for k in range(cfg.K)]
    return w_tilde, thetas


def estimate_position(c_final: ad.Node, params, cfg: ModelConfig) -> ad.Node:
    return mlp(c_final, params, "pos", len(cfg.pos_head_widths), cfg.activation)


# --------------------------------------------------------------------------- measurement on the graph

@dataclass
class ChannelBatch:
    """Stacked channels of n episodes in the real form used by the graph.

    ``cascade[k]`` is the (n, 2M, 2N) real block matrix of H_ck^T and
    ``direct`` is the (n, 2M) real form of h_d.
    """
    direct: np.ndarray
    cascade: list[np.ndarray]

    @property
    def n(self) -> int:
        return self.direct.shape[0]

    @classmethod
    def from_realizations(cls, chans: Sequence[ChannelRealization]) -> "ChannelBatch":
        K = chans[0].K
        direct = np.stack([np.concatenate([c.h_d.real, c.h_d.imag]) for c in chans])
        cascade = []
        for k in range(K):
            A = np.stack([c.G_r[k] * c.h_r[k][None, :] for c in chans])   # (n, M, N) = H_ck^T
            top = np.concatenate([A.real, -A.imag], axis=2)
            bot = np.concatenate([A.imag, A.real], axis=2)
            cascade.append(np.concatenate([top, bot], axis=1))
        return cls(direct, cascade)

    def subset(self, rows) -> "ChannelBatch":
        return ChannelBatch(self.direct[rows], [c[rows] for c in self.cascade])


def measure_pilot_graph(chb: ChannelBatch, w: ad.Node, thetas: Sequence[ad.Node], cfg: PilotConfig,
                        noise: np.ndarray) -> ad.Node:
    """Batched y = sqrt(P_u) w^T (h_d + sum_k H_ck^T theta_k) x + n as an (n, 2) [Re, Im] node."""
    g = ad.constant(chb.direct)
    for A, th in zip(chb.cascade, thetas):
        g = ad.add(g, ad.batch_matvec(A, th))
    M = chb.direct.shape[1] // 2
    wr, wi = ad.slice(w, 0, M, axis=1), ad.slice(w, M, 2 * M, axis=1)
    gr, gi = ad.slice(g, 0, M, axis=1), ad.slice(g, M, 2 * M, axis=1)
    yr = ad.sub(ad.sum(ad.mul(wr, gr), axis=1), ad.sum(ad.mul(wi, gi), axis=1))
    yi = ad.add(ad.sum(ad.mul(wr, gi), axis=1), ad.sum(ad.mul(wi, gr), axis=1))
    amp = math.sqrt(cfg.p_u)
    x = complex(cfg.pilot_symbol)
    out_r = ad.sub(ad.mul(yr, amp * x.real), ad.mul(yi, amp * x.imag))
    out_i = ad.add(ad.mul(yr, amp * x.imag), ad.mul(yi, amp * x.real))
    y = ad.concat([ad.reshape(out_r, (-1, 1)), ad.reshape(out_i, (-1, 1))], axis=1)
    noise = np.asarray(noise)
    return ad.add(y, np.stack([noise.real, noise.imag], axis=1))


# --------------------------------------------------------------------------- episode

@dataclass
class EpisodeTrace:
    """Batched record of one forward pass over T frames.

    Frame t (0..T-1) measures with ``used_w[:, t]`` / ``used_theta[:, t]``;
    design index d (0..T) is the output of the sensing head after t = d-1
    measurements (d = 0 is the fixed opening design from the zero state).
    """
    measurements: np.ndarray            # (n, T) complex
    features: list[ad.Node]             # T x (n, 2)
    cells: list[ad.Node]                # T x (n, H)
    hiddens: list[ad.Node]              # T x (n, H)
    pre_w: list[ad.Node]                # (T+1) x (n, 2M)
    pre_theta: list[list[ad.Node]]      # (T+1) x K x (n, 2N)
    bs_indices: np.ndarray | None       # (n, T+1)
    ris_indices: np.ndarray | None      # (n, T+1, K)
    used_w: np.ndarray                  # (n, T, 2M)
    used_theta: np.ndarray              # (n, T, K, 2N)
    alpha: list[ad.Node]                # T x (n,), design indices 1..T
    beta: list[list[ad.Node]]           # T x K x (n,)
    estimate: ad.Node                   # (n, 3)
    codebook_free: bool = False

    @property
    def n(self) -> int:
        return self.estimate.shape[0]

    def selections(self, episode: int) -> list[SelectionRecord]:
        if self.bs_indices is None:
            return []
        return [SelectionRecord(tuple(int(i) for i in self.ris_indices[episode, d]),
                                int(self.bs_indices[episode, d]), d)
                for d in range(self.bs_indices.shape[1])]


def _quantize(w_t, th_t, codebooks, commitment_weight, codebook_free):
    if codebook_free:
        return w_t, th_t, None, None, None, None
    sel_w = straight_through_select(w_t, codebooks["bs"])
    sel_th = [straight_through_select(t, codebooks["ris"]) for t in th_t]
    return (sel_w.selected, [s.selected for s in sel_th], sel_w.indices,
            np.stack([s.indices for s in sel_th], axis=1),
            sel_w.loss(commitment_weight), [s.loss(commitment_weight) for s in sel_th])


def run_episode(chb: ChannelBatch, params, codebooks, cfg: ModelConfig, pilot: PilotConfig,
                noise: np.ndarray, commitment_weight: float = 1.0,
                codebook_free: bool = False) -> EpisodeTrace:
    """Run T sensing frames for every episode in ``chb``; ``noise`` is (n, T) complex."""
    n = chb.n
    noise = np.asarray(noise, dtype=np.complex128).reshape(n, -1)
    if noise.shape[1] != cfg.T:
        raise ValueError(f"noise has {noise.shape[1]} frames, expected {cfg.T}")
    if len(chb.cascade) != cfg.K:
        raise ValueError(f"channel has {len(chb.cascade)} RIS links, model expects {cfg.K}")
    H = cfg.hidden
    c = ad.constant(np.zeros((n, H)))
    s = ad.constant(np.zeros((n, H)))

    w_t, th_t = design_sensing(s, params, cfg)
    w_q, th_q, bi, ri, _, _ = _quantize(w_t, th_t, codebooks, commitment_weight, codebook_free)
    pre_w, pre_theta = [w_t], [th_t]
    bs_idx, ris_idx = [bi], [ri]
    feats, cells, hiddens, alpha, beta, ys = [], [], [], [], [], []
    used_w, used_th = [], []
    for t in range(cfg.T):
        used_w.append(w_q.value)
        used_th.append(np.stack([q.value for q in th_q], axis=1))
        y = measure_pilot_graph(chb, w_q, th_q, pilot, noise[:, t])
        ys.append(y.value[:, 0] + 1j * y.value[:, 1])
        pi = ad.mul(y, cfg.feature_scale)
        c, s = lstm_step(pi, c, s, params)
        feats.append(pi)
        cells.append(c)
        hiddens.append(s)
        w_t, th_t = design_sensing(s, params, cfg)
        w_q, th_q, bi, ri, a, b = _quantize(w_t, th_t, codebooks, commitment_weight, codebook_free)
        pre_w.append(w_t)
        pre_theta.append(th_t)
        bs_idx.append(bi)
        ris_idx.append(ri)
        if not codebook_free:
            alpha.append(a)
            beta.append(b)
    estimate = estimate_position(c, params, cfg)
    return EpisodeTrace(
        measurements=np.stack(ys, axis=1), features=feats, cells=cells, hiddens=hiddens,
        pre_w=pre_w, pre_theta=pre_theta,
        bs_indices=None if codebook_free else np.stack(bs_idx, axis=1),
        ris_indices=None if codebook_free else np.stack(ris_idx, axis=1),
        used_w=np.stack(used_w, axis=1), used_theta=np.stack(used_th, axis=1),
        alpha=alpha, beta=beta, estimate=estimate, codebook_free=codebook_free)


@dataclass
class LossBreakdown:
    total: ad.Node
    mse: ad.Node
    alpha: ad.Node
    beta: ad.Node

    def as_dict(self) -> dict[str, float]:
        return {"loss": float(self.total.value), "mse": float(self.mse.value),
                "alpha": float(self.alpha.value), "beta": float(self.beta.value)}


def composite_loss(trace: EpisodeTrace, positions: np.ndarray) -> LossBreakdown:
    """Batch mean of ||p_hat - p||^2 + sum_t alpha + sum_k sum_t beta_k."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != trace.estimate.shape:
        raise ValueError(f"positions {positions.shape} do not match estimates {trace.estimate.shape}")
    mse = ad.mean(ad.sum(ad.square(ad.sub(trace.estimate, positions)), axis=1))
    if trace.alpha:
        a = trace.alpha[0]
        for term in trace.alpha[1:]:
            a = ad.add(a, term)
        alpha = ad.mean(a)
        b = None
        for per_frame in trace.beta:
            for term in per_frame:
                b = term if b is None else ad.add(b, term)
        beta = ad.mean(b)
    else:
        alpha = ad.constant(0.0)
        beta = ad.constant(0.0)
    total = ad.add(ad.add(mse, alpha), beta)
    return LossBreakdown(total, mse, alpha, beta)
