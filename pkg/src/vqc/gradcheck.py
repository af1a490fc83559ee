"""Finite-difference checks of the full VQ-C episode gradient.

Central differences are compared coordinate by coordinate against
``autodiff.backward``.  The straight-through estimator is the exact gradient
of a surrogate in which every stop-gradient output is a constant, so the
perturbed forward passes replay the stopped values recorded at the base
point.  A coordinate whose +/- perturbation changes any codeword selection
sits on a quantization boundary and is skipped.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import codebook as cbmod
from .config import feature_scale_for, single_ris_layout
from .geometry import PilotConfig
from .model import ModelConfig, composite_loss, run_episode
from .training import TrainConfig, VQCState, new_state, sample_batch


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar f at x (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _op_cases(rng: np.random.Generator) -> dict:
    """Per-op builders f(*nodes) -> node and their inputs; rectifier inputs stay off the kink."""
    def n(*shape):
        return rng.normal(size=shape)

    def pos(*shape):
        return rng.uniform(0.5, 2.0, size=shape)

    def off_kink(*shape):
        return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)
    idx = np.array([2, 0, 2, 1])
    return {
        "add": (ad.add, [n(3, 4), n(3, 4)]),
        "sub": (ad.sub, [n(3, 4), n(3, 4)]),
        "mul": (ad.mul, [n(3, 4), n(3, 4)]),
        "div": (ad.div, [n(3, 4), pos(3, 4)]),
        "neg": (ad.neg, [n(5)]),
        "square": (ad.square, [n(5)]),
        "sqrt": (ad.sqrt, [pos(5)]),
        "tanh": (ad.tanh, [n(5)]),
        "sigmoid": (ad.sigmoid, [n(5)]),
        "relu": (ad.relu, [off_kink(6)]),
        "matmul": (ad.matmul, [n(3, 4), n(4, 2)]),
        "add_rowvec": (ad.add_rowvec, [n(3, 4), n(4)]),
        "affine": (ad.affine, [n(3, 4), n(4, 2), n(2)]),
        "batch_matvec": (ad.batch_matvec, [n(2, 3, 4), n(2, 4)]),
        "sum": (lambda a: ad.sum(a, axis=1), [n(3, 4)]),
        "mean": (lambda a: ad.mean(a, axis=0), [n(3, 4)]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [n(2, 3), n(2, 2)]),
        "slice": (lambda a: ad.slice(a, 1, 3), [n(2, 4)]),
        "reshape": (lambda a: ad.reshape(a, (4, 3)), [n(3, 4)]),
        "take_columns": (lambda t: ad.take_columns(t, idx), [n(4, 3)]),
        "unit_modulus": (cbmod.unit_modulus, [n(3, 6)]),
    }


def op_gradchecks(seed: int = 0, h: float = 1e-6) -> dict[str, float]:
    """Max relative error of backward against central differences for every differentiable op.

    Each op output is contracted with a fixed random weight so every output
    coordinate contributes a distinct cotangent.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    out = {}
    for name, (build, arrays) in _op_cases(rng).items():
        probe = build(*[ad.constant(a) for a in arrays]).value
        weight = rng.normal(size=np.shape(probe))

        def loss(*nodes):
            return ad.sum(ad.mul(build(*nodes), ad.constant(weight)))
        nodes = [ad.parameter(a.copy()) for a in arrays]
        ad.backward(loss(*nodes))
        worst = 0.0
        for node in nodes:
            num = central_difference(lambda: float(loss(*[ad.constant(m.value) for m in nodes]).value),
                                     node.value, h)
            worst = max(worst, float(np.max(relative_error(num, node.grad, floor=1e-7))))
        out[name] = worst
    return out


def tiny_config() -> tuple:
    layout = single_ris_layout(N=2, C=1, M=2)
    pilot = PilotConfig.from_snr_db(25.0)
    model = ModelConfig(T=2, K=1, N=2, M=2, V=4, B=4, hidden=4, dnn_width=4, dnn_depth=2,
                        pos_head_widths=(4, 3), feature_scale=feature_scale_for(pilot, layout),
                        position_bias=layout.service_area.center, position_gain=1.0)
    return layout, pilot, model


@dataclass
class GradcheckReport:
    checked: int = 0
    skipped: int = 0
    max_rel_error: float = 0.0
    worst: str = ""
    failures: list[str] = field(default_factory=list)
    isolation_ok: bool = True
    isolation_notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and self.isolation_ok

    def lines(self) -> list[str]:
        out = [f"coordinates checked: {self.checked}, skipped at VQ boundaries: {self.skipped}",
               f"max relative error: {self.max_rel_error:.3e} ({self.worst})"]
        out += [f"FAIL {f}" for f in self.failures[:20]]
        out += self.isolation_notes
        out.append("PASS" if self.passed else "FAIL")
        return out


def _episode(state: VQCState, batch, pilot, cw=1.0, codebook_free=False):
    trace = run_episode(batch.channel_batch(), state.params, state.codebooks, state.model_cfg, pilot,
                        batch.noise, cw, codebook_free)
    return trace, composite_loss(trace, batch.positions)


def _signature(trace) -> tuple:
    if trace.bs_indices is None:
        return ()
    return (trace.bs_indices.tobytes(), trace.ris_indices.tobytes())


def _jitter_biases(state: VQCState, seed: int) -> None:
    """Zero biases and the zero opening state put every rectifier exactly on its kink."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    for name, p in state.params.items():
        if p.value.ndim == 1 and np.all(p.value == 0.0):
            p.value = rng.uniform(-0.5, 0.5, size=p.value.shape)


def episode_gradcheck(state: VQCState | None = None, seed: int = 0, n_episodes: int = 2,
                      tol: float = 1e-4, h: float = 1e-4, codebook_free: bool = False,
                      zero_noise: bool = True) -> GradcheckReport:
    layout, pilot, model = tiny_config()
    if state is None:
        state = new_state(model, seed)
        _jitter_biases(state, seed)
    batch = sample_batch(layout, pilot, model.T, 10.0, seed, 7, range(n_episodes))
    if zero_noise:
        batch.noise = np.zeros_like(batch.noise)
    leaves = state.trainables(codebook_free)
    for p in leaves.values():
        p.zero_grad()
    stopped: list = []
    with ad.freeze_stop_gradients("record", stopped):
        trace, loss = _episode(state, batch, pilot, codebook_free=codebook_free)
    base_sig = _signature(trace)
    ad.backward(loss.total)
    # central-difference roundoff grows like eps * |L| / h, so gradients below
    # this floor are compared in absolute terms
    floor = 1e-7 * max(1.0, abs(float(loss.total.value)))
    rep = GradcheckReport()
    for name in sorted(leaves):
        node = leaves[name]
        analytic = node.grad.copy()
        x = node.value
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = x[i]
            vals, sigs = [], []
            for s in (+h, -h):
                x[i] = old + s
                with ad.freeze_stop_gradients("replay", stopped):
                    tr, ls = _episode(state, batch, pilot, codebook_free=codebook_free)
                vals.append(float(ls.total.value))
                sigs.append(_signature(tr))
            x[i] = old
            if any(sg != base_sig for sg in sigs):
                rep.skipped += 1
                continue
            fd = (vals[0] - vals[1]) / (2 * h)
            err = float(relative_error(fd, analytic[i], floor=floor))
            rep.checked += 1
            if err > rep.max_rel_error:
                rep.max_rel_error, rep.worst = err, f"{name}{list(i)}"
            if err > tol:
                rep.failures.append(f"{name}{list(i)}: fd={fd:.6e} backward={analytic[i]:.6e} rel={err:.2e}")
    if not codebook_free:
        _isolation_checks(state, batch, pilot, rep)
    return rep


def _isolation_checks(state: VQCState, batch, pilot, rep: GradcheckReport) -> None:
    """MSE leaves codebooks untouched; codeword loss reaches only selected columns."""
    leaves = state.trainables()
    for p in leaves.values():
        p.zero_grad()
    trace, loss = _episode(state, batch, pilot)
    ad.backward(loss.mse)
    for key in ("codebook.ris", "codebook.bs"):
        if np.any(leaves[key].grad != 0.0):
            rep.isolation_ok = False
            rep.isolation_notes.append(f"FAIL MSE gradient reaches {key}")
    for p in leaves.values():
        p.zero_grad()
    trace, loss = _episode(state, batch, pilot)
    ad.backward(ad.add(loss.alpha, loss.beta))
    used = {"codebook.bs": set(trace.bs_indices[:, 1:].ravel().tolist()),
            "codebook.ris": set(trace.ris_indices[:, 1:].ravel().tolist())}
    for key, cols in used.items():
        g = leaves[key].grad
        for col in range(g.shape[1]):
            if col not in cols and np.any(g[:, col] != 0.0):
                rep.isolation_ok = False
                rep.isolation_notes.append(f"FAIL codeword loss reaches unselected column {col} of {key}")
    if rep.isolation_ok:
        rep.isolation_notes.append("stop-gradient isolation: bit-exact zeros where required")


@contextlib.contextmanager
def commitment_sign_error():
    """Mutation used to prove the check can fail: flips the commitment gradient."""
    original = cbmod._commitment_term

    def faulty(pre_q, codeword):
        good = original(pre_q, codeword)

        def bw(g):
            return (-good._backward(g)[0],) if good._backward else (None,)
        return ad.Node(good.value, good.parents, bw, op="faulty_commitment")

    cbmod._commitment_term = faulty
    try:
        yield
    finally:
        cbmod._commitment_term = original
