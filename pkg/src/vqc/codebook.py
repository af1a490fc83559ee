"""Trainable unit-modulus codebooks and straight-through vector quantization.

A codeword of E complex elements is stored as a real column of length 2E,
real parts first, then imaginary parts.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad

ZERO_MODULUS = 1e-12
# pairs already this close to unit modulus are left untouched by projection
FEASIBLE_TOL = 1e-12


@dataclass
class Codebook:
    table: ad.Node          # (2E, W)
    trainable: bool = True

    @property
    def E(self) -> int:
        return self.table.shape[0] // 2

    @property
    def W(self) -> int:
        return self.table.shape[1]

    @property
    def entries(self) -> np.ndarray:
        return self.table.value

    def complex_columns(self) -> np.ndarray:
        return to_complex(self.table.value.T).T


@dataclass(frozen=True)
class SelectionRecord:
    ris_indices: tuple[int, ...]
    bs_index: int
    frame: int


def to_complex(v: np.ndarray) -> np.ndarray:
    """(..., 2E) real -> (..., E) complex."""
    v = np.asarray(v)
    E = v.shape[-1] // 2
    return v[..., :E] + 1j * v[..., E:]


def to_real(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    return np.concatenate([z.real, z.imag], axis=-1)


def normalize_unit_modulus(v: np.ndarray, return_flags: bool = False):
    """Scale each (re, im) pair onto the unit circle along the last axis.

    Pairs with modulus below 1e-12 have no direction and become (1, 0); the
    returned flag array marks them.
    """
    v = np.asarray(v, dtype=np.float64)
    E = v.shape[-1] // 2
    re, im = v[..., :E], v[..., E:]
    mag = np.sqrt(re ** 2 + im ** 2)
    flags = mag < ZERO_MODULUS
    safe = np.where(flags, 1.0, mag)
    out = np.concatenate([np.where(flags, 1.0, re / safe), np.where(flags, 0.0, im / safe)], axis=-1)
    return (out, flags) if return_flags else out


def unit_modulus(x: ad.Node) -> ad.Node:
    """Differentiable NORM over the last axis of an (n, 2E) node."""
    x = ad.as_node(x)
    E = x.shape[-1] // 2
    a, b = x.value[..., :E], x.value[..., E:]
    r2 = a ** 2 + b ** 2
    r = np.sqrt(r2)
    flags = r < ZERO_MODULUS
    safe = np.where(flags, 1.0, r)
    u = np.where(flags, 1.0, a / safe)
    v = np.where(flags, 0.0, b / safe)
    inv_r3 = np.where(flags, 0.0, 1.0 / safe ** 3)

    def bw(g):
        gu, gv = g[..., :E], g[..., E:]
        ga = (gu * b * b - gv * a * b) * inv_r3
        gb = (-gu * a * b + gv * a * a) * inv_r3
        return (np.concatenate([ga, gb], axis=-1),)
    return ad._make(np.concatenate([u, v], axis=-1), (x,), bw, "unit_modulus")


def init_codebook(E: int, W: int, rng: np.random.Generator, trainable: bool = True) -> Codebook:
    """CN(0, 2*pi) entries, then projected onto the unit circle."""
    if E < 1 or W < 1:
        raise ValueError("codebook dimensions must be positive")
    std = math.sqrt(math.pi)   # per real component, total variance 2*pi
    raw = std * rng.standard_normal((2 * E, W))
    table = normalize_unit_modulus(raw.T).T.copy()
    return Codebook(ad.parameter(table) if trainable else ad.constant(table), trainable)


def project_codebook(cb: Codebook) -> Codebook:
    """Re-impose unit modulus on every column, in place; idempotent."""
    cols = cb.table.value.T
    E = cb.E
    mag2 = cols[:, :E] ** 2 + cols[:, E:] ** 2
    if np.all(np.abs(mag2 - 1.0) <= FEASIBLE_TOL):
        return cb
    bad = np.abs(mag2 - 1.0) > FEASIBLE_TOL
    fixed = normalize_unit_modulus(cols)
    mask = np.concatenate([bad, bad], axis=1)
    cb.table.value[...] = np.where(mask, fixed, cols).T
    return cb


def max_modulus_error(v: np.ndarray) -> float:
    """Largest | |z| - 1 | over complex pairs on the last axis."""
    z = to_complex(v)
    return float(np.max(np.abs(np.abs(z) - 1.0))) if z.size else 0.0


def squared_distances(queries: np.ndarray, table: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Exact ||q_i - c_w||^2 via explicit differences, shape (n, W)."""
    queries = np.atleast_2d(queries)
    out = np.empty((queries.shape[0], table.shape[1]))
    for s in range(0, queries.shape[0], chunk):
        q = queries[s:s + chunk]
        out[s:s + chunk] = ((q[:, :, None] - table[None, :, :]) ** 2).sum(axis=1)
    return out


def nearest_indices(queries: np.ndarray, table: np.ndarray) -> np.ndarray:
    # np.argmin returns the first minimum, so ties resolve to the smallest index
    return np.argmin(squared_distances(queries, table), axis=1)


def nearest_codeword(query: np.ndarray, cb: Codebook) -> tuple[int, np.ndarray]:
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (cb.table.shape[0],):
        raise ValueError(f"query length {query.shape} does not match codebook rows {cb.table.shape[0]}")
    idx = int(nearest_indices(query[None, :], cb.table.value)[0])
    return idx, cb.table.value[:, idx].copy()


def _codeword_term(pre_q: ad.Node, codeword: ad.Node) -> ad.Node:
    return ad.sum(ad.square(ad.sub(ad.stop_gradient(pre_q), codeword)), axis=1)


def _commitment_term(pre_q: ad.Node, codeword: ad.Node) -> ad.Node:
    return ad.sum(ad.square(ad.sub(pre_q, ad.stop_gradient(codeword))), axis=1)


@dataclass
class Selection:
    selected: ad.Node       # forward value: the codeword; backward: copied to pre_q
    indices: np.ndarray
    codeword_loss: ad.Node  # (n,)
    commitment_loss: ad.Node  # (n,)

    def loss(self, commitment_weight: float = 1.0) -> ad.Node:
        return ad.add(self.codeword_loss, ad.mul(self.commitment_loss, commitment_weight))


def straight_through_select(pre_q: ad.Node, cb: Codebook) -> Selection:
    """Quantize each row of ``pre_q`` (n, 2E) to its nearest column of ``cb``.

    ``selected = pre_q + SG(codeword - pre_q)``: the forward value is the
    codeword and the gradient passes to ``pre_q`` unchanged.
    """
    pre_q = ad.as_node(pre_q)
    if pre_q.value.ndim != 2 or pre_q.shape[1] != cb.table.shape[0]:
        raise ad.ShapeError(f"pre-quantized shape {pre_q.shape} vs codebook rows {cb.table.shape[0]}")
    idx = nearest_indices(pre_q.value, cb.table.value)
    codeword = ad.take_columns(cb.table, idx)
    selected = ad.add(pre_q, ad.stop_gradient(ad.sub(codeword, pre_q)))
    # the forward value must be the stored column bit for bit, not pre_q + (c - pre_q);
    # a finite-difference replay wants the surrogate pre_q + frozen offset instead
    if not ad.replaying_stop_gradients():
        selected.value = codeword.value.copy()
    return Selection(selected, idx, _codeword_term(pre_q, codeword), _commitment_term(pre_q, codeword))


def export_csv(cb: Codebook, path) -> None:
    """One codeword per column; rows are the 2E real values."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        for row in cb.table.value:
            w.writerow([repr(float(v)) for v in row])


def import_csv(path, trainable: bool = True) -> Codebook:
    with Path(path).open(newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    table = np.array(rows, dtype=np.float64)
    return Codebook(ad.parameter(table) if trainable else ad.constant(table), trainable)
