"""Geometry-to-channel pipeline and the uplink pilot measurement.

Conventions
-----------
* Complex channels are numpy ``complex128`` arrays; the autodiff graph only
  sees their real/imaginary parts (see :mod:`vqc.model`).
* Path loss is a linear amplitude ``10**(-PL_dB / 20)`` on the normalized
  channel, with distances in meters.
* Powers are linear watts: the noise floor is -170 dBm/Hz over 10 MHz,
  i.e. -100 dBm = 1e-13 W, and ``P_u = 10**(SNR/10)`` W.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GeometryError(ValueError):
    pass


NOISE_PSD_DBM_HZ = -170.0
BANDWIDTH_HZ = 10e6


def default_noise_power() -> float:
    """Noise power in watts for -170 dBm/Hz over 10 MHz."""
    return 10.0 ** ((NOISE_PSD_DBM_HZ + 10.0 * math.log10(BANDWIDTH_HZ) - 30.0) / 10.0)


@dataclass(frozen=True)
class Position:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise GeometryError(f"non-finite position {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Position":
        a = np.asarray(a, dtype=np.float64).reshape(3)
        return cls(float(a[0]), float(a[1]), float(a[2]))


def _xyz(p) -> np.ndarray:
    if isinstance(p, Position):
        return p.as_array()
    return np.asarray(p, dtype=np.float64).reshape(3)


@dataclass(frozen=True)
class ServiceArea:
    """Axis-aligned rectangle on a horizontal plane."""
    center: tuple[float, float, float]
    half_extents: tuple[float, float]

    @property
    def z(self) -> float:
        return float(self.center[2])

    def bounds(self) -> tuple[float, float, float, float]:
        cx, cy, _ = self.center
        hx, hy = self.half_extents
        return cx - hx, cx + hx, cy - hy, cy + hy

    def contains(self, p) -> bool:
        x, y, _ = _xyz(p)
        x0, x1, y0, y1 = self.bounds()
        return x0 <= x <= x1 and y0 <= y <= y1


@dataclass(frozen=True)
class SystemLayout:
    bs_position: Position
    ris_positions: tuple[Position, ...]
    M: int
    N: int
    C: int
    service_area: ServiceArea
    spacing_ris: float = 1.0
    spacing_bs: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "ris_positions", tuple(self.ris_positions))
        if len(self.ris_positions) < 1:
            raise GeometryError("at least one RIS is required")
        if self.M < 1 or self.N < 1 or self.C < 1:
            raise GeometryError("M, N and C must be positive")
        if self.N % self.C:
            raise GeometryError(f"RIS column count C={self.C} must divide N={self.N}")
        if self.spacing_ris <= 0 or self.spacing_bs <= 0:
            raise GeometryError("spacing factors must be positive")

    @property
    def K(self) -> int:
        return len(self.ris_positions)


@dataclass(frozen=True)
class AngleSet:
    mu_ris: float
    gamma_ris: float
    phi_ris: float
    upsilon_ris: float
    gamma_bs: float
    gamma_ue: float
    r_ur: float
    r_rb: float
    r_ub: float


@dataclass
class ChannelRealization:
    h_d: np.ndarray                 # (M,)
    h_r: list[np.ndarray]           # K x (N,)
    G_r: list[np.ndarray]           # K x (M, N)
    rho: float
    kappa: list[float]
    xi: list[float]
    epsilon: float

    @property
    def K(self) -> int:
        return len(self.h_r)


@dataclass(frozen=True)
class PilotConfig:
    p_u: float
    sigma2: float = field(default_factory=default_noise_power)
    pilot_symbol: complex = 1.0 + 0.0j

    def __post_init__(self):
        if not self.p_u > 0:
            raise ValueError("p_u must be positive")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")

    @classmethod
    def from_snr_db(cls, snr_db: float, **kw) -> "PilotConfig":
        return cls(p_u=10.0 ** (snr_db / 10.0), **kw)


# --------------------------------------------------------------------------- angles

def compute_angles(layout: SystemLayout, ue, k: int) -> AngleSet:
    ue = _xyz(ue)
    ris = layout.ris_positions[k].as_array()
    bs = layout.bs_position.as_array()

    d_ur = ue - ris
    r_ur = float(np.linalg.norm(d_ur))
    d_rb = ris - bs
    r_rb = float(np.linalg.norm(d_rb))
    d_ub = ue - bs
    r_ub = float(np.linalg.norm(d_ub))
    if r_ur == 0.0 or r_rb == 0.0 or r_ub == 0.0:
        raise GeometryError("degenerate geometry: zero range between nodes")

    # UE seen from the RIS: cos(gamma) is measured against the downward offset
    gamma_ris = math.acos(np.clip(-d_ur[2] / r_ur, -1.0, 1.0))
    mu_ris = math.atan2(d_ur[1], d_ur[0])
    # RIS seen from the BS
    upsilon_ris = math.acos(np.clip(d_rb[2] / r_rb, -1.0, 1.0))
    phi_ris = math.atan2(d_rb[1], d_rb[0])
    gamma_bs = math.asin(np.clip(d_rb[2] / r_rb, -1.0, 1.0))
    gamma_ue = math.asin(np.clip(d_ub[2] / r_ub, -1.0, 1.0))
    return AngleSet(mu_ris, gamma_ris, phi_ris, upsilon_ris, gamma_bs, gamma_ue, r_ur, r_rb, r_ub)


# --------------------------------------------------------------------------- steering

def ris_steering(mu: float, gamma: float, N: int, C: int, spacing: float = 1.0) -> np.ndarray:
    if N % C:
        raise GeometryError(f"C={C} must divide N={N}")
    n = np.arange(N)
    v1 = n % C
    v2 = n // C
    phase = spacing * (v1 * math.sin(mu) * math.cos(gamma) + v2 * math.sin(gamma))
    return np.exp(1j * phase)


def bs_steering(gamma: float, M: int, spacing: float = 1.0) -> np.ndarray:
    if M < 1:
        raise GeometryError("M must be at least 1")
    return np.exp(1j * spacing * np.arange(M) * math.cos(gamma))


def path_loss_db(kind: str, distance: float) -> float:
    if not distance > 0:
        raise GeometryError(f"distance must be positive, got {distance}")
    if kind == "direct":
        return 32.6 + 36.7 * math.log10(distance)
    if kind == "reflected":
        return 30.0 + 22.0 * math.log10(distance)
    raise ValueError(f"unknown path kind {kind!r}")


def path_loss_amplitude(kind: str, distance: float) -> float:
    return 10.0 ** (-path_loss_db(kind, distance) / 20.0)


# --------------------------------------------------------------------------- channels

def _los_parts(layout: SystemLayout, ue):
    """Unit-gain LOS vectors and path-loss amplitudes for every link."""
    hd_los = None
    rho = None
    hr_los, g_los, kappa, xi = [], [], [], []
    for k in range(layout.K):
        a = compute_angles(layout, ue, k)
        if hd_los is None:
            hd_los = bs_steering(a.gamma_ue, layout.M, layout.spacing_bs)
            rho = path_loss_amplitude("direct", a.r_ub)
        hr_los.append(ris_steering(a.mu_ris, a.gamma_ris, layout.N, layout.C, layout.spacing_ris))
        u_ris = ris_steering(a.phi_ris, a.upsilon_ris, layout.N, layout.C, layout.spacing_ris)
        g_los.append(np.outer(bs_steering(a.gamma_bs, layout.M, layout.spacing_bs), u_ris.conj()))
        kappa.append(path_loss_amplitude("reflected", a.r_ur))
        xi.append(path_loss_amplitude("reflected", a.r_rb))
    return hd_los, hr_los, g_los, rho, kappa, xi


def _cn(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def rician_weights(epsilon: float) -> tuple[float, float]:
    if math.isinf(epsilon):
        return 1.0, 0.0
    return math.sqrt(epsilon / (1.0 + epsilon)), math.sqrt(1.0 / (1.0 + epsilon))


def sample_channel(layout: SystemLayout, ue, epsilon: float, rng: np.random.Generator) -> ChannelRealization:
    hd_los, hr_los, g_los, rho, kappa, xi = _los_parts(layout, ue)
    w_los, w_nlos = rician_weights(epsilon)
    M, N = layout.M, layout.N
    h_d = rho * (w_los * hd_los + w_nlos * _cn(rng, M))
    h_r, G_r = [], []
    for k in range(layout.K):
        h_r.append(kappa[k] * (w_los * hr_los[k] + w_nlos * _cn(rng, N)))
        G_r.append(xi[k] * (w_los * g_los[k] + w_nlos * _cn(rng, (M, N))))
    return ChannelRealization(h_d, h_r, G_r, rho, kappa, xi, epsilon)


def los_channel(layout: SystemLayout, ue) -> ChannelRealization:
    """Deterministic channel in the infinite-Rician-factor limit."""
    hd_los, hr_los, g_los, rho, kappa, xi = _los_parts(layout, ue)
    return ChannelRealization(rho * hd_los, [kappa[k] * hr_los[k] for k in range(layout.K)],
                              [xi[k] * g_los[k] for k in range(layout.K)], rho, kappa, xi, math.inf)


def cascade_channel(h_r: np.ndarray, G_r: np.ndarray) -> np.ndarray:
    """diag(h_r) @ G_r.T, shape (N, M)."""
    h_r = np.asarray(h_r)
    G_r = np.asarray(G_r)
    if h_r.ndim != 1 or G_r.ndim != 2 or G_r.shape[1] != h_r.shape[0]:
        raise GeometryError(f"cascade shapes disagree: h_r {h_r.shape}, G_r {G_r.shape}")
    return h_r[:, None] * G_r.T


def effective_channel(ch: ChannelRealization, thetas: Sequence[np.ndarray]) -> np.ndarray:
    """h_d + sum_k H_ck^T theta_k, the M-vector seen by the BS combiner."""
    if len(thetas) != ch.K:
        raise GeometryError(f"expected {ch.K} RIS configurations, got {len(thetas)}")
    g = np.array(ch.h_d, dtype=np.complex128)
    for h_r, G_r, th in zip(ch.h_r, ch.G_r, thetas):
        th = np.asarray(th)
        if th.shape != h_r.shape:
            raise GeometryError(f"theta shape {th.shape} != {h_r.shape}")
        g = g + cascade_channel(h_r, G_r).T @ th
    return g


def measure_pilot(ch: ChannelRealization, w: np.ndarray, thetas: Sequence[np.ndarray],
                  cfg: PilotConfig, noise: complex = 0.0) -> complex:
    w = np.asarray(w)
    if w.shape != ch.h_d.shape:
        raise GeometryError(f"beamformer shape {w.shape} != {ch.h_d.shape}")
    g = effective_channel(ch, thetas)
    return complex(math.sqrt(cfg.p_u) * (w @ g) * cfg.pilot_symbol + noise)


def draw_noise(rng: np.random.Generator, sigma2: float, T: int) -> np.ndarray:
    return math.sqrt(sigma2) * _cn(rng, T)


# --------------------------------------------------------------------------- radio maps

def grid_centers(area: ServiceArea, resolution: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    x0, x1, y0, y1 = area.bounds()
    nx = int(round((x1 - x0) / resolution))
    ny = int(round((y1 - y0) / resolution))
    if nx < 1 or ny < 1:
        raise GeometryError("empty radio-map grid")
    xs = x0 + resolution * (np.arange(nx) + 0.5)
    ys = y0 + resolution * (np.arange(ny) + 0.5)
    return xs, ys


def field_map(layout: SystemLayout, w: np.ndarray, thetas: Sequence[np.ndarray], cfg: PilotConfig,
              area: ServiceArea | None = None, resolution: float = 1.0,
              ris_subset: Sequence[int] | None = None, include_direct: bool = True) -> np.ndarray:
    """Complex noiseless received field per grid cell under the LOS channel.

    Rows index x cells, columns index y cells.  ``ris_subset`` limits which
    reflected paths contribute.
    """
    area = area or layout.service_area
    xs, ys = grid_centers(area, resolution)
    subset = range(layout.K) if ris_subset is None else list(ris_subset)
    w = np.asarray(w)
    scale = math.sqrt(cfg.p_u) * cfg.pilot_symbol
    out = np.zeros((len(xs), len(ys)), dtype=np.complex128)
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            ch = los_channel(layout, (x, y, area.z))
            g = ch.h_d.copy() if include_direct else np.zeros(layout.M, dtype=np.complex128)
            for k in subset:
                g = g + cascade_channel(ch.h_r[k], ch.G_r[k]).T @ thetas[k]
            out[i, j] = scale * (w @ g)
    return out


def rss_map(layout: SystemLayout, w: np.ndarray, thetas: Sequence[np.ndarray], cfg: PilotConfig,
            area: ServiceArea | None = None, resolution: float = 1.0,
            ris_subset: Sequence[int] | None = None, include_direct: bool = True) -> np.ndarray:
    return np.abs(field_map(layout, w, thetas, cfg, area, resolution, ris_subset, include_direct)) ** 2
