"""
Focal-plane array model: pixel grid, per-pixel signal integration, frame
rendering with coherence-slot fading and thermal noise, and random scene
generation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import optics
from .errors import ConfigError, DomainError
from .optics import BeamParams, LensConfig, LinkGeometry, TurbulenceParams

# Spots deposit energy only within this many sigma of their centre.
RENDER_CUTOFF_SIGMAS = 6.0


@dataclass(frozen=True)
class SensorConfig:
    nx: int = 64
    ny: int = 64
    pitch_dx: float = 0.03 / 64
    pitch_dy: float = 0.03 / 64
    origin_xmin: float = -0.015
    origin_ymin: float = -0.015
    plane_z: float = 0.03

    def __post_init__(self):
        if self.nx < 1:
            raise ConfigError("nx must be >= 1", key="sensor.nx")
        if self.ny < 1:
            raise ConfigError("ny must be >= 1", key="sensor.ny")
        if not (self.pitch_dx > 0 and self.pitch_dy > 0):
            raise ConfigError("pixel pitches must be positive", key="sensor.pitch")
        if not self.plane_z > 0:
            raise ConfigError("sensor plane distance must be positive", key="sensor.plane_z")

    @classmethod
    def centered(cls, nx, ny=None, width=0.03, height=None, plane_z=0.03):
        """Centred sensor of physical size ``width`` x ``height`` split into nx x ny pixels."""
        ny = nx if ny is None else ny
        height = width if height is None else height
        return cls(
            nx=nx,
            ny=ny,
            pitch_dx=width / nx,
            pitch_dy=height / ny,
            origin_xmin=-width / 2,
            origin_ymin=-height / 2,
            plane_z=plane_z,
        )

    @property
    def width(self) -> float:
        return self.nx * self.pitch_dx

    @property
    def height(self) -> float:
        return self.ny * self.pitch_dy

    @property
    def half_widths(self) -> tuple[float, float]:
        return self.width / 2, self.height / 2

    @property
    def x_edges(self) -> np.ndarray:
        return self.origin_xmin + self.pitch_dx * np.arange(self.nx + 1)

    @property
    def y_edges(self) -> np.ndarray:
        return self.origin_ymin + self.pitch_dy * np.arange(self.ny + 1)

    @property
    def x_centers(self) -> np.ndarray:
        return self.origin_xmin + self.pitch_dx * (np.arange(self.nx) + 0.5)

    @property
    def y_centers(self) -> np.ndarray:
        return self.origin_ymin + self.pitch_dy * (np.arange(self.ny) + 0.5)

    def contains(self, point) -> bool:
        x, y = point
        return (
            self.origin_xmin <= x <= self.origin_xmin + self.width
            and self.origin_ymin <= y <= self.origin_ymin + self.height
        )

    def pixel_of(self, point) -> tuple[int, int]:
        """(m, n) index of the pixel containing ``point`` (clamped to the grid)."""
        m = int(np.clip(math.floor((point[0] - self.origin_xmin) / self.pitch_dx), 0, self.nx - 1))
        n = int(np.clip(math.floor((point[1] - self.origin_ymin) / self.pitch_dy), 0, self.ny - 1))
        return m, n


@dataclass(frozen=True)
class AcquisitionConfig:
    t_int: float = 1.0
    t_coh: float = 0.01
    noise_n0: float = 1e-12
    noise_scale: float = 1.0
    # False keeps one jitter draw for the whole frame.
    jitter_per_slot: bool = True

    def __post_init__(self):
        if not self.t_int > 0:
            raise ConfigError("t_int must be positive", key="acq.t_int")
        if not self.t_coh > 0:
            raise ConfigError("t_coh must be positive", key="acq.t_coh")
        if self.noise_n0 < 0:
            raise ConfigError("noise_n0 must be >= 0", key="acq.noise_n0")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0", key="acq.noise_scale")
        if self.slots < 1:
            raise ConfigError("t_int / t_coh must round to at least one slot", key="acq.t_coh")

    @property
    def slots(self) -> int:
        return int(round(self.t_int / self.t_coh))

    @property
    def noise_variance(self) -> float:
        return self.noise_n0 * self.noise_scale


@dataclass
class Transmitter:
    true_position: tuple[float, float]
    beam: BeamParams = field(default_factory=BeamParams)
    legitimate: bool = True
    claimed_position: tuple[float, float] | None = None

    def __post_init__(self):
        if self.legitimate and self.claimed_position is None:
            raise ConfigError("legitimate transmitter needs a claimed position")
        if not self.legitimate and self.claimed_position is not None:
            raise ConfigError("eavesdropper cannot carry a claimed position")


@dataclass
class Scene:
    transmitters: list[Transmitter]
    uav_altitude_hu: float = 300.0
    area_half_widths: tuple[float, float] = (125.0, 125.0)

    def __post_init__(self):
        hx, hy = self.area_half_widths
        for t in self.transmitters:
            x, y = t.true_position
            if abs(x) > hx or abs(y) > hy:
                raise ConfigError(f"transmitter at {t.true_position} lies outside the area")

    @property
    def n_legitimate(self) -> int:
        return sum(t.legitimate for t in self.transmitters)

    @property
    def n_eavesdroppers(self) -> int:
        return len(self.transmitters) - self.n_legitimate

    def true_positions(self) -> np.ndarray:
        return np.array([t.true_position for t in self.transmitters], dtype=float).reshape(-1, 2)

    def claims(self) -> list[tuple[int, tuple[float, float]]]:
        return [
            (i, t.claimed_position) for i, t in enumerate(self.transmitters) if t.legitimate
        ]

    def sensor_points(self, z: float) -> np.ndarray:
        hu = self.uav_altitude_hu
        theta = np.arctan(self.true_positions() / hu)
        return optics.angle_to_sensor(theta, z)


@dataclass
class Frame:
    pixels: np.ndarray
    sensor: SensorConfig
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.shape != (self.sensor.ny, self.sensor.nx):
            raise ConfigError(
                f"frame shape {self.pixels.shape} does not match sensor "
                f"({self.sensor.ny}, {self.sensor.nx})"
            )


# ---------------------------------------------------------------------------
# pixel geometry and signal


def pixel_bounds(m: int, n: int, sensor: SensorConfig) -> tuple[float, float, float, float]:
    if not (0 <= m < sensor.nx and 0 <= n < sensor.ny):
        raise IndexError(f"pixel ({m}, {n}) outside a {sensor.nx}x{sensor.ny} grid")
    x_lo = sensor.origin_xmin + m * sensor.pitch_dx
    y_lo = sensor.origin_ymin + n * sensor.pitch_dy
    return x_lo, sensor.origin_xmin + (m + 1) * sensor.pitch_dx, y_lo, sensor.origin_ymin + (
        n + 1
    ) * sensor.pitch_dy


def pixel_contribution(spot_center, spot_energy: float, sigma: float, rect) -> float:
    """Energy a Gaussian spot deposits in the rectangle ``(x-, x+, y-, y+)``.

    Uses the energy-conserving form: the pixel integral of a unit-volume
    Gaussian is the product of the two CDF differences, so summing over a
    tiling recovers ``spot_energy``.
    """
    if not sigma > 0:
        raise DomainError(f"spot sigma must be positive, got {sigma}")
    x0, y0 = spot_center
    x_lo, x_hi, y_lo, y_hi = rect
    fx = ndtr((x_hi - x0) / sigma) - ndtr((x_lo - x0) / sigma)
    fy = ndtr((y_hi - y0) / sigma) - ndtr((y_lo - y0) / sigma)
    return spot_energy * fx * fy


def spot_profile(center, sigma: float, sensor: SensorConfig, cutoff=RENDER_CUTOFF_SIGMAS):
    """Fraction of a unit-energy Gaussian spot landing in each pixel, shape (ny, nx)."""
    if not sigma > 0:
        raise DomainError(f"spot sigma must be positive, got {sigma}")
    x0, y0 = center
    px = _axis_fractions(sensor.x_edges, x0, sigma, cutoff)
    py = _axis_fractions(sensor.y_edges, y0, sigma, cutoff)
    return np.outer(py, px)


def _axis_fractions(edges, c, sigma, cutoff):
    cdf = ndtr((edges - c) / sigma)
    frac = np.diff(cdf)
    if cutoff is not None:
        centers = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 * (edges[1] - edges[0])
        frac[np.abs(centers - c) > cutoff * sigma + half] = 0.0
    return frac


# ---------------------------------------------------------------------------
# rendering


def slot_energies(
    tx: Transmitter,
    hu: float,
    lens: LensConfig,
    acq: AcquisitionConfig,
    rng: np.random.Generator,
    turbulence: TurbulenceParams | None,
) -> np.ndarray:
    """Per-slot deposited energy T_int * eta_s * P_L for one transmitter, shape (K,)."""
    K = acq.slots
    beam = tx.beam
    geom = LinkGeometry(tuple(tx.true_position), hu)
    fades = np.ones(K) if turbulence is None else optics.sample_turbulence(turbulence, rng, K)
    if beam.jitter_sigma_p > 0:
        n_jit = K if acq.jitter_per_slot else 1
        offsets = rng.normal(beam.jitter_mu_p, beam.jitter_sigma_p, size=(n_jit, 2))
    else:
        offsets = np.full((1, 2), beam.jitter_mu_p)
    p_lens = optics.collected_power(beam, geom, lens, offsets, fade=fades)
    return acq.t_int * lens.sensor_efficiency_eta_s * np.broadcast_to(p_lens, (K,))


def render_frame(
    scene: Scene,
    lens: LensConfig,
    sensor: SensorConfig,
    acq: AcquisitionConfig,
    rng: np.random.Generator,
    turbulence: TurbulenceParams | None = TurbulenceParams(),
    metadata: dict | None = None,
) -> Frame:
    """Render one integration period.

    Each coherence slot draws a fresh fade and jitter offset per transmitter.
    Spot position and shape do not depend on either, so the average of the
    K slot frames equals each spot profile scaled by its slot-averaged energy,
    which is how it is computed. Noise ``N(0, N0 * scale)`` is added once.
    ``turbulence=None`` fixes every fade to 1.
    """
    z = sensor.plane_z
    sigma = optics.blur_sigma_eff(lens, z).sigma_eff
    points = scene.sensor_points(z)
    pixels = np.zeros((sensor.ny, sensor.nx))
    energies = []
    for tx, pt in zip(scene.transmitters, points):
        e = slot_energies(tx, scene.uav_altitude_hu, lens, acq, rng, turbulence).mean()
        energies.append(e)
        pixels += e * spot_profile(pt, sigma, sensor)
    if acq.noise_variance > 0:
        pixels += rng.normal(0.0, math.sqrt(acq.noise_variance), size=pixels.shape)
    meta = {
        "sigma_eff": sigma,
        "truth_points": points,
        "energies": np.asarray(energies),
    }
    meta.update(metadata or {})
    return Frame(pixels=pixels, sensor=sensor, metadata=meta)


# ---------------------------------------------------------------------------
# scene generation


@dataclass(frozen=True)
class SceneConfig:
    n_choices: tuple[int, ...] = (5, 6, 7, 8, 9)
    eavesdropper_fraction: float = 0.2
    # Overrides the fraction with an exact eavesdropper count when set.
    n_eavesdroppers: int | None = None
    area_half_widths: tuple[float, float] = (125.0, 125.0)
    uav_altitude_hu: float = 300.0
    claim_noise_std: float = 0.0
    # Minimum pairwise ground distance; 0 disables the constraint.
    min_separation: float = 0.0
    beam: BeamParams = field(default_factory=BeamParams)

    def __post_init__(self):
        if len(self.n_choices) == 0:
            raise ConfigError("scene needs at least one transmitter count", key="scene.n_choices")
        if min(self.n_choices) < 1:
            raise ConfigError("transmitter counts must be >= 1", key="scene.n_choices")
        if not 0 <= self.eavesdropper_fraction <= 1:
            raise ConfigError(
                "eavesdropper fraction must lie in [0, 1]", key="scene.eavesdropper_fraction"
            )
        if self.n_eavesdroppers is not None and self.n_eavesdroppers > min(self.n_choices):
            raise ConfigError(
                "n_eavesdroppers exceeds the smallest transmitter count",
                key="scene.n_eavesdroppers",
            )
        if not self.uav_altitude_hu > 0:
            raise ConfigError("UAV altitude must be positive", key="scene.uav_altitude_hu")
        if self.claim_noise_std < 0:
            raise ConfigError("claim noise must be >= 0", key="scene.claim_noise_std")
        if self.min_separation < 0:
            raise ConfigError("min separation must be >= 0", key="scene.min_separation")


def _sample_positions(rng, n, half_widths, min_sep, max_tries=10_000):
    hw = np.asarray(half_widths, dtype=float)
    if min_sep <= 0:
        return rng.uniform(-hw, hw, size=(n, 2))
    pts = []
    for _ in range(max_tries):
        cand = rng.uniform(-hw, hw)
        if all(np.hypot(*(cand - p)) >= min_sep for p in pts):
            pts.append(cand)
            if len(pts) == n:
                return np.array(pts)
    raise ConfigError(
        f"could not place {n} transmitters {min_sep} m apart", key="scene.min_separation"
    )


def generate_scene(rng: np.random.Generator, cfg: SceneConfig = SceneConfig()) -> Scene:
    n = int(rng.choice(cfg.n_choices))
    if cfg.n_eavesdroppers is not None:
        n_e = cfg.n_eavesdroppers
    else:
        n_e = int(rng.binomial(n, cfg.eavesdropper_fraction))
    positions = _sample_positions(rng, n, cfg.area_half_widths, cfg.min_separation)
    is_eve = np.zeros(n, dtype=bool)
    is_eve[rng.choice(n, size=n_e, replace=False)] = True
    txs = []
    for pos, eve in zip(positions, is_eve):
        pos = (float(pos[0]), float(pos[1]))
        claim = None
        if not eve:
            noise = rng.normal(0.0, cfg.claim_noise_std, 2) if cfg.claim_noise_std > 0 else (0, 0)
            claim = (pos[0] + float(noise[0]), pos[1] + float(noise[1]))
        txs.append(Transmitter(pos, cfg.beam, legitimate=not eve, claimed_position=claim))
    return Scene(txs, cfg.uav_altitude_hu, cfg.area_half_widths)
