"""
Radiometric and geometric forward-model primitives.

Turbulence fading, Gaussian beam irradiance at the lens, collected lens
power, the tangent mapping from incidence angles to the sensor plane, the
angular coverage of a finite sensor, and the on-sensor blur budget.

Everything here is a pure function of its arguments. Random draws take an
explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ConfigError, DomainError

# w_z / r_a below this and the flat-irradiance approximation across the lens
# is no longer good to ~2 %.
FLAT_FIELD_MIN_RATIO = 5.0


@dataclass(frozen=True)
class TurbulenceParams:
    alpha: float = 4.0
    beta: float = 2.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ConfigError(
                f"turbulence shapes must be positive, got alpha={self.alpha}, beta={self.beta}",
                key="turbulence",
            )

    @property
    def scintillation_index(self) -> float:
        return (1 + 1 / self.alpha) * (1 + 1 / self.beta) - 1


@dataclass(frozen=True)
class LensConfig:
    radius_ra: float = 0.05
    transmission_tau: float = 0.9
    focal_length_f: float = 0.03
    sensor_efficiency_eta_s: float = 0.9
    sigma_diff0: float = 8e-3
    sigma_sens: float = 0.0

    def __post_init__(self):
        if not self.radius_ra > 0:
            raise ConfigError("lens radius must be positive", key="lens.radius_ra")
        if not 0 < self.transmission_tau <= 1:
            raise ConfigError("lens transmission must lie in (0, 1]", key="lens.transmission_tau")
        if not self.focal_length_f > 0:
            raise ConfigError("focal length must be positive", key="lens.focal_length_f")
        if not 0 < self.sensor_efficiency_eta_s <= 1:
            raise ConfigError(
                "sensor efficiency must lie in (0, 1]", key="lens.sensor_efficiency_eta_s"
            )
        if self.sigma_diff0 < 0:
            raise ConfigError("sigma_diff0 must be >= 0", key="lens.sigma_diff0")
        if self.sigma_sens < 0:
            raise ConfigError("sigma_sens must be >= 0", key="lens.sigma_sens")

    @property
    def aperture_diameter(self) -> float:
        return 2.0 * self.radius_ra


@dataclass(frozen=True)
class BeamParams:
    """Residual interrogator beam as seen at the UAV.

    ``beam_radius_wz`` is the Gaussian radius at the link distance, so the
    transmitter divergence is folded into it.
    """

    tx_power_P: float = 1.0
    beam_radius_wz: float = 0.6
    jitter_mu_p: float = 0.0
    jitter_sigma_p: float = 0.1
    attenuation_kappa: float = 0.001

    def __post_init__(self):
        if not self.tx_power_P > 0:
            raise ConfigError("transmit power must be positive", key="beam.tx_power_P")
        if not self.beam_radius_wz > 0:
            raise ConfigError("beam radius must be positive", key="beam.beam_radius_wz")
        if self.jitter_sigma_p < 0:
            raise ConfigError("jitter std must be >= 0", key="beam.jitter_sigma_p")
        if self.attenuation_kappa < 0:
            raise ConfigError("attenuation must be >= 0", key="beam.attenuation_kappa")


def check_flat_field(beam: BeamParams, lens: LensConfig) -> None:
    ratio = beam.beam_radius_wz / lens.radius_ra
    if ratio < FLAT_FIELD_MIN_RATIO:
        raise ConfigError(
            f"beam radius / lens radius = {ratio:.3g} < {FLAT_FIELD_MIN_RATIO}; "
            "flat irradiance over the aperture does not hold",
            key="beam.beam_radius_wz",
        )


@dataclass(frozen=True)
class LinkGeometry:
    ground_position_p: tuple[float, float]
    uav_altitude_hu: float

    def __post_init__(self):
        if not self.uav_altitude_hu > 0:
            raise ConfigError("UAV altitude must be positive", key="scene.uav_altitude_hu")

    @property
    def link_length_L(self) -> float:
        px, py = self.ground_position_p
        return math.sqrt(self.uav_altitude_hu**2 + px**2 + py**2)

    @property
    def angles_theta(self) -> tuple[float, float]:
        px, py = self.ground_position_p
        return math.atan(px / self.uav_altitude_hu), math.atan(py / self.uav_altitude_hu)

    @property
    def incidence_theta(self) -> float:
        tx, ty = self.angles_theta
        return math.hypot(tx, ty)

    @property
    def polar_angle(self) -> float:
        """Exact angle between the link and the lens normal."""
        return math.acos(self.uav_altitude_hu / self.link_length_L)


# ---------------------------------------------------------------------------
# turbulence


def sample_turbulence(params: TurbulenceParams, rng: np.random.Generator, size=None):
    """Gamma-Gamma fade as the product of two unit-mean Gamma variates."""
    a, b = params.alpha, params.beta
    x = rng.gamma(a, 1.0 / a, size=size)
    y = rng.gamma(b, 1.0 / b, size=size)
    return x * y


def turbulence_density(rho, params: TurbulenceParams):
    """Gamma-Gamma probability density, evaluated in log space for stability."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise DomainError("Gamma-Gamma density is defined for rho > 0 only")
    a, b = params.alpha, params.beta
    half = 0.5 * (a + b)
    arg = 2.0 * np.sqrt(a * b * rho)
    # kve(v, x) = kv(v, x) * exp(x)
    log_f = (
        math.log(2.0)
        + half * math.log(a * b)
        - special.gammaln(a)
        - special.gammaln(b)
        + (half - 1.0) * np.log(rho)
        + np.log(special.kve(a - b, arg))
        - arg
    )
    out = np.exp(log_f)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# radiometry


def path_gain(kappa: float, L: float) -> float:
    if kappa < 0 or L < 0:
        raise DomainError(f"path_gain needs kappa >= 0 and L >= 0, got {kappa}, {L}")
    return math.exp(-kappa * L)


def irradiance_at(r, beam: BeamParams, offset_rp, fade: float = 1.0, gain: float = 1.0):
    """Irradiance (W/m^2) of the shifted Gaussian beam at lens-plane point(s) ``r``."""
    r = np.asarray(r, dtype=float)
    d2 = np.sum((r - np.asarray(offset_rp, dtype=float)) ** 2, axis=-1)
    w2 = beam.beam_radius_wz**2
    out = fade * gain * (2.0 * beam.tx_power_P / (math.pi * w2)) * np.exp(-2.0 * d2 / w2)
    return float(out) if np.ndim(out) == 0 else out


def collected_power(beam: BeamParams, geom: LinkGeometry, lens: LensConfig, offset_rp, fade=1.0):
    """Optical power through the lens under the flat-field approximation.

    ``offset_rp`` may be a single (2,) offset or an (..., 2) stack; ``fade``
    broadcasts against the leading dimensions.
    """
    check_flat_field(beam, lens)
    g = path_gain(beam.attenuation_kappa, geom.link_length_L)
    peak = irradiance_at(offset_rp, beam, (0.0, 0.0), fade=fade, gain=g)
    return lens.transmission_tau * peak * (math.pi * lens.radius_ra**2) * math.cos(
        geom.incidence_theta
    )


# ---------------------------------------------------------------------------
# geometry


def angle_to_sensor(theta, z: float):
    """Sensor-plane point(s) of a plane wave with incidence angles ``theta``."""
    theta = np.asarray(theta, dtype=float)
    if np.any(np.abs(theta) >= math.pi / 2):
        raise DomainError("incidence angles must satisfy |theta| < pi/2")
    if not z > 0:
        raise DomainError(f"sensor distance must be positive, got {z}")
    return z * np.tan(theta)


def fov_limits(sensor_half_widths, z: float) -> tuple[float, float]:
    if not z > 0:
        raise DomainError(f"sensor distance must be positive, got {z}")
    xm, ym = sensor_half_widths
    if not (xm > 0 and ym > 0):
        raise DomainError("sensor half-widths must be positive")
    return math.atan(xm / z), math.atan(ym / z)


@dataclass(frozen=True)
class BlurBudget:
    sigma_eff: float
    sigma_def: float
    sigma_diff: float
    sigma_sens: float
    d_geo: float


def blur_sigma_eff(lens: LensConfig, z: float) -> BlurBudget:
    """Gaussian-equivalent spot std at sensor distance ``z`` from the lens.

    Defocus disk, diffraction core scaled by the magnification z/f, and
    sensor blur add in variance.
    """
    f = lens.focal_length_f
    if not 0 < z <= f:
        raise DomainError(f"sensor plane must satisfy 0 < z <= f = {f}, got {z}")
    d_geo = 2.0 * lens.radius_ra * abs(1.0 - z / f)
    var_def = d_geo**2 / 16.0
    var_diff = (z / f) ** 2 * lens.sigma_diff0**2
    var_eff = var_def + var_diff + lens.sigma_sens**2
    return BlurBudget(
        sigma_eff=math.sqrt(var_eff),
        sigma_def=math.sqrt(var_def),
        sigma_diff=math.sqrt(var_diff),
        sigma_sens=lens.sigma_sens,
        d_geo=d_geo,
    )
