"""
Experiment configuration: nested dataclasses plus a flat ``section.key = value``
text format.

Unknown keys are rejected, missing keys keep their defaults, and
``serialize_config`` writes every key in a fixed order so that
parse -> serialize -> parse is stable.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from .detect import DetectorConfig
from .errors import ConfigError
from .optics import BeamParams, LensConfig, TurbulenceParams, blur_sigma_eff
from .sensor import AcquisitionConfig, SceneConfig, SensorConfig

TABLE1_SIZES = (10, 20, 40, 60, 80, 100)


@dataclass(frozen=True)
class SensorSection:
    nx: int = 64
    ny: int = 64
    width: float = 0.03
    height: float = 0.03
    # None places the array at the focal plane.
    plane_z: float | None = None


@dataclass(frozen=True)
class DetectorSection:
    # None values derive from sigma_eff: target std = sigma_eff,
    # NMS radius = 2 sigma_eff, refinement window = 3 sigma_tgt.
    sigma_tgt: float | None = None
    nms_radius: float | None = None
    peak_threshold: float = 0.25
    window_radius: float | None = None
    known_count: bool = True
    refine: str = "centroid"
    # How known-count mode fills in missing peaks: "pursuit" or "maxima".
    pad: str = "pursuit"


@dataclass(frozen=True)
class AssignSection:
    metric: str = "euclidean"
    # None means 3 * nms_radius (sensor-plane metres).
    c_max: float | None = None
    covariance: str = "isotropic"


@dataclass(frozen=True)
class AnomalySection:
    # None means 3 * sqrt(MSE) of the operating point, floored at 2 m.
    gate: float | None = None


@dataclass(frozen=True)
class RunSection:
    trials: int = 200
    array_sizes: tuple[int, ...] = TABLE1_SIZES
    seed: int = 0
    out: str = "out"
    mode: str = "sweep"
    workers: int = 1
    max_failure_rate: float = 0.05
    calibration_frames: int = 200
    timing: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    beam: BeamParams = field(default_factory=BeamParams)
    turbulence: TurbulenceParams = field(default_factory=TurbulenceParams)
    # Off means every fade is 1.
    fading: bool = True
    lens: LensConfig = field(default_factory=LensConfig)
    sensor: SensorSection = field(default_factory=SensorSection)
    acq: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    detector: DetectorSection = field(default_factory=DetectorSection)
    assign: AssignSection = field(default_factory=AssignSection)
    anomaly: AnomalySection = field(default_factory=AnomalySection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        validate(self)

    # -- derived objects ------------------------------------------------------

    @property
    def plane_z(self) -> float:
        z = self.sensor.plane_z
        return self.lens.focal_length_f if z is None else z

    @property
    def sigma_eff(self) -> float:
        return blur_sigma_eff(self.lens, self.plane_z).sigma_eff

    def sensor_config(self, n: int | None = None) -> SensorConfig:
        nx = self.sensor.nx if n is None else n
        ny = self.sensor.ny if n is None else n
        return SensorConfig.centered(
            nx, ny, width=self.sensor.width, height=self.sensor.height, plane_z=self.plane_z
        )

    def scene_config(self) -> SceneConfig:
        return dataclasses.replace(self.scene, beam=self.beam)

    def detector_config(self, known_count: int | None = None) -> DetectorConfig:
        d = self.detector
        s = self.sigma_eff
        return DetectorConfig(
            sigma_tgt=d.sigma_tgt if d.sigma_tgt is not None else s,
            nms_radius=d.nms_radius if d.nms_radius is not None else 2.0 * s,
            peak_threshold=d.peak_threshold,
            known_count=known_count if d.known_count else None,
            window_radius=d.window_radius,
        )

    @property
    def c_max(self) -> float:
        if self.assign.c_max is not None:
            return self.assign.c_max
        return 3.0 * self.detector_config().nms_radius

    @property
    def turbulence_or_none(self) -> TurbulenceParams | None:
        return self.turbulence if self.fading else None


SECTIONS = {
    "scene": "scene",
    "beam": "beam",
    "turbulence": "turbulence",
    "lens": "lens",
    "sensor": "sensor",
    "acq": "acq",
    "detector": "detector",
    "assign": "assign",
    "anomaly": "anomaly",
    "run": "run",
}
# scene.beam is configured through the beam section
_SKIP = {("scene", "beam")}


def _fields(obj_or_cls):
    return [f for f in dataclasses.fields(obj_or_cls)]


def all_keys() -> list[str]:
    keys = []
    cfg = ExperimentConfig()
    for f in _fields(ExperimentConfig):
        if f.name in SECTIONS:
            for g in _fields(getattr(cfg, f.name)):
                if (f.name, g.name) not in _SKIP:
                    keys.append(f"{f.name}.{g.name}")
        else:
            keys.append(f.name)
    return keys


# ---------------------------------------------------------------------------
# value conversion


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _convert(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return _parse_bool(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(float(x)) if kind is int and _is_intlike(x) else kind(x) for x in items)
        if isinstance(default, str):
            return raw
        if raw.lower() == "none":
            return None
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})", key=key) from None


def _is_intlike(x: str) -> bool:
    try:
        return float(x).is_integer()
    except ValueError:
        return False


def _int_fields():
    """Optional fields whose non-None value is an integer."""
    return {"scene.n_eavesdroppers"}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# parse / serialize


def config_from_pairs(pairs: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    known = set(all_keys())
    updates: dict[str, dict] = {}
    top: dict = {}
    for key, raw in pairs.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", key=key)
        if "." in key:
            sec, name = key.split(".", 1)
            default = getattr(getattr(base, sec), name)
            if default is None and key in _int_fields():
                val = None if raw.strip().lower() == "none" else _convert(raw, 0, key)
            else:
                val = _convert(raw, default, key)
            updates.setdefault(sec, {})[name] = val
        else:
            top[key] = _convert(raw, getattr(base, key), key)
    kwargs = dict(top)
    for sec, vals in updates.items():
        try:
            kwargs[sec] = dataclasses.replace(getattr(base, sec), **vals)
        except ConfigError as exc:
            raise ConfigError(str(exc), key=exc.key or f"{sec}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{sec}: {exc}", key=sec) from None
    return dataclasses.replace(base, **kwargs)


def parse_config_text(text: str, source: str = "<string>") -> ExperimentConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", key=key)
        pairs[key] = value
    return config_from_pairs(pairs)


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    return parse_config_text(p.read_text(), source=str(p))


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for key in all_keys():
        if "." in key:
            sec, name = key.split(".", 1)
            value = getattr(getattr(cfg, sec), name)
        else:
            value = getattr(cfg, key)
        lines.append(f"{key} = {_format(value)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# validation


def validate(cfg: ExperimentConfig) -> None:
    r = cfg.run
    if r.trials < 1:
        raise ConfigError("run.trials must be >= 1", key="run.trials")
    if not r.array_sizes or min(r.array_sizes) < 2:
        raise ConfigError("run.array_sizes must be non-empty and >= 2", key="run.array_sizes")
    if r.workers < 1:
        raise ConfigError("run.workers must be >= 1", key="run.workers")
    if not 0 <= r.max_failure_rate <= 1:
        raise ConfigError("run.max_failure_rate must lie in [0, 1]", key="run.max_failure_rate")
    if r.mode not in ("simulate", "sweep", "calibrate", "dataset"):
        raise ConfigError(f"unknown run.mode {r.mode!r}", key="run.mode")
    s = cfg.sensor
    if s.nx < 1:
        raise ConfigError("sensor.nx must be >= 1", key="sensor.nx")
    if s.ny < 1:
        raise ConfigError("sensor.ny must be >= 1", key="sensor.ny")
    if not (s.width > 0 and s.height > 0):
        raise ConfigError("sensor.width and sensor.height must be positive", key="sensor.width")
    z = cfg.plane_z
    if not 0 < z <= cfg.lens.focal_length_f:
        raise ConfigError("sensor.plane_z must lie in (0, f]", key="sensor.plane_z")
    if not cfg.sigma_eff > 0:
        raise ConfigError("effective blur is zero; set lens.sigma_diff0 or lens.sigma_sens",
                          key="lens.sigma_diff0")
    d = cfg.detector
    if d.refine not in ("none", "centroid", "psf_fit"):
        raise ConfigError(f"unknown detector.refine {d.refine!r}", key="detector.refine")
    if d.pad not in ("pursuit", "maxima"):
        raise ConfigError(f"unknown detector.pad {d.pad!r}", key="detector.pad")
    for name in ("sigma_tgt", "nms_radius", "window_radius"):
        v = getattr(d, name)
        if v is not None and not v > 0:
            raise ConfigError(f"detector.{name} must be positive", key=f"detector.{name}")
    if not 0 < d.peak_threshold < 1:
        raise ConfigError("detector.peak_threshold must lie in (0, 1)", key="detector.peak_threshold")
    a = cfg.assign
    if a.metric not in ("euclidean", "mahalanobis"):
        raise ConfigError(f"unknown assign.metric {a.metric!r}", key="assign.metric")
    if a.covariance not in ("isotropic", "snr"):
        raise ConfigError(f"unknown assign.covariance {a.covariance!r}", key="assign.covariance")
    if a.c_max is not None and not a.c_max > 0:
        raise ConfigError("assign.c_max must be positive", key="assign.c_max")
    g = cfg.anomaly.gate
    if g is not None and not (g > 0 and math.isfinite(g)):
        raise ConfigError("anomaly.gate must be positive", key="anomaly.gate")
    from .optics import check_flat_field

    check_flat_field(cfg.beam, cfg.lens)
