import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from oapsense.errors import ConfigError, DomainError
from oapsense.geom import invert_to_angles
from oapsense.optics import (
    BeamParams,
    LensConfig,
    LinkGeometry,
    TurbulenceParams,
    angle_to_sensor,
    blur_sigma_eff,
    collected_power,
    fov_limits,
    irradiance_at,
    path_gain,
    sample_turbulence,
    turbulence_density,
)

NO_LOSS = BeamParams(attenuation_kappa=0.0, jitter_sigma_p=0.0)


def test_turbulence_degenerate_limit():
    rng = np.random.default_rng(1)
    x = sample_turbulence(TurbulenceParams(1e6, 1e6), rng, 10_000)
    assert np.all(np.abs(x - 1) < 0.01)


def test_turbulence_histogram_matches_density():
    params = TurbulenceParams(4, 2)
    rng = np.random.default_rng(2)
    x = sample_turbulence(params, rng, 200_000)
    edges = np.linspace(0.02, 4.0, 51)
    counts, _ = np.histogram(x, edges)
    cdf = [integrate.quad(turbulence_density, a, b, args=(params,))[0]
           for a, b in zip(edges[:-1], edges[1:])]
    expected = len(x) * np.array(cdf)
    chi2 = np.sum((counts - expected) ** 2 / expected)
    assert chi2 / 50 < 2


def test_density_nonnegative_and_domain():
    rng = np.random.default_rng(3)
    rho = rng.uniform(1e-6, 30, 1000)
    assert np.all(turbulence_density(rho, TurbulenceParams()) >= 0)
    with pytest.raises(DomainError):
        turbulence_density(0.0, TurbulenceParams())


def test_density_matches_direct_formula():
    a, b = 4.0, 2.0
    rho = np.array([0.05, 0.5, 1.0, 3.0, 40.0])
    direct = (2 * (a * b) ** ((a + b) / 2) / (special.gamma(a) * special.gamma(b))
              * rho ** ((a + b) / 2 - 1) * special.kv(a - b, 2 * np.sqrt(a * b * rho)))
    np.testing.assert_allclose(turbulence_density(rho, TurbulenceParams(a, b)), direct, rtol=1e-12)
    far = turbulence_density(np.array([1e4, 1e5]), TurbulenceParams(a, b))
    assert np.all(np.isfinite(far)) and np.all(far >= 0)


@pytest.mark.parametrize("alpha,beta", [(0, 2), (4, -1)])
def test_turbulence_params_validated(alpha, beta):
    with pytest.raises(ConfigError):
        TurbulenceParams(alpha, beta)


def test_path_gain_values():
    assert path_gain(0.0, 300.0) == 1.0
    assert path_gain(0.001, 300.0) == pytest.approx(0.740818, abs=1e-6)
    assert path_gain(0.001, 0.0) == 1.0
    with pytest.raises(DomainError):
        path_gain(-1, 1)


def test_irradiance_peak_and_profile():
    beam = BeamParams()
    peak = irradiance_at((0.3, 0.2), beam, (0.3, 0.2))
    assert peak == pytest.approx(2 / (math.pi * 0.36), rel=1e-12)
    assert irradiance_at((0.9, 0.2), beam, (0.3, 0.2)) == pytest.approx(peak * math.exp(-2))


def test_irradiance_flat_across_lens():
    beam, lens = BeamParams(), LensConfig()
    center = irradiance_at((0, 0), beam, (0, 0))
    phi = np.linspace(0, 2 * np.pi, 64)
    rim = irradiance_at(lens.radius_ra * np.column_stack([np.cos(phi), np.sin(phi)]), beam, (0, 0))
    assert center / rim.min() - 1 < 0.014


def test_collected_power_reference_values():
    lens = LensConfig()
    overhead = LinkGeometry((0.0, 0.0), 300.0)
    assert collected_power(NO_LOSS, overhead, lens, (0, 0)) == pytest.approx(0.0125, rel=1e-12)
    r = 0.6 / math.sqrt(2)
    assert collected_power(NO_LOSS, overhead, lens, (r, 0)) == pytest.approx(0.0125 * math.exp(-1))


def test_collected_power_cosine():
    # theta_x = 60 deg with theta_y = 0 puts the incidence angle at 60 deg
    geom = LinkGeometry((300.0 * math.tan(math.pi / 3), 0.0), 300.0)
    assert geom.incidence_theta == pytest.approx(math.pi / 3)
    assert collected_power(NO_LOSS, geom, LensConfig(), (0, 0)) == pytest.approx(0.00625)


def test_collected_power_broadcasts_offsets_and_fades():
    geom = LinkGeometry((10.0, -20.0), 300.0)
    offsets = np.array([[0, 0], [0.1, 0], [0, 0.2]])
    fades = np.array([1.0, 0.5, 2.0])
    out = collected_power(BeamParams(), geom, LensConfig(), offsets, fade=fades)
    single = [collected_power(BeamParams(), geom, LensConfig(), o, fade=f) for o, f in zip(offsets, fades)]
    np.testing.assert_allclose(out, single, rtol=1e-14)


def test_incidence_cosine_close_to_exact_polar_angle():
    for p in [(125, 125), (-125, 60), (0, 125)]:
        g = LinkGeometry(p, 300.0)
        assert abs(math.cos(g.incidence_theta) / math.cos(g.polar_angle) - 1) < 0.03


def test_flat_field_guard():
    with pytest.raises(ConfigError):
        collected_power(BeamParams(beam_radius_wz=0.2), LinkGeometry((0, 0), 300), LensConfig(), (0, 0))


def test_angle_to_sensor():
    assert tuple(angle_to_sensor((0.0, 0.0), 0.05)) == (0.0, 0.0)
    x = angle_to_sensor((math.atan(0.1), 0.0), 0.03)
    assert x[0] == pytest.approx(0.003, rel=1e-12)
    with pytest.raises(DomainError):
        angle_to_sensor((math.pi / 2, 0), 0.03)


@given(st.floats(-1.2, 1.2), st.floats(-1.2, 1.2), st.floats(1e-3, 0.1))
def test_angle_round_trip(tx, ty, z):
    back = invert_to_angles(angle_to_sensor((tx, ty), z), z)
    np.testing.assert_allclose(back, (tx, ty), atol=1e-12)


def test_fov_limits():
    ax, _ = fov_limits((0.015, 0.015), 0.03)
    assert ax == pytest.approx(0.46365, abs=1e-5)
    assert fov_limits((0.02, 0.02), 0.02)[0] == pytest.approx(math.pi / 4)
    zs = [0.05, 0.03, 0.02, 0.01]
    limits = [fov_limits((0.015, 0.015), z)[0] for z in zs]
    assert all(b > a for a, b in zip(limits, limits[1:]))


def test_blur_in_focus():
    lens = LensConfig(sigma_diff0=0.004, sigma_sens=0.003)
    b = blur_sigma_eff(lens, lens.focal_length_f)
    assert b.sigma_def == 0
    assert b.sigma_eff == pytest.approx(0.005)


def test_blur_defocus_reference():
    lens = LensConfig(radius_ra=0.05, focal_length_f=0.03, sigma_diff0=0.0)
    assert blur_sigma_eff(lens, 0.027).sigma_def == pytest.approx(0.0025)
    # z = f/2: d_geo = r_a, so sigma_def = d_geo / 4 = r_a / 4
    half = blur_sigma_eff(lens, 0.015)
    assert half.d_geo == pytest.approx(lens.radius_ra)
    assert half.sigma_eff == half.sigma_def == pytest.approx(lens.radius_ra / 4)


def test_blur_default_is_8mm():
    assert blur_sigma_eff(LensConfig(), 0.03).sigma_eff == pytest.approx(0.008)


@settings(max_examples=50)
@given(st.floats(1e-4, 0.03), st.floats(0, 0.01), st.floats(0, 0.01))
def test_blur_invariants(z, s0, ss):
    lens = LensConfig(sigma_diff0=s0, sigma_sens=ss)
    b = blur_sigma_eff(lens, z)
    assert b.sigma_eff ** 2 >= ss ** 2 - 1e-18
    assert b.sigma_eff ** 2 == pytest.approx(b.sigma_def ** 2 + b.sigma_diff ** 2 + ss ** 2, rel=1e-12, abs=1e-20)


def test_blur_continuous_near_focus():
    lens = LensConfig()
    f = lens.focal_length_f
    a = blur_sigma_eff(lens, f * (1 - 1e-9)).sigma_eff
    assert a == pytest.approx(blur_sigma_eff(lens, f).sigma_eff, rel=1e-6)
    with pytest.raises(DomainError):
        blur_sigma_eff(lens, 1.01 * f)
