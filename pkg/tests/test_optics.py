import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from ps2f import lobes
from ps2f.optics import (
    ComplexField,
    GLBeamSpec,
    Grid2D,
    OpticsError,
    System4f,
    defocus_phase,
    equivalent_rayleigh,
    gl_mode,
    render_psf,
    rotation_angle,
    superpose_beam,
)

W0 = 0.4e-3


@pytest.fixture(scope="module")
def wide_grid():
    # 10 waists across so even the n = 13 mode has decayed at the edge
    return Grid2D.square(256, 10 * W0 / 256)


def test_grid_rejects_degenerate():
    with pytest.raises(OpticsError):
        Grid2D(1, 4, 1e-6)
    with pytest.raises(OpticsError):
        Grid2D(4, 4, 0.0)


def test_grid_center_sample_is_on_axis():
    g = Grid2D(8, 6, 0.5)
    x, y = g.axes()
    assert x[4] == 0 and y[3] == 0
    assert g.extent == (4.0, 3.0)


def test_fundamental_mode_is_real_gaussian(wide_grid):
    f = gl_mode(0, 0, W0, wide_grid)
    r, _ = wide_grid.polar()
    ref = np.exp(-(r**2) / W0**2)
    ref /= np.linalg.norm(ref)
    assert np.allclose(f.values.imag, 0)
    assert np.all(f.values.real >= 0)
    assert np.allclose(f.values.real, ref, atol=1e-12)


def test_first_order_mode_winds_once(wide_grid):
    f = gl_mode(1, 1, W0, wide_grid)
    r, theta = wide_grid.polar()
    ring = (r > 0.3 * W0) & (r < 2 * W0)
    offset = np.angle(f.values[ring] * np.exp(-1j * theta[ring]))
    assert np.ptp(np.unwrap(offset)) < 1e-9


valid_modes = st.integers(0, 15).flatmap(
    lambda m: st.tuples(st.integers(0, 6).map(lambda p: 2 * p + m), st.just(m))
)


@settings(max_examples=25, deadline=None)
@given(valid_modes)
def test_modes_have_unit_norm(nm):
    n, m = nm
    g = Grid2D.square(128, 10 * W0 / 128)
    assert abs(gl_mode(n, m, W0, g).norm() - 1.0) < 1e-6


def test_distinct_modes_are_orthogonal(wide_grid):
    pairs = [(0, 0), (1, 1), (2, 0), (3, 1), (5, 3), (9, 5), (13, 7), (4, 2), (2, 2)]
    fields = [gl_mode(n, m, W0, wide_grid).values.ravel() for n, m in pairs]
    for i in range(len(fields)):
        for j in range(i + 1, len(fields)):
            assert abs(np.vdot(fields[i], fields[j])) < 1e-3


@pytest.mark.parametrize("n,m", [(1, 0), (-1, 1), (2, 3)])
def test_invalid_mode_indices_rejected(n, m, wide_grid):
    with pytest.raises(OpticsError):
        gl_mode(n, m, W0, wide_grid)


def test_beam_spec_validation():
    with pytest.raises(OpticsError):
        GLBeamSpec(((1, 1), (5, 3)), W0, slope=2, intercept=0)
    with pytest.raises(OpticsError):
        GLBeamSpec(((1, 1), (5, 3), (13, 7)), W0, slope=2, intercept=-1)
    with pytest.raises(OpticsError):
        GLBeamSpec(((1, 1),), 0.0, slope=2, intercept=-1)


def test_single_mode_superposition_equals_mode(wide_grid):
    spec = GLBeamSpec(((5, 3),), W0, slope=2, intercept=-1)
    assert np.allclose(superpose_beam(spec, wide_grid).values, gl_mode(5, 3, W0, wide_grid).values)


def test_two_orthogonal_modes_renormalize(wide_grid):
    spec = GLBeamSpec(((1, 1), (5, 3)), W0, slope=2, intercept=-1)
    assert abs(superpose_beam(spec, wide_grid).norm() - 1) < 1e-12


def test_rotating_superposition_has_two_lobes(beam, wide_grid):
    inten = superpose_beam(beam, wide_grid).intensity
    peaks = (inten == ndimage.maximum_filter(inten, size=9)) & (inten > 0.5 * inten.max())
    assert peaks.sum() == 2


def test_defocus_phase_limits(system):
    g = Grid2D.square(64, 1e-4)
    assert np.allclose(defocus_phase(system, 0.0, g).values, 1)
    a = defocus_phase(system, 1e-3, g).values
    b = defocus_phase(system, -1e-3, g).values
    assert np.allclose(a, np.conj(b))


def test_defocus_phase_scalar_value(system):
    g = Grid2D.square(64, 1e-4)
    # sample (row 32, col 42) sits 1 mm from the axis
    value = defocus_phase(system, 2.5e-3, g).values[32, 42]
    # k / (2 f) * (dz / f) * r^2 = 1.1810e7 / 0.1 * 0.05 * 1e-6
    expected = 5.905249348852994
    assert np.isclose(np.angle(value * np.exp(-1j * expected)), 0, atol=1e-9)


def test_equivalent_rayleigh_values(system):
    zr = equivalent_rayleigh(system, 0.4e-3)
    assert round(zr * 1e3, 3) == 2.646
    assert round(2 * zr * 1e3, 1) == 5.3
    assert np.isclose(equivalent_rayleigh(system, 0.8e-3), zr / 4)
    assert round(equivalent_rayleigh(system, 0.8e-3) * 1e3, 4) == 0.6615


def test_rotation_angle_law(system, beam):
    zr = equivalent_rayleigh(system, beam.waist)
    assert rotation_angle(0.0, beam, system, 0.3) == 0.3
    assert np.isclose(rotation_angle(zr, beam, system), beam.slope * np.pi / 4)
    assert np.isclose(rotation_angle(1e9, beam, system), beam.slope * np.pi / 2, atol=1e-9)


def test_diffraction_scales(system):
    assert f"{system.airy_radius() * 1e6:.4g}" == "10.81"
    assert f"{system.axial_limit() * 1e6:.3g}" == "591"


def clear_pupil(system, n=256):
    g = system.pupil_grid(n)
    return ComplexField(g, np.ones(g.shape, dtype=complex))


def test_clear_aperture_airy(system):
    pupil = clear_pupil(system)
    sensor = Grid2D.square(64, 1.0e-6 * 2.3)
    psf = render_psf(pupil, system, 0.0, sensor)
    assert np.unravel_index(np.argmax(psf), psf.shape) == (32, 32)
    assert abs(psf.sum() - 1) < 1e-9
    # first minimum of the radial profile
    prof = psf[32, 32:]
    k = int(np.argmax(np.diff(prof) > 0))
    r_min = k * sensor.pitch
    assert abs(r_min - system.airy_radius()) <= sensor.pitch


def test_clear_aperture_defocus_symmetry(system):
    pupil = clear_pupil(system)
    sensor = Grid2D.square(48, 6.875e-6)
    a = render_psf(pupil, system, 0.7e-3, sensor)
    b = render_psf(pupil, system, -0.7e-3, sensor)
    assert np.max(np.abs(a - b)) < 1e-9 * a.max()


def test_sensor_finer_than_pupil_sampling_rejected(system):
    with pytest.raises(OpticsError):
        render_psf(clear_pupil(system, 64), system, 0.0, Grid2D.square(16, 1e-7))


def test_designed_psf_rotates_quarter_turn_per_rayleigh(system, beam, dh_mask, sensor):
    zr = equivalent_rayleigh(system, beam.waist)
    a0 = lobes.lobe_axis_angle(render_psf(dh_mask, system, 0.0, sensor))
    a1 = lobes.lobe_axis_angle(render_psf(dh_mask, system, zr, sensor))
    turn = abs((a1 - a0 + np.pi / 2) % np.pi - np.pi / 2)
    assert abs(np.degrees(turn) - 90) < 10


def test_lobe_angle_tracks_rotation_law(system, beam, dh_mask, sensor):
    zr = equivalent_rayleigh(system, beam.waist)
    zs = np.linspace(-zr, zr, 11)
    measured = lobes.unwrap_axis([lobes.lobe_axis_angle(render_psf(dh_mask, system, z, sensor)) for z in zs])
    phi0 = measured[5]
    # rotation is counter to the law's sign in this image-coordinate convention
    predicted = rotation_angle(-zs, beam, system, phi0)
    assert np.max(np.abs(np.degrees(measured - predicted))) < 10
