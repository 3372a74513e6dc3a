import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ps2f import lobes
from ps2f.io import ContainerError, load_phase_mask, save_phase_mask
from ps2f.masks import (
    TWO_PI,
    GSConfig,
    PhaseMask,
    PolarizedMaskAssembly,
    design_dhpsf_mask,
    load_external_mask,
    partition_mask,
    quantize_phase,
    render_psf_stack,
)
from ps2f.optics import ComplexField, Grid2D, OpticsError, equivalent_rayleigh, image_field, natural_pitch, raw_psf


def test_gs_rejects_zero_iterations():
    with pytest.raises(OpticsError):
        GSConfig(iterations=0)


def test_designed_mask_is_phase_only(dh_mask, system):
    t = dh_mask.transmission()
    inside = dh_mask.support()
    assert np.allclose(np.abs(t[inside]), 1.0)
    assert np.all(t[~inside] == 0)
    assert dh_mask.phase.min() >= 0 and dh_mask.phase.max() < TWO_PI


def test_designed_mask_has_two_lobes_in_focus(dh_mask, system, sensor):
    img = raw_psf(dh_mask, system, 0.0, sensor)
    _, _, e = lobes.clusters(img, 0.2)
    assert len(e) >= 2
    assert e[1] > 0.8 * e[0]
    assert np.all(e[2:] < 0.25 * e[0])


def test_designed_mask_rotates_through_half_turn(system, beam, dh_mask, sensor):
    zs = np.linspace(-2.65e-3, 2.65e-3, 41)
    ang = lobes.unwrap_axis([lobes.lobe_axis_angle(raw_psf(dh_mask, system, z, sensor)) for z in zs])
    assert np.degrees(np.ptp(ang)) >= 160


@pytest.mark.parametrize("band", [1.5, 2.0])
def test_gs_modal_fraction_non_decreasing(system, beam, band):
    m = design_dhpsf_mask(beam, system, system.pupil_grid(128), GSConfig(weight_band=band))
    h = np.array(m.diagnostics["history"])
    assert len(h) > 2
    assert np.all(np.diff(h) >= -1e-9)
    assert m.diagnostics["modal_energy_fraction"] == pytest.approx(h.max())


def test_pupil_grid_must_cover_aperture(system, beam):
    with pytest.raises(OpticsError):
        design_dhpsf_mask(beam, system, Grid2D.square(64, system.aperture_diameter / 128))


def test_halves_complementary(pair64):
    asm = pair64.assembly
    a, b = asm.half("A"), asm.half("B")
    assert not np.any(a & b)
    assert np.all(a | b)


def test_polarizers_must_be_orthogonal(dh_mask):
    with pytest.raises(OpticsError):
        PolarizedMaskAssembly(dh_mask, 0.0, {"A": "0", "B": "45"})


def test_half_a_single_lobe_in_focus(pair64, system, sensor):
    img = raw_psf(pair64.assembly.half_field("A"), system, 0.0, sensor)
    _, _, e = lobes.clusters(img, 0.2)
    assert len(e) == 1 or e[1] < 0.25 * e[0]


def test_half_lobes_on_opposite_sides(pair64, system, sensor):
    a = lobes.single_lobe_angle(raw_psf(pair64.assembly.half_field("A"), system, 0.0, sensor))
    b = lobes.single_lobe_angle(raw_psf(pair64.assembly.half_field("B"), system, 0.0, sensor))
    diff = abs((a - b) % TWO_PI - np.pi)
    assert diff < 0.2


def test_single_lobe_over_rayleigh_range(pair64, system, beam):
    zr = equivalent_rayleigh(system, beam.waist)
    stack = pair64.ps2f
    for ci in range(2):
        for zi in np.nonzero(np.abs(stack.z_samples) <= zr)[0]:
            assert lobes.dominance_ratio(stack.psfs[ci, zi]) >= 3


def test_coherent_halves_reunite_exactly(pair64, system):
    asm = pair64.assembly
    # on the native Fourier sampling no resampling is involved
    native = Grid2D.square(96, natural_pitch(system, asm.mask.grid))
    for dz in (0.0, 1.3e-3):
        fa = image_field(asm.half_field("A"), system, dz, native)
        fb = image_field(asm.half_field("B"), system, dz, native)
        full = raw_psf(asm.mask, system, dz, native)
        summed = np.abs(fa + fb) ** 2
        assert np.max(np.abs(summed - full)) <= 1e-9 * full.max()


def test_clear_aperture_single_plane_is_airy(system):
    g = system.pupil_grid(128)
    clear = ComplexField(g, np.ones(g.shape, dtype=complex))
    st_ = render_psf_stack(clear, system, [0.0], Grid2D.square(32, 6.875e-6))
    img = st_.psfs[0, 0]
    assert np.unravel_index(np.argmax(img), img.shape) == (16, 16)
    inner = img[1:, 1:]
    assert np.allclose(inner, inner[::-1, ::-1])


def test_pair_energy_is_half_on_full_window(dh_mask, system):
    # a sensor identical to the padded Fourier grid captures all light, so
    # the polarized pair must carry exactly half of the full-mask energy
    small = PhaseMask(dh_mask.grid, dh_mask.phase, dh_mask.diameter)
    nat = natural_pitch(system, small.grid)
    full_window = Grid2D.square(2 * small.grid.width, nat)
    zs = [-1e-3, 0.0, 2e-3]
    full = render_psf_stack(small, system, zs, full_window).plane_energy()[0]
    pair = render_psf_stack(partition_mask(small, 0.3), system, zs, full_window).plane_energy().sum(axis=0)
    assert np.allclose(pair, 0.5 * full, rtol=1e-9)
    assert np.allclose(full, 1.0, rtol=1e-9)


def test_pair_energy_close_to_half_on_sensor(pair64):
    ratio = pair64.ps2f.plane_energy().sum(axis=0) / pair64.dhpsf.plane_energy()[0]
    assert np.all(np.abs(ratio - 0.5) < 0.01)
    assert np.all(pair64.ps2f.psfs >= 0)


def test_dense_stack_rotation_span(dh_mask, system, sensor):
    zs = np.linspace(-2.5e-3, 2.5e-3, 256)
    stack = render_psf_stack(dh_mask, system, zs, sensor)
    ang = lobes.unwrap_axis([lobes.lobe_axis_angle(im) for im in stack.psfs[0]])
    assert np.degrees(np.ptp(ang)) >= 160


def test_stack_rejects_unsorted_depths(dh_mask, system, sensor):
    with pytest.raises(OpticsError):
        render_psf_stack(dh_mask, system, [0.0, -1e-3], sensor)


def _flat_mask(value, n=32, levels=None):
    g = Grid2D.square(n, 1e-4)
    return PhaseMask(g, np.full(g.shape, value, dtype=np.float32), 3e-3, quantization_levels=levels)


def test_quantize_five_levels_of_pi():
    q = quantize_phase(_flat_mask(np.pi), 5)
    vals = q.phase[q.support()]
    assert np.allclose(vals, 4 * np.pi / 5)
    assert np.isclose(vals[0], 2.513, atol=1e-3)


def test_quantize_idempotent(dh_mask):
    q = quantize_phase(dh_mask, 8)
    assert np.array_equal(quantize_phase(q, 8).phase, q.phase)


def test_quantize_rejects_one_level(dh_mask):
    with pytest.raises(OpticsError):
        quantize_phase(dh_mask, 1)


def test_quantize_exact_tie_goes_down():
    step = TWO_PI / 4
    q = quantize_phase(_flat_mask(np.float32(1.5 * step)), 4)
    assert np.allclose(q.phase[q.support()], step)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 64), st.integers(0, 2**32 - 1))
def test_quantization_error_bound(levels, seed):
    g = Grid2D.square(16, 2.5e-4)
    phase = np.random.default_rng(seed).uniform(0, TWO_PI, g.shape)
    m = PhaseMask.from_phase(g, phase, 3e-3)
    q = quantize_phase(m, levels)
    err = np.angle(np.exp(1j * (q.phase.astype(float) - m.phase.astype(float))))[m.support()]
    assert np.max(np.abs(err)) <= np.pi / levels + 1e-5


def test_phase_out_of_range_rejected_in_constructor():
    with pytest.raises(OpticsError):
        _flat_mask(7.0)


def test_external_mask_round_trip(dh_mask, tmp_path):
    p = tmp_path / "mask.ps2f"
    save_phase_mask(dh_mask, p)
    back = load_external_mask(p)
    assert np.array_equal(back.phase, dh_mask.phase)
    assert back.grid == dh_mask.grid and back.diameter == dh_mask.diameter


def test_external_mask_wraps_with_warning(tmp_path):
    from ps2f.io import Container, write_container

    g = Grid2D.square(8, 1e-4)
    phase = np.full(g.shape, 7.0, dtype=np.float32)
    p = tmp_path / "wide.ps2f"
    write_container(p, Container(phase, {"kind": "PhaseMask", "pitch": g.pitch, "diameter": 3e-4}))
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        m = load_phase_mask(p)
    assert any("wrapped" in str(w.message) for w in rec)
    assert m.diagnostics["wrapped_on_load"] is True
    assert np.allclose(m.phase, 7.0 - TWO_PI, atol=1e-6)


def test_external_mask_truncated(dh_mask, tmp_path):
    p = tmp_path / "mask.ps2f"
    save_phase_mask(dh_mask, p)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ContainerError, match=r"byte offset \d+"):
        load_external_mask(p)
