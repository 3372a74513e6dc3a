import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ps2f.fisher import (
    FisherMatrix,
    LinePatch,
    PhotonModel,
    crlb_extract,
    crlb_map,
    fisher_line,
    fisher_point,
    render_line_image,
)
from ps2f.masks import PsfStack

PITCH = 6.875e-6


def gaussian_stack(sigma_px=2.0, size=33, zs=(-1e-3, 0.0, 1e-3), widen=0.0):
    """Centered Gaussian spots; ``widen`` grows sigma linearly with z (per mm)."""
    yy, xx = np.mgrid[0:size, 0:size] - size // 2
    planes = []
    for z in zs:
        s = sigma_px * (1 + widen * z * 1e3)
        g = np.exp(-(xx**2 + yy**2) / (2 * s**2))
        planes.append(g / g.sum())
    return PsfStack(np.array(zs), ("full",), np.array(planes)[None], PITCH)


def delta_stack(size=9, zs=(-1e-3, 0.0, 1e-3)):
    psf = np.zeros((len(zs), size, size))
    psf[:, size // 2, size // 2] = 1.0
    return PsfStack(np.array(zs), ("full",), psf[None], PITCH)


def test_line_image_is_pi_periodic():
    st_ = gaussian_stack()
    m = PhotonModel(1e4, 2.0)
    a = render_line_image(st_, LinePatch(0.0, 0.3, 32), m)
    b = render_line_image(st_, LinePatch(0.0, 0.3 + np.pi, 32), m)
    assert np.allclose(a, b, rtol=1e-9, atol=0)


def test_identity_psf_gives_raster_line():
    m = PhotonModel(1000.0, 3.0)
    img = render_line_image(delta_stack(), LinePatch(0.0, 0.0, 32), m)
    line = img - 3.0
    rows = np.nonzero(line.sum(axis=1) > 1e-9)[0]
    assert list(rows) == [16]
    assert np.allclose(line[16], 1000.0 / 32)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, np.pi), st.floats(-0.9e-3, 0.9e-3), st.floats(0, 20))
def test_patch_photon_total(phi, z, beta):
    m = PhotonModel(5e4, beta)
    img = render_line_image(gaussian_stack(widen=0.5), LinePatch(z, phi, 32), m)
    assert abs(img.sum() - (5e4 + beta * 32**2)) <= 0.5


def test_flat_psf_carries_no_information():
    zs = np.array([-1e-3, 0.0, 1e-3])
    flat = PsfStack(zs, ("full",), np.full((1, 3, 16, 16), 1 / 256), PITCH)
    fi = fisher_point(flat, (0.0, 0.0, 0.0), PhotonModel(1e4, 1.0))
    assert np.allclose(fi.entries, 0, atol=1e-9)


def test_point_information_linear_in_photons():
    st_ = gaussian_stack(widen=0.5)
    a = fisher_point(st_, (0.0, 0.0, 0.0), PhotonModel(1e4, 0.0)).entries
    b = fisher_point(st_, (0.0, 0.0, 0.0), PhotonModel(2e4, 0.0)).entries
    assert np.allclose(b, 2 * a, rtol=1e-12, atol=0)


@pytest.mark.parametrize("sigma_px", [2.0, 2.5, 3.0])
def test_gaussian_localization_oracle(sigma_px):
    # sub-pixel shifts are spectral, so the spot must be Nyquist sampled;
    # photon-limited Gaussian spot with pixel width a: var_x = (sigma^2 + a^2/12) / N
    n = 1e4
    st_ = gaussian_stack(sigma_px, size=49)
    fi = fisher_point(st_, (0.0, 0.0, 0.0), PhotonModel(n, 1e-9))
    crlb = crlb_extract(FisherMatrix(fi.entries[:2, :2], ("x", "y")))
    sigma = sigma_px * PITCH
    oracle = np.sqrt((sigma**2 + PITCH**2 / 12) / n)
    assert abs(crlb[0] / oracle - 1) < 0.05
    assert abs(crlb[1] / oracle - 1) < 0.05


def test_two_identical_channels_double_information():
    st_ = gaussian_stack(widen=0.5)
    pair = PsfStack(st_.z_samples, ("0", "90"), np.concatenate([st_.psfs, st_.psfs]), PITCH)
    patch = LinePatch(0.2e-3, 0.4, 32)
    m = PhotonModel(1e4, 2.0)
    one = fisher_line(st_, patch, m, photon_fractions=[1.0]).entries
    two = fisher_line(pair, patch, m, photon_fractions=[1.0, 1.0]).entries
    assert np.array_equal(two, 2 * one)


def test_channel_information_adds_exactly(pair64):
    patch = LinePatch(0.5e-3, 0.7, 64)
    m = PhotonModel(1e5, 5.0)
    both = fisher_line(pair64.ps2f, patch, m).entries
    parts = sum(fisher_line(pair64.ps2f.channel(c), patch, m, photon_fractions=[0.25]).entries
                for c in pair64.ps2f.channels)
    assert np.array_equal(both, parts)


@settings(max_examples=15, deadline=None)
@given(st.floats(-0.7e-3, 0.7e-3), st.floats(0, np.pi))
def test_line_information_symmetric_psd(z, phi):
    fi = fisher_line(gaussian_stack(widen=0.5), LinePatch(z, phi, 32), PhotonModel(1e4, 1.0)).entries
    assert np.allclose(fi, fi.T)
    assert np.linalg.eigvalsh(fi).min() >= -1e-9 * max(1.0, np.abs(fi).max())


def test_crlb_extract_examples():
    assert np.allclose(crlb_extract(FisherMatrix(np.diag([4.0, 9.0]), ("a", "b"))), [0.5, 1 / 3])
    base = FisherMatrix(np.array([[3.0, 0.5], [0.5, 2.0]]), ("a", "b"))
    assert np.allclose(crlb_extract(base * 4), crlb_extract(base) / 2)
    fi = FisherMatrix(np.array([[2.0, 1.0], [1.0, 2.0]]), ("a", "b"))
    assert np.allclose(crlb_extract(fi), np.sqrt(2 / 3))


def test_crlb_extract_singular_is_nan():
    fi = FisherMatrix(np.array([[1.0, 1.0], [1.0, 1.0]]), ("a", "b"))
    assert np.all(np.isnan(crlb_extract(fi)))


def test_depth_independent_psf_has_no_depth_bound():
    cm = crlb_map(gaussian_stack(), [-0.5e-3, 0.5e-3], [0.0, 1.0], PhotonModel(1e4, 1.0), patch_size=32)
    assert np.all(np.isnan(cm.sqrt_crlb_z))
    assert np.all(np.isfinite(cm.sqrt_crlb_phi))


def test_depth_bound_scales_inverse_sqrt_photons():
    st_ = gaussian_stack(widen=0.5)
    patch = LinePatch(0.3e-3, 0.5, 32)
    a = crlb_extract(fisher_line(st_, patch, PhotonModel(1e4, 0.0)))
    b = crlb_extract(fisher_line(st_, patch, PhotonModel(4e4, 0.0)))
    assert np.allclose(b, a / 2, rtol=1e-6)


def test_orientation_periodicity(pair64):
    m = PhotonModel(1e5, 5.0)
    a = crlb_extract(fisher_line(pair64.dhpsf, LinePatch(0.4e-3, 0.3, 64), m))
    b = crlb_extract(fisher_line(pair64.dhpsf, LinePatch(0.4e-3, 0.3 + np.pi, 64), m))
    assert np.allclose(a, b, rtol=1e-6)


def test_finite_difference_step_converges(pair64):
    st_ = pair64.dhpsf
    patch = LinePatch(0.6e-3, 0.9, 64)
    m = PhotonModel(1e5, 5.0)
    dz = st_.z_spacing / 4
    a = fisher_line(st_, patch, m, step=(dz, np.radians(0.5))).entries
    b = fisher_line(st_, patch, m, step=(dz / 2, np.radians(0.25))).entries
    assert np.max(np.abs(b - a) / np.abs(a).max()) < 0.01


def test_dhpsf_depth_bound_peaks_for_line_along_lobes(pair64):
    # in-focus lobe axis lies along x, i.e. phi = 0
    phis = np.radians([-12.0, 0.0, 12.0])
    z = pair64.dhpsf.z_samples[32]
    cm = crlb_map(pair64.dhpsf, [z], phis, PhotonModel(1e5, 5.0))
    row = cm.sqrt_crlb_z[0]
    assert row[1] > row[0] and row[1] > row[2]
