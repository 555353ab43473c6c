import numpy as np
import pytest

from xinv import attribution, datapipe, model
from xinv.attribution import Heatmap, bilinear_upsample, grad_cam, region_mass_fraction


# --- bilinear upsample ------------------------------------------------------


def test_upsample_identity():
    v = np.arange(16.0).reshape(4, 4)
    assert np.array_equal(bilinear_upsample(v, 4, 4), v)


def test_upsample_corners_exact():
    v = np.array([[1.0, 2.0], [3.0, 7.0]])
    up = bilinear_upsample(v, 9, 9)
    assert up[0, 0] == 1.0 and up[0, -1] == 2.0
    assert up[-1, 0] == 3.0 and up[-1, -1] == 7.0


def test_upsample_midpoint_average():
    v = np.array([[0.0, 1.0]])
    up = bilinear_upsample(v, 1, 3)
    assert np.allclose(up, [[0.0, 0.5, 1.0]])


def test_upsample_constant_stays_constant():
    up = bilinear_upsample(np.full((3, 3), 0.4), 17, 23)
    assert np.allclose(up, 0.4)


def test_upsample_preserves_monotone_ramp():
    v = np.linspace(0, 1, 4)[None, :].repeat(2, axis=0)
    up = bilinear_upsample(v, 5, 20)
    assert np.all(np.diff(up, axis=1) >= -1e-12)


def test_upsample_single_cell():
    assert np.allclose(bilinear_upsample([[2.5]], 4, 4), 2.5)


# --- grad-cam ---------------------------------------------------------------


def test_gradcam_zero_classifier_gives_zero_map():
    params = model.init_params(seed=1)
    params.classifier["c.fc.w"].data[:] = 0.0
    rng = np.random.default_rng(0)
    hm = grad_cam(params, rng.random((32, 32)))
    assert np.array_equal(hm.values, np.zeros((32, 32)))


def test_gradcam_range_and_shape():
    params = model.init_params(seed=2)
    rng = np.random.default_rng(1)
    hm = grad_cam(params, rng.random((32, 32)))
    assert hm.values.shape == (32, 32)
    assert hm.values.min() >= 0.0 and hm.values.max() <= 1.0


def test_gradcam_nonzero_map_peaks_at_one():
    params = model.init_params(seed=3)
    rng = np.random.default_rng(2)
    hm = grad_cam(params, rng.random((32, 32)) + 0.1)
    if hm.values.max() > 0:
        assert hm.values.max() == pytest.approx(1.0)


def test_gradcam_scale_invariant_argmax_with_zero_biases():
    # with zero biases the network is positively homogeneous in the input, so
    # rescaling the image must not move the heatmap argmax
    params = model.init_params(seed=4)
    for t in params.extractor.values():
        if t.data.ndim == 1:
            t.data[:] = 0.0
    params.classifier["c.fc.b"].data[:] = 0.0
    rng = np.random.default_rng(3)
    img = rng.random((32, 32))
    a = grad_cam(params, img)
    b = grad_cam(params, 0.5 * img)
    assert a.values.max() > 0
    assert np.argmax(a.values) == np.argmax(b.values)


def test_gradcam_does_not_leave_gradients_behind():
    params = model.init_params(seed=5)
    rng = np.random.default_rng(4)
    grad_cam(params, rng.random((32, 32)))
    feats = model.extract(params, __import__("xinv.autodiff", fromlist=["Tensor"]).Tensor(rng.random((1, 1, 32, 32))))
    assert feats.data.shape == (1, model.FEATURE_DIM)


# --- region mass ------------------------------------------------------------


def test_region_mass_fraction_counts_share():
    values = np.zeros((8, 8))
    values[2:4, 2:4] = 1.0
    hm = Heatmap(values=values, image=np.zeros((8, 8)))
    assert region_mass_fraction(hm, slice(2, 4), slice(2, 4)) == 1.0
    assert region_mass_fraction(hm, slice(0, 2), slice(0, 2)) == 0.0
    values[0, 0] = 4.0
    assert region_mass_fraction(hm, slice(2, 4), slice(2, 4)) == 0.5


def test_region_mass_fraction_zero_map():
    hm = Heatmap(values=np.zeros((4, 4)), image=np.zeros((4, 4)))
    assert region_mass_fraction(hm, slice(0, 4), slice(0, 4)) == 0.0


# --- output files -----------------------------------------------------------


def test_save_heatmap_writes_three_files(tmp_path):
    rng = np.random.default_rng(5)
    hm = Heatmap(values=rng.random((32, 32)), image=rng.random((32, 32)))
    out = tmp_path / "cam.pgm"
    attribution.save_heatmap(hm, out)
    assert out.exists()
    assert out.with_suffix(".composite.pgm").exists()
    assert out.with_suffix(".csv").exists()
    composite = datapipe.decode_image(out.with_suffix(".composite.pgm"))
    assert composite.shape == (1, 32, 64)
