import numpy as np
import pytest

from roigraph.fusion import (Calibration, FeatureMap, FeatureMapFormatError, MissingCalibration, bilinear_sample,
                             decorate_nodes, dumps_feature_map, load_feature_map, loads_feature_map, project,
                             reduce_channels, reduction_params, save_feature_map, sample_image_features)
from roigraph.geom import Box3D
from roigraph.nn import Layer, MlpParams, make_rng, mlp_forward
from roigraph.scene_io import loads_kitti_calib

# values in the style of a KITTI calib file
KITTI_CALIB = """P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P2: 7.215377e+02 0.000000e+00 6.095593e+02 4.485728e+01 0.000000e+00 7.215377e+02 1.728540e+02 2.163791e-01 0.000000e+00 0.000000e+00 1.000000e+00 2.745884e-03
R0_rect: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01
Tr_velo_to_cam: 7.533745e-03 -9.999714e-01 -6.166020e-04 -4.069766e-03 1.480249e-02 7.280733e-04 -9.998902e-01 -7.631618e-02 9.998621e-01 7.523790e-03 1.480755e-02 -2.717806e-01
"""

PLAIN = Calibration(np.hstack([np.eye(3), np.zeros((3, 1))]), image_width=100, image_height=100)


def test_reduction_identity():
    fmap = FeatureMap(make_rng(0).normal(size=(3, 4, 1)))
    ident = MlpParams([Layer([[1.0]], [0.0], "none")])
    np.testing.assert_array_equal(reduce_channels(fmap, ident).data, fmap.data)


def test_reduction_zero():
    fmap = FeatureMap(make_rng(0).normal(size=(3, 4, 8)))
    zero = MlpParams([Layer(np.zeros((16, 8)), np.zeros(16)), Layer(np.zeros((32, 16)), np.zeros(32), "none")])
    out = reduce_channels(fmap, zero)
    assert out.data.shape == (3, 4, 32) and not out.data.any()


def test_reduction_per_pixel():
    fmap = FeatureMap(make_rng(1).normal(size=(2, 2, 4)))
    params = reduction_params(4, 6, 32, seed=3)
    out = reduce_channels(fmap, params)
    for r in range(2):
        for c in range(2):
            np.testing.assert_allclose(out.data[r, c], mlp_forward(params, fmap.data[r, c][None])[0][0], atol=1e-12)


def test_reduction_channel_mismatch():
    with pytest.raises(ValueError):
        reduce_channels(FeatureMap(np.zeros((2, 2, 3))), reduction_params(4))


def test_project_plain():
    assert project(np.array([2.0, 1.0, 4.0]), PLAIN) == (0.5, 0.25, 4.0)


def test_project_kitti_chain():
    calib = loads_kitti_calib(KITTI_CALIB)
    P2 = np.array(KITTI_CALIB.splitlines()[1].split()[1:], float).reshape(3, 4)
    R0 = np.eye(4)
    R0[:3, :3] = np.array(KITTI_CALIB.splitlines()[2].split()[1:], float).reshape(3, 3)
    Tr = np.eye(4)
    Tr[:3] = np.array(KITTI_CALIB.splitlines()[3].split()[1:], float).reshape(3, 4)
    p = np.array([12.0, -1.5, -0.8])
    hom = P2 @ R0 @ Tr @ np.append(p, 1.0)
    u, v, d = project(p, calib)
    assert (u, v, d) == pytest.approx((hom[0] / hom[2], hom[1] / hom[2], hom[2]), rel=1e-12)
    assert 0 < u < 1242 and 0 < v < 375


def test_behind_camera_gets_zeros():
    fmap = FeatureMap(np.ones((100, 100, 3)))
    out = sample_image_features(np.array([[1.0, 1.0, -2.0], [1.0, 1.0, 4.0]]), fmap, PLAIN)
    assert not out[0].any() and np.all(out[1] == 1.0)


def test_bilinear_integer_and_half():
    data = make_rng(0).normal(size=(4, 5, 3))
    np.testing.assert_array_equal(bilinear_sample(FeatureMap(data), 2.0, 3.0), data[3, 2])
    ramp = FeatureMap(np.array([[[0.0], [1.0]]]))
    assert bilinear_sample(ramp, 0.5, 0.0)[0] == 0.5


def test_bilinear_constant_map():
    fmap = FeatureMap(np.full((6, 7, 2), 3.25))
    u = make_rng(1).uniform(-2, 9, 50)
    v = make_rng(2).uniform(-2, 8, 50)
    np.testing.assert_allclose(bilinear_sample(fmap, u, v), 3.25, atol=1e-12)


def test_decorate_disabled_and_out_of_image():
    s0 = np.ones((2, 26))
    box = Box3D(0, 0, 10, 1, 1, 1, 0)
    fmap = FeatureMap(np.ones((100, 100, 4)))
    assert decorate_nodes(s0, np.zeros((2, 4)), box, fmap, PLAIN, enabled=False) is s0
    far = Box3D(5000, 0, 1, 1, 1, 1, 0)  # u = 5000 is off the image
    out = decorate_nodes(s0, np.zeros((2, 4)), far, fmap, PLAIN)
    assert out.shape == (2, 30) and not out[:, 26:].any()


def test_decorate_gradient_map_by_hand():
    h, w = 20, 30
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    fmap = FeatureMap(np.stack([cols * 1.0, rows * 10.0], axis=-1), stride=2.0)
    # node at sensor (9, 5, 2): pixel (4.5, 2.5), grid (2.25, 1.25)
    box = Box3D(9.0, 5.0, 2.0, 1, 1, 1, 0)
    out = decorate_nodes(np.zeros((1, 26)), np.zeros((1, 4)), box, fmap, PLAIN)
    np.testing.assert_allclose(out[0, 26:], [2.25, 12.5], atol=1e-12)


def test_missing_calibration():
    with pytest.raises(MissingCalibration):
        decorate_nodes(np.zeros((1, 26)), np.zeros((1, 4)), Box3D(0, 0, 0, 1, 1, 1, 0), FeatureMap(np.ones((2, 2, 1))),
                       None)


def test_feature_map_round_trip(tmp_path):
    data = make_rng(4).normal(size=(5, 6, 3)).astype(np.float32).astype(np.float64)
    fmap = FeatureMap(data, 4.0)
    path = tmp_path / "f.rgf"
    save_feature_map(fmap, path)
    back = load_feature_map(path)
    assert back.stride == 4.0 and np.array_equal(back.data, data)
    assert dumps_feature_map(back) == path.read_bytes()


def test_feature_map_format_errors():
    blob = dumps_feature_map(FeatureMap(np.zeros((2, 2, 2))))
    with pytest.raises(FeatureMapFormatError):
        loads_feature_map(b"RGW1" + blob[4:])
    with pytest.raises(FeatureMapFormatError):
        loads_feature_map(blob[:-4])


def test_feature_map_validation():
    with pytest.raises(ValueError):
        FeatureMap(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        FeatureMap(np.full((1, 1, 1), np.nan))
