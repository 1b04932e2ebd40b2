import numpy as np
import pytest

from retrofpn.backbone import Backbone, idw_interpolate, idw_weights
from retrofpn.config import RunConfig
from retrofpn.geometry import NeighborMap, PointCloud, knn_query
from retrofpn.gradcheck import check_gradients
from retrofpn.pyramid import build_pyramid
from retrofpn.tensor import ShapeError, Tensor, tsum, mul

from oracles import idw_oracle, mlp, raw_params


def tiny(seed=0, n=12, levels=2, k=3):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.uniform(0, 1, size=(n, 3)), rng.integers(0, 3, size=n))
    cfg = RunConfig(levels=levels, k=k, base_cell=0.5, max_points=[0, 6, 3])
    return rng, build_pyramid(cloud, cfg), cloud


def test_constant_input_gives_constant_features():
    rng, pyr, _ = tiny(1, n=40, levels=3)
    bb = Backbone(3, 8, 3, rng)
    enc = bb.encode(pyr, Tensor(np.tile([0.3, -0.2, 1.1], (40, 1))))
    for e in enc:
        assert np.allclose(e.data, e.data[0], atol=1e-14)


def test_k1_subset_pooling_passes_features_through():
    rng = np.random.default_rng(2)
    coords = rng.uniform(0, 1, size=(10, 3))
    feats = rng.normal(size=(10, 4))
    upper_idx = np.array([1, 4, 7])
    nm = knn_query(coords, coords[upper_idx], 1)
    from retrofpn.backbone import pool_neighbors

    pooled = pool_neighbors(Tensor(feats), nm).data
    np.testing.assert_allclose(pooled, np.hstack([feats[upper_idx], feats[upper_idx]]))


def test_encode_decode_match_direct_evaluation():
    rng, pyr, cloud = tiny(3)
    bb = Backbone(3, 5, 2, rng)
    P = raw_params(bb)
    x = cloud.coords - cloud.coords.min(axis=0)
    enc0 = mlp(x, P, "stem", "relu")
    pool = pyr[1].pool_neighbors.indices
    pooled = np.array([np.concatenate([enc0[r].max(axis=0), enc0[r].mean(axis=0)]) for r in pool])
    enc1 = mlp(pooled, P, "down_0", "relu")
    up, _ = idw_oracle(enc1, pyr[0].neighbors_up.indices, pyr[0].neighbors_up.sqdist)
    dec0 = mlp(np.hstack([enc0, up]), P, "up_0", "relu")
    feats = bb(pyr, Tensor(x))
    np.testing.assert_allclose(feats[1].data, enc1, atol=1e-12)
    np.testing.assert_allclose(feats[0].data, dec0, atol=1e-12)


class TestIdw:
    def test_exact_hit_returns_source_feature(self):
        src = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
        feats = np.array([[1.0, 2.0], [5.0, 5.0], [-3.0, 0.0]])
        nm = knn_query(src, [[1.0, 0.0, 0.0]], 3)
        np.testing.assert_allclose(idw_interpolate(Tensor(feats), nm).data, [[5.0, 5.0]], atol=1e-7)

    def test_constant_field(self):
        rng = np.random.default_rng(4)
        nm = knn_query(rng.random((20, 3)), rng.random((7, 3)), 4)
        out = idw_interpolate(Tensor(np.full((20, 3), 2.5)), nm).data
        np.testing.assert_allclose(out, 2.5, atol=1e-12)

    def test_weights_match_formula(self):
        rng = np.random.default_rng(5)
        src, qry = rng.random((30, 3)), rng.random((9, 3))
        nm = knn_query(src, qry, 5)
        feats = rng.normal(size=(30, 4))
        expected_out, expected_w = idw_oracle(feats, nm.indices, nm.sqdist)
        w = idw_weights(nm)
        np.testing.assert_allclose(w, expected_w, atol=1e-10)
        assert (w >= 0).all() and np.allclose(w.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(idw_interpolate(Tensor(feats), nm).data, expected_out, atol=1e-10)


def test_missing_neighbor_map():
    rng, pyr, cloud = tiny(6)
    bb = Backbone(3, 4, 2, rng)
    enc = bb.encode(pyr, Tensor(cloud.coords))
    pyr[0].neighbors_up = None
    with pytest.raises(ValueError, match="upward neighbor map"):
        bb.decode(pyr, enc)


def test_width_mismatch():
    rng, pyr, _ = tiny(7)
    with pytest.raises(ShapeError):
        Backbone(3, 4, 2, rng).encode(pyr, Tensor(np.zeros((12, 5))))


def test_gradients_pass_finite_differences():
    rng, pyr, cloud = tiny(8)
    bb = Backbone(3, 4, 2, rng)
    for _, p in bb.named_parameters():
        p.data = p.data + rng.normal(0, 0.2, size=p.shape)
    weights = Tensor(rng.normal(size=(12, 4)))

    def loss():
        return tsum(mul(bb(pyr, Tensor(cloud.coords))[0], weights))

    errs = check_gradients(loss, dict(bb.named_parameters()))
    assert max(errs.values()) < 1e-5
