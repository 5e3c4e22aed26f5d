import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppclearn.errors import EmptySet, ModelFormatError
from ppclearn.ppc import CorrespondenceSet
from ppclearn.weightnet import (WeightModel, _forward, backward, compute_features, forward, init_params, load_model,
                                load_models, model_to_dict, modified_softsign, save_model)


def feats(n=40, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 8))


def test_output_contract():
    p = init_params(0)
    s = forward(p, feats())
    assert s.shape == (40,)
    assert np.all(s > 0) and np.all(s < 1)
    p.rho = np.log(3.0)
    assert np.all(forward(p, feats()) < 3.0)
    assert p.global_factor == pytest.approx(3.0)


@given(st.floats(-1e6, 1e6))
def test_modified_softsign_range(x):
    v = modified_softsign(x)
    assert 0.0 <= v <= 1.0
    assert modified_softsign(0.0) == 0.5


def test_per_point_outputs_are_permutation_equivariant():
    p = init_params(1)
    f = feats(30, 1)
    perm = np.random.default_rng(2).permutation(30)
    np.testing.assert_allclose(forward(p, f[perm]), forward(p, f)[perm], rtol=1e-12)


@pytest.mark.parametrize("n", [1, 37, 1024])
def test_inference_pass_matches_training_pass_bitwise(n):
    p = init_params(4)
    p.rho = 0.3
    f = feats(n, 4)
    assert np.array_equal(forward(p, f), _forward(p, f)["s"])


def test_global_context_affects_outputs():
    p = init_params(3)
    f = feats(30, 3)
    f2 = f.copy()
    f2[0] *= 50.0
    assert not np.allclose(forward(p, f)[1:], forward(p, f2)[1:])


def test_backward_matches_central_differences():
    p = init_params(4)
    p.rho = 0.3
    f = feats(12, 4)
    up = np.random.default_rng(5).normal(size=12)
    grads, g_feats = backward(p, f, up)
    theta = p.flat()
    g = grads.flat()
    rng = np.random.default_rng(6)
    h = 1e-6
    for i in list(rng.choice(theta.size - 1, 60, replace=False)) + [theta.size - 1]:
        e = np.zeros_like(theta)
        e[i] = h
        fd = (up @ forward(p.with_flat(theta + e), f) - up @ forward(p.with_flat(theta - e), f)) / (2 * h)
        assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-7)
    for i in range(3):
        for j in range(8):
            e = np.zeros_like(f)
            e[i, j] = h
            fd = (up @ forward(p, f + e) - up @ forward(p, f - e)) / (2 * h)
            assert g_feats[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_flat_roundtrip():
    p = init_params(7)
    q = p.with_flat(p.flat())
    np.testing.assert_array_equal(q.flat(), p.flat())
    with pytest.raises(ValueError):
        p.with_flat(p.flat()[:-2])


def test_empty_input_rejected():
    with pytest.raises(EmptySet):
        forward(init_params(0), np.zeros((0, 8)))


def test_features_are_centred_and_scaled():
    rng = np.random.default_rng(8)
    cs = CorrespondenceSet(rng.normal(size=(10, 3)) * 5 + 100, np.zeros((10, 2)), rng.normal(size=(10, 3)),
                           rng.normal(size=10), rng.random(10))
    f = compute_features(cs, 2.0)
    assert f.shape == (10, 8)
    np.testing.assert_allclose(f[:, :3].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(f[:, 6], cs.d / 2.0)
    np.testing.assert_allclose(f[:, 7], cs.ngc)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(-2, 2))
def test_model_file_roundtrip_is_bit_exact(tmp_path_factory, seed, rho):
    p = init_params(seed)
    p.rho = rho
    m = WeightModel(p, 1.7, level=2, seed=seed, meta={"best_epoch": 3})
    path = tmp_path_factory.mktemp("m") / "level2.json"
    save_model(m, path)
    m2 = load_model(path)
    np.testing.assert_array_equal(m2.params.flat(), p.flat())
    assert m2.feature_scale == 1.7 and m2.level == 2 and m2.meta == {"best_epoch": 3}
    f = feats(10, seed)
    np.testing.assert_array_equal(forward(m2.params, f), forward(p, f))


def test_load_models_by_level(tmp_path):
    for lvl in (0, 1):
        save_model(WeightModel(init_params(lvl), level=lvl), tmp_path / f"level{lvl}.json")
    assert sorted(load_models(tmp_path)) == [0, 1]


def test_corrupt_model_files_rejected(tmp_path):
    d = model_to_dict(WeightModel(init_params(0)))
    for key, value in [("format", "other"), ("version", 99)]:
        bad = dict(d, **{key: value})
        (tmp_path / "m.json").write_text(json.dumps(bad))
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "m.json")
    bad = dict(d, layer_sizes={"mlp1": [8, 32, 128], "mlp2": [256, 64, 1]})
    (tmp_path / "m.json").write_text(json.dumps(bad))
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "m.json")
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "m.json")
