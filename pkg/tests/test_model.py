import numpy as np
import pytest

from patchseg import nn
from patchseg.model import (NetworkConfig, build_model, clone, probe_batch, randomize_biases)
from patchseg.sampling import assemble_batch
from patchseg.spatial import build_grid

SMALL = dict(num_classes=5, conv1=2, conv2=2, reduce=2, fc1=8, fc2=8, dist_channels=2,
             landmarks=3, conv3d1=1, conv3d2=1)


def cfg(**kw):
    return NetworkConfig(**{**SMALL, **kw})


def test_toggles_add_and_remove_layers():
    base = set(build_model(cfg()).layers)
    full = set(build_model(cfg(use_3d=True, use_dist=True, use_prob=True)).layers)
    assert {"p3d.conv1", "p3d.conv2", "dist.conv1", "dist.conv3", "aux_dist",
            "prob.fc1", "prob.fc2", "prob.fc3"} == full - base
    assert "aux_base" not in build_model(cfg(aux=False)).layers
    vec = build_model(cfg(use_dist=True, dist_mode="vector_fc")).layers
    assert "dist.fc" in vec and "dist.conv1" not in vec


def test_dist_kernel_set_grows_with_landmarks():
    assert "dist.conv5" in build_model(cfg(use_dist=True, landmarks=9)).layers
    assert "dist.conv5" not in build_model(cfg(use_dist=True, landmarks=7)).layers


def test_invalid_config():
    with pytest.raises(ValueError):
        build_model(cfg(dist_mode="rbf"))
    with pytest.raises(ValueError):
        build_model(cfg(num_classes=1))
    with pytest.raises(ValueError):
        cfg(dropout=1.0).validate()


def test_same_seed_same_model_and_outputs():
    c = cfg(use_dist=True, use_prob=True)
    a, b = build_model(c, seed=3), build_model(c, seed=3)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    batch = probe_batch(c, n=6)
    assert np.array_equal(a.forward(batch)[0], b.forward(batch)[0])
    assert not np.array_equal(build_model(c, seed=4).params["fc1.W"], a.params["fc1.W"])


def test_probabilities_sum_to_one():
    c = cfg(use_3d=True, use_dist=True, use_prob=True)
    probs, aux = build_model(c).forward(probe_batch(c, n=8))
    assert probs.shape == (8, 5) and np.allclose(probs.sum(1), 1, atol=1e-6)
    assert set(aux) == {"base", "dist"}
    for p in aux.values():
        assert np.allclose(p.sum(1), 1, atol=1e-6)


def test_zero_fc3_gives_uniform():
    m = build_model(cfg())
    m.set_param("fc3.W", np.zeros_like(m.params["fc3.W"]))
    m.set_param("fc3.b", np.zeros(5))
    probs, _ = m.forward(probe_batch(m.cfg, n=3))
    assert np.allclose(probs, 0.2, atol=1e-7)


def test_missing_branch_field_is_named():
    c = cfg(use_3d=True)
    batch = probe_batch(cfg(), n=2)
    with pytest.raises(ValueError, match="p3d"):
        build_model(c).forward(batch)
    with pytest.raises(ValueError, match="atlas_prob"):
        build_model(cfg(use_prob=True)).forward(batch)


def test_set_param_shape_error():
    m = build_model(cfg())
    with pytest.raises(nn.ShapeError):
        m.set_param("fc3.b", np.zeros(4))


def test_zero_prob_branch_equals_basenet():
    with_prob = build_model(cfg(use_prob=True), seed=1)
    base = build_model(cfg(), seed=1)
    with_prob.set_param("prob.fc3.W", np.zeros((5, 5)))
    batch = probe_batch(with_prob.cfg, n=5)
    assert np.array_equal(with_prob.forward(batch)[0], base.forward(batch)[0])


def test_dist_branch_off_equivalence():
    """Zeroing every path out of DistBranch reproduces BaseNet exactly."""
    base = build_model(cfg(), seed=2)
    dist = build_model(cfg(use_dist=True), seed=2)
    w = dist.params["fc2.W"].copy()
    w[:8] = base.params["fc2.W"]
    w[8:] = 0
    dist.set_param("fc2.W", w)
    dist.set_param("fc2.b", base.params["fc2.b"])
    batch = probe_batch(dist.cfg, n=5)
    a, aux_a = dist.forward(batch)
    b, aux_b = base.forward(batch)
    assert np.array_equal(a, b) and np.array_equal(aux_a["base"], aux_b["base"])


def test_prob_branch_delta_is_three_square_layers():
    for L in (5, 8, 135):
        off = build_model(NetworkConfig(num_classes=L)).count_params()
        on = build_model(NetworkConfig(num_classes=L, use_prob=True)).count_params()
        assert on - off == 3 * L * L
    assert 3 * 135**2 == 54_675 == 1_304_090 - 1_249_415 == 1_563_186 - 1_508_511


def test_dense_param_count():
    assert nn.Dense(10, 5, name="x").params["W"].size + 5 == 55
    m = build_model(cfg(aux=False))
    total = sum(l.params["W"].size + l.params.get("b", np.empty(0)).size for l in m.layers.values())
    assert m.count_params() == total


def test_aux_weights_zero_match_no_aux_on_shared_grads():
    c_aux = cfg(use_dist=True, aux=True, aux_base_weight=0.0, aux_dist_weight=0.0)
    c_none = cfg(use_dist=True, aux=False)
    a, b = build_model(c_aux, seed=5), build_model(c_none, seed=5)
    batch = probe_batch(c_aux, n=6)
    la = a.loss_and_backward(batch, rng=np.random.default_rng(1))
    lb = b.loss_and_backward(batch, rng=np.random.default_rng(1))
    assert la["main"] == lb["main"] == la["total"]
    for k, g in b.grads.items():
        assert np.array_equal(a.grads[k], g), k
    assert not a.grads["aux_base.W"].any()


def test_aux_loss_adds_weighted_terms():
    c = cfg(use_dist=True, aux_base_weight=0.3, aux_dist_weight=0.5)
    m = build_model(c)
    out = m.loss_and_backward(probe_batch(c, n=4))
    assert out["total"] == pytest.approx(out["main"] + 0.3 * out["aux_base"] + 0.5 * out["aux_dist"])


@pytest.mark.parametrize("dist_mode,rbf", [("conv2d", False), ("vector_fc", True)])
def test_grad_check_all_branches(dist_mode, rbf):
    c = cfg(use_3d=True, use_dist=True, use_prob=True, dist_mode=dist_mode, use_rbf=rbf)
    m = randomize_biases(build_model(c, seed=0))
    # a small volume keeps exp(-alpha d^2) away from underflow, where the loss
    # differences drown in rounding
    errs = m.grad_check(probe_batch(c, n=3, dims=(12, 12, 12)), eps=1e-6, max_entries=12)
    assert max(errs.values()) < 1e-4


def test_zero_weight_model_bias_gradients():
    c = cfg(use_dist=True, use_prob=True)
    m = build_model(c, dtype=np.float64)
    for k, p in m.params.items():
        p[...] = 0
    batch = probe_batch(c, n=4)
    for f in ("p25", "p51s", "p71s", "dist", "atlas_prob"):
        getattr(batch, f)[...] = 0
    m._loss_and_backward(batch, train=False)
    for g in m.grads.values():
        assert np.all(np.isfinite(g))
    biases = {k: p for k, p in m.params.items() if nn.is_bias(k)}
    analytic = {k: m.grads[k].copy() for k in biases}
    errs = nn.grad_check_arrays(lambda: m.loss(batch), biases, analytic, eps=1e-6)
    assert max(errs.values()) < 1e-8, errs


def test_dense_inference_matches_per_voxel_patches():
    c = cfg(use_3d=True, use_dist=True)
    m = build_model(c, seed=7)
    rng = np.random.default_rng(0)
    vol = rng.standard_normal((20, 18, 16)).astype(np.float32)
    centers = np.stack([rng.integers(0, n, 40) for n in vol.shape], 1)
    centers[:3] = [(0, 0, 0), (19, 17, 15), (0, 17, 8)]
    grid = build_grid(vol.shape, c.landmarks)
    for plane in (0, 2):
        batch = assemble_batch(vol, centers, plane=plane, use_3d=True, grid=grid)
        ref = m.forward(batch)[0]
        dense = m.dense_features(vol, plane=plane)
        got = m.forward(batch, dense=dense)[0]
        assert np.allclose(got, ref, atol=1e-5)
        assert np.array_equal(m.predict(batch, chunk=7, dense=dense), np.argmax(got, 1))


def test_dense_features_refused_in_training():
    m = build_model(cfg())
    with pytest.raises(ValueError):
        m.forward(probe_batch(m.cfg, n=1), train=True, dense=object())


def test_clone_is_independent():
    m = build_model(cfg())
    m2 = clone(m)
    m2.params["fc3.b"][...] += 1
    assert not np.array_equal(m.params["fc3.b"], m2.params["fc3.b"])


def test_dropout_changes_train_but_not_eval():
    c = cfg(dropout=0.5)
    m = build_model(c)
    batch = probe_batch(c, n=4)
    e1, e2 = m.forward(batch)[0], m.forward(batch)[0]
    assert np.array_equal(e1, e2)
    t = m.forward(batch, train=True, rng=np.random.default_rng(3))[0]
    assert not np.array_equal(t, e1)
