import csv

import numpy as np
import pytest

from patchseg import pipeline as P
from patchseg.atlas import atlas_argmax, build_atlas
from patchseg.model import NetworkConfig, build_model
from patchseg.phantom import PhantomSpec, generate_phantom
from patchseg.volume import Volume, save_volume

NET = dict(num_classes=5, conv1=2, conv2=2, reduce=2, fc1=8, fc2=8, dist_channels=2,
           landmarks=3, conv3d1=1, conv3d2=1)


@pytest.fixture(scope="module")
def suite():
    spec = dict(dims=(32, 32, 32), num_classes=5)
    train = [generate_phantom(PhantomSpec(seed=s, **spec)) for s in (1, 2)]
    val = [generate_phantom(PhantomSpec(seed=9, **spec))]
    return train, val


def small_cfg(**kw):
    net = {k: kw.pop(k) for k in list(kw) if k in NetworkConfig.__dataclass_fields__}
    base = dict(epochs=2, batches_per_epoch=3, batch_size=8, lr0=1e-2, val_voxels=50)
    return P.TrainConfig(network=NetworkConfig(**{**NET, **net}), **{**base, **kw}).validate()


# -- config ----------------------------------------------------------------------


def test_config_roundtrip():
    cfg = small_cfg(use_dist=True, augment=True, class_weights=(1.0, 2.0, 0.5, 1.0, 1.0),
                    train_images=("a.mrv", "b.mrv"), train_labels=("al.mrv", "bl.mrv"))
    text = P.format_config(cfg)
    assert P.parse_config(text) == cfg
    assert P.format_config(P.parse_config(text)) == text


def test_config_parsing_details():
    cfg = P.parse_config("""
        # comment
        num_classes = 4   # trailing comment
        use_dist = yes
        train_images = x.mrv, y.mrv
        train_labels = xl.mrv,yl.mrv
        class_weights = none
        lr0 = 0.5
    """)
    assert cfg.network.num_classes == 4 and cfg.network.use_dist
    assert cfg.train_images == ("x.mrv", "y.mrv") and cfg.train_labels == ("xl.mrv", "yl.mrv")
    assert cfg.class_weights is None and cfg.lr0 == 0.5


@pytest.mark.parametrize("text,match", [
    ("bogus = 1", "unknown key"),
    ("epochs = 2\nepochs = 3", "duplicate"),
    ("use_3d = maybe", "boolean"),
    ("epochs = two", "int"),
    ("just words", "key = value"),
    ("epochs = 0", "epochs"),
    ("sampling = random", "sampling"),
    ("dist_mode = rbf", "dist_mode"),
    ("train_images = a.mrv", "differ in length"),
    ("num_classes = 3\nclass_weights = 1, 2", "class_weights"),
])
def test_config_errors(text, match):
    with pytest.raises(P.ConfigError, match=match):
        P.parse_config(text)


def test_replace_reaches_network_fields():
    cfg = P.replace(small_cfg(), use_prob=True, epochs=5)
    assert cfg.network.use_prob and cfg.epochs == 5


# -- lr schedule -----------------------------------------------------------------


def test_lr_csv_matches_formula(tmp_path):
    cfg = small_cfg(epochs=37, lr0=1e-3)
    P.write_lr_csv(tmp_path / "lr.csv", cfg)
    rows = list(csv.reader(open(tmp_path / "lr.csv")))[1:]
    assert len(rows) == 38
    for e, lr in rows:
        assert abs(float(lr) - 1e-3 * (1 - int(e) / 37) ** 0.9) <= 1e-12
    assert float(rows[-1][1]) == 0.0


# -- training --------------------------------------------------------------------


def test_zero_batches_returns_init(suite):
    train, _ = suite
    res = P.fit(small_cfg(batches_per_epoch=0), train)
    init = build_model(res.checkpoint.config.network, 0)
    for k, v in init.params.items():
        assert np.array_equal(res.checkpoint.params[k], v)


def test_zero_lr_leaves_params(suite):
    train, _ = suite
    res = P.fit(small_cfg(lr0=0.0, use_dist=True), train)
    init = build_model(res.checkpoint.config.network, 0)
    for k, v in init.params.items():
        assert np.array_equal(res.checkpoint.params[k], v)


def test_training_moves_params_and_logs_history(suite):
    train, val = suite
    lines = []
    res = P.fit(small_cfg(), train, val, log=lines.append)
    init = build_model(res.checkpoint.config.network, 0)
    assert not np.array_equal(res.checkpoint.params["fc3.W"], init.params["fc3.W"])
    assert [h["epoch"] for h in res.history] == [0, 1] and len(lines) == 2
    assert res.history[0]["lr"] == 1e-2
    assert all(0 <= h["val_dice"] <= 1 and np.isfinite(h["train_loss"]) for h in res.history)


def test_identical_runs_give_identical_checkpoint_bytes(suite):
    train, val = suite
    cfg = small_cfg(use_3d=True, use_dist=True, use_prob=True, augment=True, seed=4)
    a = P.checkpoint_bytes(P.fit(cfg, train, val).checkpoint)
    b = P.checkpoint_bytes(P.fit(cfg, train, val).checkpoint)
    assert a == b
    c = P.checkpoint_bytes(P.fit(P.replace(cfg, seed=5), train, val).checkpoint)
    assert c != a


def test_aux_off_and_zero_aux_weights_train_the_same(suite):
    train, _ = suite
    on = P.fit(small_cfg(use_dist=True, aux_base_weight=0.0, aux_dist_weight=0.0), train)
    off = P.fit(small_cfg(use_dist=True, aux=False), train)
    for k, v in off.checkpoint.params.items():
        assert np.array_equal(on.checkpoint.params[k], v), k


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(suite):
    train, _ = suite
    with pytest.raises(P.TrainingDivergedError, match="epoch"):
        P.fit(small_cfg(lr0=1e12, batches_per_epoch=20, epochs=1, dropout=0.0), train)


def test_training_input_checks(suite):
    train, _ = suite
    with pytest.raises(ValueError):
        P.fit(small_cfg(), [])
    with pytest.raises(ValueError, match="classes"):
        P.fit(small_cfg(num_classes=6), train)


# -- checkpoints -----------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(suite):
    train, val = suite
    return P.fit(small_cfg(use_dist=True, use_prob=True), train, val)


def test_checkpoint_roundtrip(tmp_path, trained):
    ck = trained.checkpoint
    P.save_checkpoint(tmp_path / "m.ckpt", ck)
    back = P.load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == ck.config and back.epoch == ck.epoch and back.dims == ck.dims
    assert back.norm == ck.norm
    for k in ck.params:
        assert np.array_equal(back.params[k], ck.params[k])
        assert np.array_equal(back.velocities[k], ck.velocities[k])
    assert back.build().count_params() == ck.build().count_params()
    assert P.checkpoint_bytes(back) == P.checkpoint_bytes(ck)


def test_checkpoint_errors(trained):
    data = P.checkpoint_bytes(trained.checkpoint)
    with pytest.raises(P.CheckpointMagicError):
        P.parse_checkpoint(b"XXXXXXXX" + data[8:])
    with pytest.raises(P.CheckpointVersionError):
        P.parse_checkpoint(b"PSCKPT02" + data[8:])
    with pytest.raises(P.CheckpointTruncatedError):
        P.parse_checkpoint(data[: len(data) // 2])
    flipped = bytearray(data)
    flipped[-100] ^= 0xFF
    with pytest.raises(P.ChecksumError):
        P.parse_checkpoint(bytes(flipped))
    # a checkpoint whose config disagrees with its tensor list
    other = P.Checkpoint(P.replace(trained.checkpoint.config, use_prob=False),
                         trained.checkpoint.params, trained.checkpoint.velocities, 1,
                         trained.checkpoint.norm, trained.checkpoint.dims)
    with pytest.raises(P.TensorCountError):
        P.parse_checkpoint(P.checkpoint_bytes(other))


def test_checkpoint_shape_mismatch(trained):
    ck = trained.checkpoint
    params = dict(ck.params)
    params["fc3.b"] = np.zeros(7, np.float32)
    bad = P.Checkpoint(ck.config, params, ck.velocities, 1, ck.norm, ck.dims)
    with pytest.raises(P.TensorMismatchError, match="fc3.b"):
        P.parse_checkpoint(P.checkpoint_bytes(bad))


# -- inference -------------------------------------------------------------------


def test_predict_roundtrip_bit_identical(tmp_path, suite, trained):
    _, val = suite
    P.save_checkpoint(tmp_path / "m.ckpt", trained.checkpoint)
    back = P.load_checkpoint(tmp_path / "m.ckpt")
    v = val[0][0]
    a = P.predict_volume(trained.checkpoint, v, trained.atlas)
    b = P.predict_volume(back, v, trained.atlas, threads=3, chunk=1000)
    assert np.array_equal(a.labels, b.labels)
    assert a.labels.max() < 5
    assert np.all(a.labels[v.data == 0] == 0)


def test_predict_with_identity_atlas_branch_is_atlas_argmax(suite):
    train, _ = suite
    labs = [l for _, l in train]
    atl = build_atlas(labs, 1e-3)
    cfg = small_cfg(use_prob=True)
    m = build_model(cfg.network)
    for i in (1, 2, 3):
        m.set_param(f"prob.fc{i}.W", np.eye(5))
    m.set_param("fc3.W", np.zeros_like(m.params["fc3.W"]))
    m.set_param("fc3.b", np.zeros(5))
    v = train[0][0]
    norm = P.compute_norm_stats([v])
    got = P.predict_volume(m, v, atl, norm=norm)
    inside = v.data != 0
    assert np.array_equal(got.labels[inside], atlas_argmax(atl).labels[inside])
    assert np.all(got.labels[~inside] == 0)
    full = P.predict_volume(m, v, atl, norm=norm, mask=False)
    assert np.array_equal(full.labels, atlas_argmax(atl).labels)


def test_predict_errors(suite, trained):
    _, val = suite
    v = val[0][0]
    with pytest.raises(ValueError, match="atlas"):
        P.predict_volume(trained.checkpoint, v)
    small = Volume(np.ones((33, 32, 32), np.float32))
    with pytest.raises(ValueError, match="dims"):
        P.predict_volume(trained.checkpoint, small, trained.atlas)
    with pytest.raises(ValueError, match="norm"):
        P.predict_volume(trained.checkpoint.build(), v, trained.atlas)


def test_predict_empty_mask(trained):
    out = P.predict_volume(trained.checkpoint, Volume(np.zeros((32, 32, 32), np.float32)),
                           trained.atlas)
    assert not out.labels.any()


def test_worker_count(monkeypatch):
    monkeypatch.setenv("PATCHSEG_THREADS", "2")
    assert P.worker_count(8) == 2
    monkeypatch.setenv("PATCHSEG_THREADS", "x")
    with pytest.raises(ValueError):
        P.worker_count()
    monkeypatch.delenv("PATCHSEG_THREADS")
    assert P.worker_count(3) == 3


def test_train_model_writes_outputs(tmp_path, suite):
    train, val = suite
    paths = {}
    for tag, pairs in (("train", train), ("val", val)):
        imgs, labs = [], []
        for i, (v, l) in enumerate(pairs):
            imgs.append(str(tmp_path / f"{tag}{i}_img.mrv"))
            labs.append(str(tmp_path / f"{tag}{i}_lab.mrv"))
            save_volume(imgs[-1], v)
            save_volume(labs[-1], l)
        paths[tag] = (tuple(imgs), tuple(labs))
    cfg = small_cfg(use_prob=True, out_dir=str(tmp_path / "run"), epochs=1,
                    train_images=paths["train"][0], train_labels=paths["train"][1],
                    val_images=paths["val"][0], val_labels=paths["val"][1])
    ck, csv_path = P.train_model(cfg)
    assert (tmp_path / "run" / "model.ckpt").exists() and (tmp_path / "run" / "atlas.mrv").exists()
    rows = list(csv.reader(open(csv_path)))
    assert tuple(rows[0]) == P.METRICS_HEADER and len(rows) == 2
    assert P.load_checkpoint(tmp_path / "run" / "model.ckpt").config == cfg
