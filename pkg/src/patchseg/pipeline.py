"""Training loop, whole-volume inference, checkpoints and run configuration.

Config files are UTF-8 ``key = value`` lines; ``#`` starts a comment, blank
lines are ignored and unknown or repeated keys are errors. Network keys are
the ``NetworkConfig`` field names; list values are comma separated.

Checkpoint layout (all integers little-endian)::

    b"PSCKPT01"
    u32 n, n bytes UTF-8 config text (the run config plus ckpt.* keys)
    u32 count, then count tensors: u16 name length, name, u8 rank, u32 dims, f32 payload
    u32 count, then the SGD velocities in the same scheme
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import csv
import dataclasses
import math
import os
import struct
import threading
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import atlas as atlas_mod
from . import metrics, nn, sampling, spatial
from .model import Model, NetworkConfig, build_model, clone
from .volume import LabelMap, NormStats, Volume, compute_norm_stats, load_volume, normalize

CKPT_MAGIC = b"PSCKPT01"
METRICS_HEADER = ("epoch", "lr", "train_loss", "val_dice")


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class TensorCountError(CheckpointError):
    pass


class TensorMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


# -- configuration -------------------------------------------------------------


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    epochs: int = 20
    batches_per_epoch: int = 50
    batch_size: int = 256
    sampling: str = "natural-masked"
    augment: bool = False
    seed: int = 0
    lr0: float = 1e-3
    momentum: float = 0.9
    power: float = 0.9
    plane: int = 2
    train_images: tuple[str, ...] = ()
    train_labels: tuple[str, ...] = ()
    val_images: tuple[str, ...] = ()
    val_labels: tuple[str, ...] = ()
    atlas_epsilon: float = atlas_mod.DEFAULT_EPSILON
    val_voxels: int = 20000
    class_weights: tuple[float, ...] | None = None
    out_dir: str = "run"

    def validate(self) -> "TrainConfig":
        self.network.validate()
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.batches_per_epoch < 0:
            raise ConfigError("batches_per_epoch must be >= 0")
        if self.sampling not in sampling.SAMPLING_MODES:
            raise ConfigError(f"sampling must be one of {sampling.SAMPLING_MODES}")
        if self.plane not in (0, 1, 2):
            raise ConfigError("plane must be 0, 1 or 2")
        if self.lr0 < 0 or not 0 <= self.momentum < 1 or self.power <= 0:
            raise ConfigError("need lr0 >= 0, 0 <= momentum < 1 and power > 0")
        if self.val_voxels < 0 or self.atlas_epsilon < 0:
            raise ConfigError("val_voxels and atlas_epsilon must be >= 0")
        if len(self.train_images) != len(self.train_labels):
            raise ConfigError("train_images and train_labels differ in length")
        if len(self.val_images) != len(self.val_labels):
            raise ConfigError("val_images and val_labels differ in length")
        if self.class_weights is not None and len(self.class_weights) != self.network.num_classes:
            raise ConfigError("class_weights needs one entry per class")
        return self


_LIST_KEYS = ("train_images", "train_labels", "val_images", "val_labels")
_NET_TYPES = {f.name: type(f.default) for f in fields(NetworkConfig)}
_RUN_TYPES = {
    f.name: type(f.default)
    for f in fields(TrainConfig)
    if f.name not in ("network", "class_weights", *_LIST_KEYS)
}


def _parse_scalar(key, text, kind):
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def _split_list(text):
    return tuple(p.strip() for p in text.split(",") if p.strip())


def parse_config_text(text: str, extra_prefix: str | None = None) -> tuple[TrainConfig, dict]:
    """Parse config text; keys starting with ``extra_prefix`` are returned raw."""
    seen: dict[str, str] = {}
    extra: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen or key in extra:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if extra_prefix and key.startswith(extra_prefix):
            extra[key] = value
        elif key in _NET_TYPES or key in _RUN_TYPES or key in _LIST_KEYS or key == "class_weights":
            seen[key] = value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    net = {k: _parse_scalar(k, v, _NET_TYPES[k]) for k, v in seen.items() if k in _NET_TYPES}
    run = {k: _parse_scalar(k, v, _RUN_TYPES[k]) for k, v in seen.items() if k in _RUN_TYPES}
    for k in _LIST_KEYS:
        if k in seen:
            run[k] = _split_list(seen[k])
    if "class_weights" in seen and seen["class_weights"].lower() != "none":
        run["class_weights"] = tuple(_parse_scalar("class_weights", w, float)
                                     for w in _split_list(seen["class_weights"]))
    try:
        cfg = TrainConfig(network=NetworkConfig(**net), **run).validate()
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg, extra


def parse_config(text: str) -> TrainConfig:
    return parse_config_text(text)[0]


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def format_config(cfg: TrainConfig) -> str:
    """Canonical text form; ``parse_config(format_config(c)) == c``."""
    lines = [f"{f.name} = {_fmt(getattr(cfg.network, f.name))}" for f in fields(NetworkConfig)]
    for f in fields(TrainConfig):
        if f.name == "network":
            continue
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if v is None else _fmt(v)}")
    return "\n".join(lines) + "\n"


def replace(cfg: TrainConfig, **changes) -> TrainConfig:
    """Copy of ``cfg`` with run or network fields changed."""
    net = {k: changes.pop(k) for k in list(changes) if k in _NET_TYPES}
    return dataclasses.replace(cfg, network=dataclasses.replace(cfg.network, **net), **changes).validate()


# -- checkpoints ---------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray]
    epoch: int
    norm: NormStats
    dims: tuple[int, int, int]

    def build(self) -> Model:
        m = build_model(self.config.network, self.config.seed)
        for k, v in self.params.items():
            m.set_param(k, v)
        return m


def _pack_tensors(tensors: dict) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    text = format_config(ckpt.config) + "".join(
        f"ckpt.{k} = {v}\n" for k, v in (
            ("epoch", ckpt.epoch),
            ("norm_mean", repr(float(ckpt.norm.mean))),
            ("norm_std", repr(float(ckpt.norm.std))),
            ("dims", ", ".join(str(d) for d in ckpt.dims)),
        )
    )
    raw = text.encode("utf-8")
    body = b"".join([
        CKPT_MAGIC, struct.pack("<I", len(raw)), raw,
        _pack_tensors(ckpt.params), _pack_tensors(ckpt.velocities),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated while reading {what} at byte {self.pos}"
                f" (need {n}, have {len(self.data) - self.pos})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_tensors(r: _Reader, expected: dict, what: str) -> dict:
    (count,) = r.unpack("<I", f"{what} count")
    if count != len(expected):
        raise TensorCountError(f"{what}: file has {count} tensors, config needs {len(expected)}")
    out = {}
    for _ in range(count):
        (n,) = r.unpack("<H", f"{what} name length")
        name = r.take(n, f"{what} name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", f"{name} rank")
        shape = r.unpack(f"<{rank}I", f"{name} dims")
        size = math.prod(shape)
        payload = r.take(4 * size, f"{name} payload")
        if name not in expected:
            raise TensorMismatchError(f"{what}: unexpected tensor {name!r}")
        if tuple(shape) != tuple(expected[name]):
            raise TensorMismatchError(f"{name}: shape {tuple(shape)} != expected {tuple(expected[name])}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return out


def parse_checkpoint(data: bytes) -> Checkpoint:
    if data[:8] != CKPT_MAGIC:
        if data[:6] == CKPT_MAGIC[:6] and len(data) >= 8:
            raise CheckpointVersionError(f"unsupported checkpoint version {data[6:8]!r}")
        raise CheckpointMagicError("not a checkpoint (bad magic)")
    r = _Reader(data)
    r.pos = 8
    (n,) = r.unpack("<I", "config length")
    text = r.take(n, "config text").decode("utf-8")
    cfg, extra = parse_config_text(text, extra_prefix="ckpt.")
    try:
        epoch = int(extra["ckpt.epoch"])
        norm = NormStats(float(extra["ckpt.norm_mean"]), float(extra["ckpt.norm_std"]))
        dims = tuple(int(d) for d in _split_list(extra["ckpt.dims"]))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"bad checkpoint metadata: {e}") from None
    shapes = {k: v.shape for k, v in build_model(cfg.network, cfg.seed).params.items()}
    params = _read_tensors(r, shapes, "parameters")
    velocities = _read_tensors(r, shapes, "velocities")
    (stored,) = r.unpack("<I", "CRC32 trailer")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} unexpected bytes after the CRC32 trailer")
    if zlib.crc32(data[: r.pos - 4]) != stored:
        raise ChecksumError("checkpoint CRC32 mismatch (corrupted payload)")
    return Checkpoint(cfg, params, velocities, epoch, norm, dims)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# -- training ------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    atlas: atlas_mod.ProbAtlas | None


def _mean_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    scores = [
        metrics.dice(pred == c, gt == c)
        for c in range(1, num_classes)
        if np.any(pred == c) or np.any(gt == c)
    ]
    return float(np.mean(scores)) if scores else float("nan")


def _check_dims(pairs, what):
    dims = {v.dims for v, _ in pairs} | {l.dims for _, l in pairs}
    if len(dims) > 1:
        raise ValueError(f"{what} volumes differ in dims: {sorted(dims)}")


def fit(cfg: TrainConfig, train, val=(), log=None) -> TrainResult:
    """Train on in-memory (Volume, LabelMap) pairs. Deterministic given ``cfg.seed``.

    The learning rate follows the poly policy per epoch; each epoch runs
    ``batches_per_epoch`` SGD steps on freshly sampled batches.
    """
    cfg.validate()
    net = cfg.network
    train, val = list(train), list(val)
    if not train:
        raise ValueError("need at least one training volume")
    _check_dims(train, "training")
    for _, lab in train + val:
        if lab.num_classes != net.num_classes:
            raise ValueError(f"label map has {lab.num_classes} classes, config has {net.num_classes}")
    dims = train[0][0].dims
    norm = compute_norm_stats([v for v, _ in train])
    vols = [normalize(v, norm) for v, _ in train]
    labs = [l for _, l in train]
    grid = spatial.build_grid(dims, net.landmarks) if net.use_dist else None
    atl = atlas_mod.build_atlas(labs, cfg.atlas_epsilon) if net.use_prob else None

    model = build_model(net, cfg.seed)
    state = nn.OptimState(lr0=cfg.lr0, momentum=cfg.momentum, weight_decay=net.weight_decay,
                          power=cfg.power, max_iter=cfg.epochs)
    masks = [v.data != 0 for v, _ in train] if cfg.sampling == "natural-masked" else None
    sampler = sampling.CenterSampler(labs, cfg.sampling, masks=masks)
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    weights = None if cfg.class_weights is None else np.asarray(cfg.class_weights)

    probe = _validation_probe(cfg, val, norm)

    history = []
    for epoch in range(cfg.epochs):
        state.iteration = epoch
        lr = nn.poly_lr(epoch, state)
        losses = []
        for b in range(cfg.batches_per_epoch):
            batch = sampling.sample_batch(
                vols, labs, cfg.batch_size, sampler=sampler, rng=rng, plane=cfg.plane,
                use_3d=net.use_3d, grid=grid, atlas=atl, augment=cfg.augment,
            )
            model.zero_grad()
            try:
                out = model.loss_and_backward(batch, drop_rng, weights)
                if not math.isfinite(out["total"]):
                    raise nn.NonFiniteError(f"loss is {out['total']}")
                nn.sgd_step(model.params, model.grads, state, lr=lr)
            except nn.NonFiniteError as e:
                raise TrainingDivergedError(f"non-finite values at epoch {epoch}, batch {b}: {e}") from None
            losses.append(out["total"])
        val_dice = _probe_dice(model, probe, cfg, grid, atl)
        row = {"epoch": epoch, "lr": lr,
               "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_dice": val_dice}
        history.append(row)
        if log:
            log(f"epoch {epoch}: lr={lr:.4g} loss={row['train_loss']:.4f} val_dice={val_dice:.4f}")
    state.iteration = cfg.epochs
    params = {k: v.copy() for k, v in model.params.items()}
    vel = {k: state.velocities.get(k, np.zeros_like(v)).astype(np.float32) for k, v in params.items()}
    ckpt = Checkpoint(cfg, params, vel, cfg.epochs, norm, dims)
    return TrainResult(ckpt, history, atl)


def _validation_probe(cfg, val, norm):
    """Fixed voxel subsample of the validation volumes, inside their masks."""
    if not val or cfg.val_voxels == 0:
        return []
    _check_dims(val, "validation")
    rng = np.random.default_rng([cfg.seed, 2])
    per = [np.argwhere(v.data != 0) for v, _ in val]
    total = sum(len(p) for p in per)
    take = min(cfg.val_voxels, total)
    chosen = np.sort(rng.choice(total, take, replace=False))
    offsets = np.r_[0, np.cumsum([len(p) for p in per])]
    probe = []
    for i, ((v, lab), pts) in enumerate(zip(val, per)):
        sel = chosen[(chosen >= offsets[i]) & (chosen < offsets[i + 1])] - offsets[i]
        if len(sel):
            centers = pts[sel]
            probe.append((normalize(v, norm).data, centers, lab.labels[tuple(centers.T)]))
    return probe


def _probe_dice(model, probe, cfg, grid, atl) -> float:
    if not probe:
        return float("nan")
    preds, gts = [], []
    for arr, centers, gt in probe:
        for s in range(0, len(centers), 1024):
            b = sampling.assemble_batch(arr, centers[s : s + 1024], plane=cfg.plane,
                                        use_3d=model.cfg.use_3d, grid=grid, atlas=atl)
            preds.append(model.predict(b))
        gts.append(gt)
    return _mean_dice(np.concatenate(preds), np.concatenate(gts), model.cfg.num_classes)


def _load_pairs(images, labels):
    pairs = []
    for ip, lp in zip(images, labels):
        v, l = load_volume(ip), load_volume(lp)
        if not isinstance(v, Volume) or not isinstance(l, LabelMap):
            raise ValueError(f"expected an image and a label map, got {ip} and {lp}")
        pairs.append((v, l))
    return pairs


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_HEADER)
        for row in history:
            w.writerow([row["epoch"], repr(row["lr"]), repr(row["train_loss"]), repr(row["val_dice"])])


def train_model(cfg: TrainConfig, log=None) -> tuple[Checkpoint, Path]:
    """Train from the config's file lists; write model.ckpt and metrics.csv to ``out_dir``.

    With ProbBranch on, the training atlas is written next to them as atlas.mrv.
    """
    if not cfg.train_images:
        raise ConfigError("train_images is empty")
    train = _load_pairs(cfg.train_images, cfg.train_labels)
    val = _load_pairs(cfg.val_images, cfg.val_labels)
    res = fit(cfg, train, val, log=log)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", res.checkpoint)
    csv_path = out / "metrics.csv"
    write_history_csv(csv_path, res.history)
    if res.atlas is not None:
        atlas_mod.save_atlas(out / "atlas.mrv", res.atlas)
    return res.checkpoint, csv_path


def lr_schedule(cfg: TrainConfig) -> list[tuple[int, float]]:
    """(epoch, lr) for epochs 0..epochs, the last being the end of the schedule."""
    st = nn.OptimState(lr0=cfg.lr0, power=cfg.power, max_iter=cfg.epochs)
    return [(e, nn.poly_lr(e, st)) for e in range(cfg.epochs + 1)]


def write_lr_csv(path, cfg: TrainConfig) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("epoch", "lr"))
        for e, lr in lr_schedule(cfg):
            w.writerow((e, repr(lr)))


# -- inference -----------------------------------------------------------------


def worker_count(requested: int | None = None) -> int:
    """Workers for inference, capped by PATCHSEG_THREADS when it is set."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("PATCHSEG_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"PATCHSEG_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def predict_volume(
    ckpt: Checkpoint | Model,
    v: Volume,
    atlas: atlas_mod.ProbAtlas | None = None,
    *,
    norm: NormStats | None = None,
    mask: bool = True,
    plane: int | None = None,
    chunk: int = 2048,
    threads: int | None = None,
) -> LabelMap:
    """Label every voxel (or every nonzero-intensity voxel) by eval-mode argmax.

    ``v`` holds raw intensities; it is normalized with the checkpoint's stats.
    Out-of-mask voxels get label 0. The p25 and 3D branches run once over the
    whole volume and are sliced per voxel, which gives the same numbers as
    per-voxel patch extraction.
    """
    if isinstance(ckpt, Checkpoint):
        model, norm, plane = ckpt.build(), ckpt.norm, ckpt.config.plane
    else:
        model = ckpt
        if norm is None:
            raise ValueError("a bare model needs explicit norm stats")
    plane = 2 if plane is None else plane
    c = model.cfg
    if c.use_prob:
        if atlas is None:
            raise ValueError("model uses the atlas branch but no atlas was given")
        if atlas.dims != v.dims:
            raise ValueError(f"atlas dims {atlas.dims} do not match volume dims {v.dims}")
    grid = spatial.build_grid(v.dims, c.landmarks) if c.use_dist else None
    arr = normalize(v, norm).data
    centers = np.argwhere(v.data != 0) if mask else np.argwhere(np.ones(v.dims, dtype=bool))
    labels = np.zeros(v.dims, dtype=np.uint16)
    if not len(centers):
        return LabelMap(labels, c.num_classes, v.spacing)
    dense = model.dense_features(arr, plane)
    local = threading.local()

    def run(s):
        m = getattr(local, "model", None)
        if m is None:
            m = local.model = model if n_workers == 1 else clone(model)
        part = centers[s : s + chunk]
        b = sampling.assemble_batch(arr, part, plane=plane, use_3d=False, grid=grid,
                                    atlas=atlas if c.use_prob else None)
        return s, m.predict(b, chunk=chunk, dense=dense)

    starts = range(0, len(centers), chunk)
    n_workers = min(worker_count(threads), len(starts))
    out = np.empty(len(centers), dtype=np.intp)
    if n_workers == 1:
        results = map(run, starts)
    else:
        pool = ThreadPoolExecutor(n_workers)
        results = pool.map(run, starts)
    for s, pred in results:
        out[s : s + len(pred)] = pred
    if n_workers > 1:
        pool.shutdown()
    labels[tuple(centers.T)] = out
    return LabelMap(labels, c.num_classes, v.spacing)

