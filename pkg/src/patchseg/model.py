"""BaseNet and its optional 3D, landmark-distance and atlas branches.

Data flow (B = batch, L = classes)::

    p25 / p51s / p71s --conv5-relu-conv3-relu--> 3 x (c2, 19, 19)
        concat -> conv1x1 -> relu -> flatten = base features ----------> aux_base head
    [p3d --conv3d3-relu-conv3d3-relu-flatten--> 3D features]
    fc1( base features [+ 3D features] ) -> relu -> dropout = h1
    [dist planes --(1x1 | 3x3 [| 5x5]) convs-relu, flattened, concat--> dist features -> aux_dist head]
    fc2( h1 [+ dist features] ) -> relu -> dropout -> fc3 = logits
    [atlas probs -> fc(L,L) -> relu -> fc(L,L) -> relu -> fc(L,L), no biases] added to logits
    softmax
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import nn, spatial
from numpy.lib.stride_tricks import sliding_window_view

from .sampling import HALF, HALF_3D, PATCH, PATCH_3D, PatchBatch, _in_plane

DIST_MODES = ("conv2d", "vector_fc")


@dataclass
class NetworkConfig:
    num_classes: int = 8
    conv1: int = 4
    conv2: int = 4
    reduce: int = 4
    fc1: int = 32
    fc2: int = 32
    conv3d1: int = 2
    conv3d2: int = 2
    dist_channels: int = 4
    dist_fc: int = 32
    landmarks: int = spatial.DEFAULT_K
    use_3d: bool = False
    use_dist: bool = False
    use_prob: bool = False
    dist_mode: str = "conv2d"
    use_rbf: bool = False
    alpha: float = spatial.DEFAULT_ALPHA
    dist_scale: float = 0.02
    aux: bool = True
    aux_base_weight: float = 0.3
    aux_dist_weight: float = 0.3
    dropout: float = 0.1
    weight_decay: float = 1e-4

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.dist_mode not in DIST_MODES:
            raise ValueError(f"dist_mode must be one of {DIST_MODES}, got {self.dist_mode!r}")
        if self.landmarks < 2:
            raise ValueError("landmarks per axis must be >= 2")
        for f in ("conv1", "conv2", "reduce", "fc1", "fc2", "conv3d1", "conv3d2",
                  "dist_channels", "dist_fc"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.alpha <= 0 or self.dist_scale <= 0:
            raise ValueError("alpha and dist_scale must be positive")
        if min(self.aux_base_weight, self.aux_dist_weight) < 0:
            raise ValueError("aux weights must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        return self


def dist_kernels(k: int) -> tuple[int, ...]:
    return (1, 3, 5) if k >= 9 else (1, 3)


class Model:
    """Layers wired per ``NetworkConfig``; parameters are exposed as ``name.W`` / ``name.b``."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg.validate()
        self.seed = seed
        c = cfg
        L = c.num_classes
        self.layers: dict[str, nn.Layer] = {}

        def add(layer):
            self.layers[layer.name] = layer
            return layer

        s2 = PATCH - 4 - 2  # 25 -> conv5 -> conv3
        for tag in ("p25", "p51s", "p71s"):
            add(nn.Conv2D(1, c.conv1, 5, name=f"{tag}.conv1", seed=seed, input_grad=False))
            add(nn.Conv2D(c.conv1, c.conv2, 3, name=f"{tag}.conv2", seed=seed))
        add(nn.Conv2D(3 * c.conv2, c.reduce, 1, name="reduce", seed=seed))
        self.base_dim = c.reduce * s2 * s2
        fc1_in = self.base_dim
        if c.use_3d:
            s3 = PATCH_3D - 2 - 2
            add(nn.Conv3D(1, c.conv3d1, 3, name="p3d.conv1", seed=seed, input_grad=False))
            add(nn.Conv3D(c.conv3d1, c.conv3d2, 3, name="p3d.conv2", seed=seed))
            fc1_in += c.conv3d2 * s3**3
        add(nn.Dense(fc1_in, c.fc1, name="fc1", seed=seed))
        fc2_in = c.fc1
        if c.use_dist:
            k = c.landmarks
            if c.dist_mode == "conv2d":
                self.dist_dim = 0
                for ks in dist_kernels(k):
                    add(nn.Conv2D(k, c.dist_channels, ks, name=f"dist.conv{ks}", seed=seed,
                                  input_grad=False))
                    self.dist_dim += c.dist_channels * (k - ks + 1) ** 2
            else:
                add(nn.Dense(k**3, c.dist_fc, name="dist.fc", seed=seed, input_grad=False))
                self.dist_dim = c.dist_fc
            fc2_in += self.dist_dim
            if c.aux:
                add(nn.Dense(self.dist_dim, L, name="aux_dist", seed=seed))
        add(nn.Dense(fc2_in, c.fc2, name="fc2", seed=seed))
        add(nn.Dense(c.fc2, L, name="fc3", seed=seed))
        if c.use_prob:
            for i in (1, 2, 3):
                add(nn.Dense(L, L, bias=False, name=f"prob.fc{i}", seed=seed, input_grad=i > 1))
        if c.aux:
            add(nn.Dense(self.base_dim, L, name="aux_base", seed=seed))
        self._drop1 = nn.Dropout(c.dropout, name="drop1")
        self._drop2 = nn.Dropout(c.dropout, name="drop2")
        self._relu: dict[str, nn.ReLU] = {}
        self.astype(dtype)

    # -- parameters ----------------------------------------------------------

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": p for n, l in self.layers.items() for k, p in l.params.items()}

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": g for n, l in self.layers.items() for k, g in l.grads.items()}

    def set_param(self, name: str, value) -> None:
        layer, key = name.rsplit(".", 1)
        cur = self.layers[layer].params[key]
        value = np.asarray(value, dtype=cur.dtype)
        if value.shape != cur.shape:
            raise nn.ShapeError(f"{name}: expected {cur.shape}, got {value.shape}")
        cur[...] = value

    def astype(self, dtype):
        self.dtype = np.dtype(dtype)
        for l in self.layers.values():
            l.astype(self.dtype)
        return self

    def zero_grad(self):
        for l in self.layers.values():
            l.zero_grad()

    def count_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- forward / backward --------------------------------------------------

    def _act(self, key, x):
        r = self._relu.setdefault(key, nn.ReLU(name=f"relu.{key}"))
        return r.forward(x)

    def _act_back(self, key, g):
        return self._relu[key].backward(g)

    def _dist_input(self, dist):
        c = self.cfg
        d = np.asarray(dist, dtype=np.float64)
        d = spatial.rbf_normalize(d, c.alpha) if c.use_rbf else d * c.dist_scale
        return d.astype(self.dtype)

    def forward(self, batch: PatchBatch, train: bool = False, rng=None, dense=None):
        """Class probabilities (B, L) and a dict of auxiliary probabilities.

        ``dense`` (from ``dense_features``) supplies precomputed p25 and 3D branch
        outputs for eval-mode inference over a whole volume.
        """
        if dense is not None and train:
            raise ValueError("precomputed dense features are for eval mode only")
        c = self.cfg
        Ly = self.layers
        for field_name, on in (("p3d", c.use_3d and dense is None), ("dist", c.use_dist), ("atlas_prob", c.use_prob)):
            if on and getattr(batch, field_name) is None:
                raise ValueError(f"branch needs sample field {field_name!r}, which is missing")
        if train and rng is None:
            rng = np.random.default_rng(0)
        self._train = train
        maps = []
        for tag in ("p25", "p51s", "p71s"):
            if dense is not None and tag == "p25":
                maps.append(dense.p25_maps(batch.centers))
                continue
            x = np.asarray(getattr(batch, tag), dtype=self.dtype)[:, None]
            h = self._act(f"{tag}.1", Ly[f"{tag}.conv1"].forward(x))
            maps.append(self._act(f"{tag}.2", Ly[f"{tag}.conv2"].forward(h)))
        self._cat_maps = nn.Concat(name="cat_maps")
        h = self._cat_maps.forward(maps)
        h = self._act("reduce", Ly["reduce"].forward(h))
        self._reduce_shape = h.shape
        base = h.reshape(len(h), -1)
        fc1_in = base
        if c.use_3d:
            if dense is not None:
                h3 = dense.p3d_maps(batch.centers)
            else:
                x = np.asarray(batch.p3d, dtype=self.dtype)[:, None]
                h3 = self._act("p3d.1", Ly["p3d.conv1"].forward(x))
                h3 = self._act("p3d.2", Ly["p3d.conv2"].forward(h3))
            self._p3d_shape = h3.shape
            fc1_in = np.concatenate([base, h3.reshape(len(h3), -1)], axis=1)
        h1 = self._act("fc1", Ly["fc1"].forward(fc1_in))
        h1 = self._drop1.forward(h1, train, rng)
        fc2_in = h1
        aux = {}
        if c.use_dist:
            d = self._dist_input(batch.dist)
            if c.dist_mode == "conv2d":
                planes = spatial.as_planes(d)
                parts = []
                self._dist_shapes = []
                for ks in dist_kernels(c.landmarks):
                    o = self._act(f"dist{ks}", Ly[f"dist.conv{ks}"].forward(planes))
                    self._dist_shapes.append(o.shape)
                    parts.append(o.reshape(len(o), -1))
                dist_feat = np.concatenate(parts, axis=1)
            else:
                dist_feat = self._act("distfc", Ly["dist.fc"].forward(d.reshape(len(d), -1)))
            fc2_in = np.concatenate([h1, dist_feat], axis=1)
            if c.aux:
                aux["dist"] = Ly["aux_dist"].forward(dist_feat)
        h2 = self._act("fc2", Ly["fc2"].forward(fc2_in))
        h2 = self._drop2.forward(h2, train, rng)
        logits = Ly["fc3"].forward(h2)
        if c.use_prob:
            a = np.asarray(batch.atlas_prob, dtype=self.dtype)
            a = self._act("prob1", Ly["prob.fc1"].forward(a))
            a = self._act("prob2", Ly["prob.fc2"].forward(a))
            logits = logits + Ly["prob.fc3"].forward(a)
        if c.aux:
            aux["base"] = Ly["aux_base"].forward(base)
        self._logits = logits
        self._aux_logits = aux
        return nn.softmax(logits), {k: nn.softmax(v) for k, v in aux.items()}

    def loss_and_backward(self, batch: PatchBatch, rng=None, class_weights=None) -> dict:
        """Forward in training mode, accumulate gradients of the global loss.

        Global loss = main CE + aux_base_weight * CE(aux_base) + aux_dist_weight * CE(aux_dist).
        The L2 term is applied by ``nn.sgd_step``; it is reported here but not differentiated.
        """
        return self._loss_and_backward(batch, train=True, rng=rng, class_weights=class_weights)

    def _loss_and_backward(self, batch, train, rng=None, class_weights=None):
        c = self.cfg
        Ly = self.layers
        self.forward(batch, train=train, rng=rng)
        out, g_logits, g_aux = self._loss_terms(batch.targets, class_weights)
        g_base = g_dist_feat = None
        if "base" in g_aux:
            g_base = Ly["aux_base"].backward(g_aux["base"])
        if "dist" in g_aux:
            g_dist_feat = Ly["aux_dist"].backward(g_aux["dist"])
        out["l2"] = nn.l2_penalty(self.params, c.weight_decay)

        if c.use_prob:
            g = Ly["prob.fc3"].backward(g_logits)
            g = Ly["prob.fc2"].backward(self._act_back("prob2", g))
            Ly["prob.fc1"].backward(self._act_back("prob1", g))
        g = Ly["fc3"].backward(g_logits)
        g = self._act_back("fc2", self._drop2.backward(g))
        g = Ly["fc2"].backward(g)
        g_h1 = g[:, : c.fc1]
        if c.use_dist:
            gd = g[:, c.fc1 :]
            if g_dist_feat is not None:
                gd = gd + g_dist_feat
            if c.dist_mode == "conv2d":
                start = 0
                for ks, shp in zip(dist_kernels(c.landmarks), self._dist_shapes):
                    n = int(np.prod(shp[1:]))
                    part = gd[:, start : start + n].reshape(shp)
                    Ly[f"dist.conv{ks}"].backward(self._act_back(f"dist{ks}", part))
                    start += n
            else:
                Ly["dist.fc"].backward(self._act_back("distfc", gd))
        g = self._act_back("fc1", self._drop1.backward(g_h1))
        g = Ly["fc1"].backward(g)
        g_b = g[:, : self.base_dim]
        if g_base is not None:
            g_b = g_b + g_base
        if c.use_3d:
            g3 = g[:, self.base_dim :].reshape(self._p3d_shape)
            g3 = Ly["p3d.conv2"].backward(self._act_back("p3d.2", g3))
            Ly["p3d.conv1"].backward(self._act_back("p3d.1", g3))
        g = self._act_back("reduce", g_b.reshape(self._reduce_shape))
        g = Ly["reduce"].backward(g)
        for tag, gm in zip(("p25", "p51s", "p71s"), self._cat_maps.backward(g)):
            gm = Ly[f"{tag}.conv2"].backward(self._act_back(f"{tag}.2", gm))
            Ly[f"{tag}.conv1"].backward(self._act_back(f"{tag}.1", gm))
        return out

    def _loss_terms(self, targets, class_weights=None):
        c = self.cfg
        t = np.asarray(targets)
        main, g_logits = nn.softmax_cross_entropy(self._logits, t, class_weights)
        out = {"main": main}
        total = main
        g_aux = {}
        weights = {"base": c.aux_base_weight, "dist": c.aux_dist_weight}
        for key, z in self._aux_logits.items():
            la, ga = nn.softmax_cross_entropy(z, t, class_weights)
            out[f"aux_{key}"] = la
            total += weights[key] * la
            g_aux[key] = weights[key] * ga
        out["total"] = total
        return out, g_logits, g_aux

    def loss(self, batch: PatchBatch, class_weights=None) -> float:
        """Global loss in eval mode, without the L2 term."""
        self.forward(batch)
        return self._loss_terms(batch.targets, class_weights)[0]["total"]

    def dense_features(self, arr: np.ndarray, plane: int = 2) -> "DenseFeatures":
        """Run the p25 and 3D stacks once over a whole (normalized) volume."""
        vol, _ = _in_plane(arr, np.zeros(3, dtype=int), plane)
        vol = np.asarray(vol, dtype=self.dtype)
        Ly = self.layers
        slices = np.pad(vol, ((HALF, HALF), (HALF, HALF), (0, 0)))
        slices = np.ascontiguousarray(np.moveaxis(slices, -1, 0)[:, None])
        f = np.maximum(Ly["p25.conv1"].forward(slices), 0)
        f = np.maximum(Ly["p25.conv2"].forward(f), 0)
        g = None
        if self.cfg.use_3d:
            padded = np.pad(vol, HALF_3D)[None, None]
            g = np.maximum(Ly["p3d.conv1"].forward(padded), 0)
            g = np.maximum(Ly["p3d.conv2"].forward(g), 0)[0]
        for name in ("p25.conv1", "p25.conv2", "p3d.conv1", "p3d.conv2"):
            if name in Ly:
                Ly[name]._cols = None
        return DenseFeatures(plane, f, g)

    def predict(self, batch: PatchBatch, chunk: int = 1024, dense=None) -> np.ndarray:
        """Eval-mode argmax labels; ties go to the lowest class index."""
        out = np.empty(len(batch), dtype=np.intp)
        for s in range(0, len(batch), chunk):
            probs, _ = self.forward(batch.take(slice(s, s + chunk)), dense=dense)
            out[s : s + chunk] = np.argmax(probs, axis=1)
        return out

    def grad_check(self, batch: PatchBatch, eps: float = 1e-5, dtype=np.float64,
                   max_entries: int | None = None, seed: int = 0) -> dict:
        """Max relative error per parameter of the global loss, on an eval-mode copy.

        ``max_entries`` caps how many positions of each tensor are perturbed.
        """
        m = clone(self).astype(dtype)
        m.zero_grad()
        m._loss_and_backward(batch, train=False)
        analytic = {k: g.copy() for k, g in m.grads.items()}

        loss_fn = lambda: m.loss(batch)
        return nn.grad_check_arrays(loss_fn, m.params, analytic, eps, max_entries,
                                    np.random.default_rng(seed))


class DenseFeatures:
    """Whole-volume p25 / 3D branch outputs, sliced per voxel on demand."""

    def __init__(self, plane, p25_maps, p3d_maps=None):
        self.plane = plane
        size = PATCH - 4 - 2
        self._p25 = sliding_window_view(p25_maps, (size, size), axis=(2, 3))
        self._p3d = None
        if p3d_maps is not None:
            s3 = PATCH_3D - 4
            self._p3d = sliding_window_view(p3d_maps, (s3,) * 3, axis=(1, 2, 3))

    def _order(self, centers):
        order = [a for a in range(3) if a != self.plane] + [self.plane]
        return np.asarray(centers)[:, order]

    def p25_maps(self, centers):
        c = self._order(centers)
        return self._p25[c[:, 2], :, c[:, 0], c[:, 1]]

    def p3d_maps(self, centers):
        c = self._order(centers)
        return np.moveaxis(self._p3d[:, c[:, 0], c[:, 1], c[:, 2]], 1, 0)


def build_model(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(cfg, seed, dtype)


def clone(m: Model) -> Model:
    out = Model(m.cfg, m.seed, m.dtype)
    for k, v in m.params.items():
        out.set_param(k, v)
    return out


def config_to_dict(cfg: NetworkConfig) -> dict:
    return asdict(cfg)


NETWORK_FIELDS = {f.name: f.type for f in fields(NetworkConfig)}


def probe_batch(cfg: NetworkConfig, n: int = 4, seed: int = 0, dims=(32, 32, 32)) -> PatchBatch:
    """Random inputs covering every branch ``cfg`` enables, for checks and probes."""
    rng = np.random.default_rng(seed)
    p = lambda *shape: rng.standard_normal((n,) + shape).astype(np.float32)
    centers = np.stack([rng.integers(0, d, n) for d in dims], axis=1)
    dist = None
    if cfg.use_dist:
        grid = spatial.build_grid(dims, cfg.landmarks)
        dist = spatial.distance_image(grid, centers).astype(np.float32)
    atlas_prob = None
    if cfg.use_prob:
        atlas_prob = rng.dirichlet(np.ones(cfg.num_classes), n).astype(np.float32)
    return PatchBatch(
        p(PATCH, PATCH), p(PATCH, PATCH), p(PATCH, PATCH), centers,
        rng.integers(0, cfg.num_classes, n),
        p3d=p(PATCH_3D, PATCH_3D, PATCH_3D) if cfg.use_3d else None,
        dist=dist, atlas_prob=atlas_prob,
    )


def randomize_biases(m: Model, seed: int = 0, scale: float = 0.1) -> Model:
    """Nonzero biases keep pre-activations off the ReLU kink in finite-difference checks."""
    rng = np.random.default_rng(seed)
    for name, p in m.params.items():
        if nn.is_bias(name):
            p[...] = rng.uniform(-scale, scale, p.shape)
    return m
