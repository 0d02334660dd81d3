"""Command line entry point: ``patchseg <subcommand> ...``.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 unreadable or
malformed files.

The evaluate subcommand writes CSV rows with the header
``volume_id,class_id,dice,hausdorff_mm,msd_mm,valid``, one row per
(volume, class) plus a ``mean`` row per volume.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import atlas as atlas_mod
from . import metrics, model, phantom, pipeline
from .pipeline import CheckpointError
from .volume import LabelMap, Volume, VolumeFormatError, export_slice_pgm, load_volume, save_volume

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class _Invalid(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for I/O errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _dims(text: str) -> tuple[int, int, int]:
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}; use N or NX,NY,NZ") from None
    if len(vals) == 1:
        vals *= 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"bad dims {text!r}; use N or NX,NY,NZ")
    return tuple(vals)


def _load(path, kind):
    obj = load_volume(path)
    if not isinstance(obj, kind):
        raise _Invalid(f"{path}: expected {'an image' if kind is Volume else 'a label map'}")
    return obj


def cmd_phantom(a):
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(a.count):
        seed = a.seed + i
        spec = phantom.PhantomSpec(dims=a.dims, num_classes=a.classes, seed=seed,
                                   noise_sigma=a.noise, ambiguous_pair=not a.no_pair)
        v, lab = phantom.generate_phantom(spec)
        name = f"{a.prefix}{seed}"
        save_volume(out / f"{name}_img.mrv", v)
        save_volume(out / f"{name}_lab.mrv", lab)
        print(out / name)


def cmd_atlas(a):
    labs = [_load(p, LabelMap) for p in a.labels]
    atlas_mod.save_atlas(a.out, atlas_mod.build_atlas(labs, a.epsilon))


def cmd_train(a):
    cfg = pipeline.load_config(a.config)
    _, csv_path = pipeline.train_model(cfg, log=print)
    print(f"wrote {Path(cfg.out_dir) / 'model.ckpt'} and {csv_path}")


def cmd_predict(a):
    ckpt = pipeline.load_checkpoint(a.ckpt)
    img = _load(a.image, Volume)
    atl = atlas_mod.load_atlas(a.atlas) if a.atlas else None
    pred = pipeline.predict_volume(ckpt, img, atl, mask=not a.no_mask)
    save_volume(a.out, pred)


def cmd_evaluate(a):
    if len(a.pred) != len(a.gt):
        raise _Invalid("--pred and --gt need the same number of files")
    reports = {}
    for p, g in zip(a.pred, a.gt):
        r = metrics.evaluate_pair(_load(p, LabelMap), _load(g, LabelMap), fullset=a.fullset_distances)
        vid = base = Path(g).name.removesuffix(".mrv")
        n = 1
        while vid in reports:  # same file name twice: keep both rows
            n += 1
            vid = f"{base}.{n}"
        reports[vid] = r
        print(f"{vid}: dice={r.mean_dice:.4f} hausdorff={r.mean_hausdorff:.3f} msd={r.mean_msd:.3f}")
    metrics.write_metrics_csv(a.csv, reports)


def cmd_gradcheck(a):
    cfg = pipeline.load_config(a.config)
    dtype = np.float64 if a.double else np.float32
    eps = 1e-6 if a.double else 1e-2
    limit = 1e-4 if a.double else 5e-2
    m = model.randomize_biases(model.build_model(cfg.network, cfg.seed), cfg.seed)
    batch = model.probe_batch(cfg.network, a.samples, cfg.seed)
    errs = m.grad_check(batch, eps=eps, dtype=dtype, max_entries=a.max_entries, seed=cfg.seed)
    for name, e in errs.items():
        print(f"{name:24s} {e:.3e}")
    worst = max(errs.values())
    print(f"max relative error {worst:.3e} (limit {limit:g}, {'float64' if a.double else 'float32'})")
    return EXIT_OK if worst < limit else EXIT_INVALID


def cmd_lr_dump(a):
    pipeline.write_lr_csv(a.csv, pipeline.load_config(a.config))


def cmd_slice(a):
    export_slice_pgm(a.out, load_volume(a.image), a.axis, a.index)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="patchseg", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="write synthetic image/label pairs")
    s.add_argument("--seed", type=int, default=0, help="seed of the first phantom")
    s.add_argument("--dims", type=_dims, default=(64, 64, 64), help="N or NX,NY,NZ")
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--no-pair", action="store_true", help="omit the mirrored ambiguous pair")
    s.add_argument("--prefix", default="phantom")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("atlas", help="build a probabilistic atlas from label maps")
    s.add_argument("--labels", nargs="+", required=True)
    s.add_argument("--epsilon", type=float, default=atlas_mod.DEFAULT_EPSILON)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_atlas)

    s = sub.add_parser("train", help="train from a config file")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="segment one image with a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--atlas")
    s.add_argument("--out", required=True)
    s.add_argument("--no-mask", action="store_true", help="label every voxel, not only nonzero ones")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="dice / hausdorff / msd against ground truth")
    s.add_argument("--pred", nargs="+", required=True)
    s.add_argument("--gt", nargs="+", required=True)
    s.add_argument("--csv", required=True)
    s.add_argument("--fullset-distances", action="store_true",
                   help="measure distances between whole masks instead of boundaries")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference check of the configured model")
    s.add_argument("--config", required=True)
    s.add_argument("--double", action="store_true", help="check in float64 (tight tolerance)")
    s.add_argument("--samples", type=int, default=4)
    s.add_argument("--max-entries", type=int, default=24, help="positions checked per tensor")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("lr-dump", help="write the per-epoch learning rate schedule")
    s.add_argument("--config", required=True)
    s.add_argument("--csv", required=True)
    s.set_defaults(func=cmd_lr_dump)

    s = sub.add_parser("slice", help="export one slice as an 8-bit PGM")
    s.add_argument("--image", required=True)
    s.add_argument("--axis", type=int, choices=(0, 1, 2), default=2)
    s.add_argument("--index", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_slice)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
    except (OSError, VolumeFormatError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (_Invalid, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
