"""Command-line entry point: synth, train, embed, eval, augment-preview, gradcheck.

Exit status is 0 on success, 1 on a usage error (bad flags, unknown config
keys, invalid values) and 2 on a runtime error.  Every argument and config
value is validated before anything is written, so usage errors leave no
output behind.
"""

import argparse
import csv
import io as _io
import logging
import os
import sys

import numpy as np

from . import io
from .config import build_config, describe_keys, load_config_file, parse_overrides, with_net
from .data import (load_batch, load_manifest, sample_rng, augment_chain, group_by_label,
                   synth_generate, write_split, STANDARDIZE_MEAN, STANDARDIZE_STD)
from .errors import ConfigError, VmrfaError
from .evaluator import GalleryIndex, evaluate
from .mrfa import mask_to_pgm_bytes
from .network import Network, NetworkConfig
from .tensor import Tensor, no_grad
from .trainer import Trainer, load_checkpoint

log = logging.getLogger("vmrfanet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config handling

def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable; wins over --config)")
    p.add_argument("--seed", type=int, help="global seed (wins over config and --set)")


def _raw_values(args, extra=None):
    values = load_config_file(args.config) if args.config else {}
    values.update(extra or {})
    values.update(parse_overrides(args.set))
    return values


def _resolve_config(args, extra=None):
    try:
        return build_config(_raw_values(args, extra), seed=args.seed)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- subcommands

def cmd_synth(args):
    if min(args.ids, args.cams, args.per_id, args.height, args.width) <= 0:
        raise UsageError("--ids, --cams, --per-id, --height and --width must be positive")
    if not 0 < args.test_fraction < 1:
        raise UsageError("--test-fraction must lie in (0, 1)")
    manifest = synth_generate(args.ids, args.cams, args.per_id, args.height, args.width,
                              args.seed or 0, args.out)
    paths = write_split(args.out, load_manifest(manifest), args.test_fraction)
    print(f"wrote {args.ids * args.per_id} images to {args.out}")
    for name in ("train", "query", "gallery"):
        print(f"{name:8s} {paths[name]}")
    return 0


def _training_images(cfg):
    if not cfg.manifest:
        raise UsageError("no training manifest: pass --manifest or set data.manifest")
    images = load_manifest(cfg.manifest, cfg.net.num_cameras)
    n_ids = len(group_by_label(images))
    return images, n_ids


def cmd_train(args):
    extra = {}
    if args.manifest:
        extra["data.manifest"] = args.manifest
    if args.out:
        extra["train.out_dir"] = args.out
    cfg = _resolve_config(args, extra)
    if args.resume and not os.path.isfile(args.resume):
        raise UsageError(f"--resume checkpoint {args.resume} does not exist")
    images, n_ids = _training_images(cfg)
    if "net.num_identities" not in _raw_values(args, extra):
        cfg = with_net(cfg, num_identities=n_ids)
    trainer = Trainer(cfg, images, cfg.out_dir)
    if args.resume:
        trainer.resume(args.resume)
    trainer.run(args.epochs)
    for epoch, mean in sorted(trainer.epoch_means().items()):
        print(f"epoch {epoch:4d}  combined {mean:.4f}")
    print(f"checkpoint {trainer.checkpoint_path()}")
    print(f"log        {trainer.log_path}")
    return 0


def _network_for_checkpoint(cfg, path):
    """Build a network whose class counts match the stored classifier shapes."""
    entries = io.load_checkpoint(path)
    over = {}
    ids = entries.get("id_classifiers.0.weight")
    if ids is not None:
        over["num_identities"] = ids.shape[0]
    cams = entries.get("camera_classifiers.0.weight")
    if cams is not None:
        over["num_cameras"] = cams.shape[0]
    net = Network(with_net(cfg, **over).net, seed=cfg.seed)
    load_checkpoint(path, net)
    net.eval()
    return net


def _image_side(path):
    return os.path.splitext(path)[0] + ".csv"


def cmd_embed(args):
    cfg = _resolve_config(args)
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"--checkpoint {args.checkpoint} does not exist")
    images = load_manifest(args.manifest)
    net = _network_for_checkpoint(cfg, args.checkpoint)
    emb = net.embed(load_batch(images, False, cfg.augment))
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["person_id", "camera_id"])
    w.writerows((im.person_id, im.camera_id) for im in images)
    io.save_tensor(args.out, emb)
    io.atomic_write(_image_side(args.out), buf.getvalue().encode())
    print(f"wrote {emb.shape[0]}x{emb.shape[1]} embeddings to {args.out} (labels: {_image_side(args.out)})")
    return 0


def load_embeddings(path):
    """Read an embedding tensor and its sidecar label CSV into a :class:`GalleryIndex`."""
    emb = io.load_tensor(path)
    with open(_image_side(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["person_id", "camera_id"]:
        raise VmrfaError(f"{_image_side(path)}: header must be person_id,camera_id")
    ids = np.array([[int(v) for v in r] for r in rows[1:] if r], dtype=np.int64).reshape(-1, 2)
    return GalleryIndex(emb, ids[:, 0], ids[:, 1])


def cmd_eval(args):
    for p in (args.query, args.gallery):
        if not os.path.isfile(p) or not os.path.isfile(_image_side(p)):
            raise UsageError(f"{p} or its sidecar {_image_side(p)} does not exist")
    report = evaluate(load_embeddings(args.query), load_embeddings(args.gallery), args.max_rank)
    print(report.format())
    if args.cmc_out:
        lines = ["rank,cmc"] + [f"{k + 1},{v:.6f}" for k, v in enumerate(report.cmc)]
        io.atomic_write(args.cmc_out, ("\n".join(lines) + "\n").encode())
    return 0


def _to_unit_range(x):
    return np.clip(x * STANDARDIZE_STD + STANDARDIZE_MEAN, 0.0, 1.0)


def cmd_augment_preview(args):
    cfg = _resolve_config(args)
    if args.n <= 0:
        raise UsageError("--n must be positive")
    if args.checkpoint and not os.path.isfile(args.checkpoint):
        raise UsageError(f"--checkpoint {args.checkpoint} does not exist")
    images = load_manifest(args.manifest)[:args.n]
    aug = cfg.augment
    if args.checkpoint:
        net = _network_for_checkpoint(cfg, args.checkpoint)
    else:
        net = Network(cfg.net, seed=cfg.seed)
        net.eval()
    os.makedirs(args.out, exist_ok=True)
    for i, im in enumerate(images):
        before = augment_chain(im.pixels, None, False, aug)
        after = augment_chain(im.pixels, sample_rng(cfg.seed, 0, i), True, aug)
        io.write_ppm(os.path.join(args.out, f"{i:03d}_before.ppm"), _to_unit_range(before))
        io.write_ppm(os.path.join(args.out, f"{i:03d}_after.ppm"), _to_unit_range(after))
        with no_grad():
            masks = net(Tensor(before[None])).masks
        for j, m in enumerate(masks, start=1):
            stem = os.path.join(args.out, f"{i:03d}_mask{j}")
            io.save_tensor(stem + ".vtns", m.data[0])
            io.atomic_write(stem + ".pgm", io.encode_pgm(mask_to_pgm_bytes(m.data[0])))
    print(f"wrote {len(images)} preview pairs to {args.out}")
    return 0


def cmd_gradcheck(args):
    from .gradcheck import (PRIMITIVE_TOL, NETWORK_TOL, network_check, network_convergence,
                            primitive_suite, toy_batch)

    report = primitive_suite(args.instances, args.seed or 0)
    width = max(len(k) for k in report)
    for name, err in report.items():
        print(f"{name.ljust(width)}  {err:.3e}  {'ok' if err < PRIMITIVE_TOL else 'FAIL'}")
    cfg = NetworkConfig.toy(num_identities=2)
    net = Network(cfg, seed=args.seed or 0)
    x, labels, cams = toy_batch(cfg, args.seed or 0)
    errs = network_check(net, x, labels, cams, args.coords, args.seed or 0)
    worst = max(errs, key=lambda k: errs[k][0])
    bad = sum(1 for e, _ in errs.values() if e >= NETWORK_TOL)
    print(f"{'end-to-end'.ljust(width)}  {errs[worst][0]:.3e}  "
          f"{'ok' if not bad else 'FAIL'}  ({bad}/{len(errs)} tensors >= {NETWORK_TOL:g}; worst {worst})")
    if args.convergence:
        for h, err in network_convergence(cfg, seed=args.seed or 0).items():
            print(f"{('float64 h=%g' % h).ljust(width)}  {err:.3e}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    keys = "config keys (full-scale reference values in parentheses):\n" + describe_keys()
    parser = _Parser(prog="vmrfanet", description="Person re-identification with multi-receptive-field "
                     "attention masks and a camera-prediction auxiliary loss.",
                     epilog=keys, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=keys,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "write a procedural dataset with train/query/gallery manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=20)
    p.add_argument("--cams", type=int, default=4)
    p.add_argument("--per-id", type=int, default=25)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=48)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int)

    p = add("train", cmd_train, "train on a manifest; writes checkpoints and train_log.csv")
    _add_config_flags(p)
    p.add_argument("--manifest", help="training manifest (same as --set data.manifest=...)")
    p.add_argument("--out", help="output directory (same as --set train.out_dir=...)")
    p.add_argument("--epochs", type=int, help="stop after this epoch count (default: the full schedule)")
    p.add_argument("--resume", help="continue from a checkpoint")

    p = add("embed", cmd_embed, "write descriptors (tensor file) and a person_id,camera_id sidecar CSV")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="tensor path; labels go next to it with a .csv suffix")

    p = add("eval", cmd_eval, "single-query CMC and mAP for two embedding files")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--max-rank", type=int, default=50)
    p.add_argument("--cmc-out", help="optional CSV with the full CMC curve")

    p = add("augment-preview", cmd_augment_preview, "before/after augmentation images and attention mask dumps")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="use trained weights for the masks")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every primitive and the full toy loss")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--coords", type=int, default=3, help="sampled coordinates per parameter tensor")
    p.add_argument("--convergence", action="store_true",
                   help="also report float64 end-to-end errors for shrinking step sizes")
    p.add_argument("--seed", type=int)
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required; see --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (VmrfaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
