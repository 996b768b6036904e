"""Command-line interface.

Subcommands: ``build-graph``, ``train``, ``eval``, ``bench``, ``fuse``,
``selftest``. Options may come from a config file (JSON or ``key=value``
lines) merged under explicit flags; unknown config keys are an error.
Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import arch as A
from . import bench as B
from . import data as D
from . import train as TR
from .errors import ConfigError, ParseError
from .graph import radius_graph, write_graph
from .network import build_network
from .selftest import run_selftest
from .tensor import load_checkpoint, save_checkpoint

_USAGE_ERROR = 1
_RUNTIME_ERROR = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_config(path: str) -> dict:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        cfg = json.loads(text)
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: top-level JSON value must be an object")
        return cfg
    cfg = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags; unknown config keys error."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        cfg = _load_config(args.config)
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in cfg.items():
            default = defaults[key]
            if default is None or isinstance(default, str):
                merged[key] = value
            elif isinstance(default, bool):
                merged[key] = value if isinstance(value, bool) else value == "true"
            elif isinstance(default, int):
                merged[key] = int(value)
            elif isinstance(default, float):
                merged[key] = float(value)
            else:
                merged[key] = value
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _config_hash(merged: dict) -> str:
    return hashlib.sha256(json.dumps(merged, sort_keys=True).encode()).hexdigest()


def _build_argparser() -> _Parser:
    p = _Parser(prog="bipconv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command")

    fuse = sub.add_parser("fuse", help="print the fused form of an architecture string")
    fuse.add_argument("--arch", required=True)

    sub.add_parser("selftest", help="run the fast invariant suite")

    bg = sub.add_parser("build-graph", help="serialize an image or point cloud as a graph")
    bg.add_argument("--points", help="point-cloud text file (x y z per line)")
    bg.add_argument("--normalize", action="store_true",
                    help="center and scale the cloud into the unit sphere")
    bg.add_argument("--mnist-split", choices=["train", "test"])
    bg.add_argument("--index", type=int, default=0, help="image index within the split")
    bg.add_argument("--data-root", dest="data_root")
    bg.add_argument("--radius", type=float, default=2.9)
    bg.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train a classifier or graph autoencoder")
    tr.add_argument("--config", help="JSON or key=value config file")
    tr.add_argument("--task", choices=["classify", "reconstruct"])
    tr.add_argument("--dataset", choices=["mnist", "shapes"])
    tr.add_argument("--data-root", dest="data_root")
    tr.add_argument("--subset", type=int)
    tr.add_argument("--arch")
    tr.add_argument("--kernel", choices=["ecc", "gat", "eca"])
    tr.add_argument("--red", choices=["sum", "mean", "max"])
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--optimizer", choices=["adam", "sgd"])
    tr.add_argument("--seed", type=int)
    tr.add_argument("--workers", type=int)
    tr.add_argument("--skips", choices=["on", "off"],
                    help="autoencoder skip connections (reconstruct only)")
    tr.add_argument("--out-dir", dest="out_dir")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--run-dir", required=True, help="directory holding run.json + ckpt.txt")
    ev.add_argument("--data-root", dest="data_root")
    ev.add_argument("--subset", type=int)

    bn = sub.add_parser("bench", help="profile conv+pool vs fused scaling")
    bn.add_argument("--arch", help="conv+pool stage spec", default=None)
    bn.add_argument("--sizes", default="100,1000,10000")
    bn.add_argument("--ratio", type=int, default=4)
    bn.add_argument("--seed", type=int, default=0)
    bn.add_argument("--out-dir", dest="out_dir")
    return p


_TRAIN_DEFAULTS = {
    "task": "classify",
    "dataset": "mnist",
    "data_root": "data",
    "subset": 2000,
    "arch": "C(16)-MP(2,3.4)-C(32)-MP(4,6.8)-C(64)-MP(8,30)-C(128)-D(0.5)-FC(10)",
    "kernel": "ecc",
    "red": "mean",
    "epochs": 20,
    "batch": 32,
    "lr": 1e-3,
    "optimizer": "adam",
    "seed": 0,
    "workers": 1,
    "skips": "on",
    "out_dir": "runs/latest",
}

_AE_ENCODER_DEFAULT = "BC(16,2,3.4)-BC(32,4,10)"


def _load_dataset(cfg: dict, for_reconstruct: bool):
    if cfg["dataset"] == "mnist":
        tr_i, tr_l, te_i, te_l = D.load_mnist(cfg["data_root"])
        n_train = cfg["subset"]
        n_test = max(1, n_train // 4)
        train = D.mnist_graph_subset(tr_i, tr_l, n_train, cfg["seed"],
                                     with_image_target=for_reconstruct)
        test = D.mnist_graph_subset(te_i, te_l, n_test, cfg["seed"] + 1,
                                    key_base=10**6, with_image_target=for_reconstruct)
        return train, test, 1
    if cfg["dataset"] == "shapes":
        if for_reconstruct:
            raise ConfigError("reconstruction is defined for image datasets only")
        per_class = max(2, cfg["subset"] // 4)
        train = D.synthetic_shapes(4, 128, per_class, noise=0.02, seed=cfg["seed"])
        test = D.synthetic_shapes(4, 128, max(1, per_class // 4),
                                  noise=0.02, seed=cfg["seed"] + 1)
        return train, test, 1
    raise ConfigError(f"unknown dataset {cfg['dataset']!r}")


def _autoencoder_from_config(cfg: dict, input_dim: int):
    enc = A.parse_arch(cfg["arch"]).with_config(kernel=cfg["kernel"], reduction=cfg["red"])
    spec = TR.AutoencoderSpec(
        encoder=enc,
        decoder_features=_mirrored_features(enc, input_dim),
        decoder_radius=_mirrored_radii(enc),
        skip_pairs=_default_skips(enc) if cfg["skips"] == "on" else (),
    )
    return TR.build_autoencoder(spec, input_dim, cfg["seed"])


def _stage_layers(enc: A.ArchSpec):
    return [l for l in enc.layers if isinstance(l, (A.BConv, A.MaxPool, A.AvgPool))]


def _mirrored_features(enc: A.ArchSpec, input_dim: int) -> tuple[int, ...]:
    dims = [input_dim]
    cur = input_dim
    for layer in enc.layers:
        if isinstance(layer, (A.Conv, A.BConv)):
            cur = layer.features
        if isinstance(layer, (A.BConv, A.MaxPool, A.AvgPool)):
            dims.append(cur)
    s = len(dims) - 1
    return tuple(dims[s - j] for j in range(1, s)) + (input_dim,)


def _mirrored_radii(enc: A.ArchSpec) -> tuple[float, ...]:
    res = [l.resolution for l in _stage_layers(enc)]
    s = len(res)
    return tuple(res[s - j] for j in range(1, s + 1))


def _default_skips(enc: A.ArchSpec) -> tuple[tuple[int, int], ...]:
    s = len(_stage_layers(enc))
    return tuple((s - d, d) for d in range(1, s))


def _cmd_train(args) -> int:
    cfg = _merge_config(args, _TRAIN_DEFAULTS)
    if cfg["task"] == "reconstruct" and args.arch is None and "arch" not in _loaded_keys(args):
        cfg["arch"] = _AE_ENCODER_DEFAULT
    train_set, test_set, input_dim = _load_dataset(cfg, cfg["task"] == "reconstruct")
    tcfg = TR.TrainConfig(arch=cfg["arch"], epochs=cfg["epochs"], batch_size=cfg["batch"],
                          learning_rate=cfg["lr"], optimizer=cfg["optimizer"],
                          seed=cfg["seed"], kernel=cfg["kernel"], reduction=cfg["red"],
                          workers=cfg["workers"])
    model = None
    if cfg["task"] == "reconstruct":
        model = _autoencoder_from_config(cfg, input_dim)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    def log(entry):
        metric = entry.get("accuracy", entry.get("mse"))
        name = "accuracy" if "accuracy" in entry else "mse"
        print(f"epoch {entry['epoch']:3d} {entry['split']:<5} "
              f"loss {entry['loss']:.6f} {name} {metric:.6f}")

    model, history = TR.train_model(tcfg, train_set, test_set, task=cfg["task"],
                                    model=model, out_dir=out_dir, log=log)
    canonical = A.render_arch(A.parse_arch(cfg["arch"]))
    meta = dict(cfg)
    meta.update({"arch": canonical, "input_dim": input_dim,
                 "config_sha256": _config_hash({**cfg, "arch": canonical})})
    (out_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"run artifacts written to {out_dir}")
    return 0


def _loaded_keys(args) -> set:
    if getattr(args, "config", None):
        return set(_load_config(args.config))
    return set()


def _cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    meta = json.loads((run_dir / "run.json").read_text())
    cfg = dict(meta)
    if args.data_root is not None:
        cfg["data_root"] = args.data_root
    if args.subset is not None:
        cfg["subset"] = args.subset
    _, test_set, input_dim = _load_dataset(cfg, cfg["task"] == "reconstruct")
    if cfg["task"] == "reconstruct":
        model = _autoencoder_from_config(cfg, input_dim)
    else:
        spec = A.parse_arch(cfg["arch"]).with_config(kernel=cfg["kernel"],
                                                     reduction=cfg["red"])
        spatial_dim = test_set[0].graph.positions.shape[1]
        model = build_network(spec, input_dim, cfg["seed"], spatial_dim=spatial_dim)
    model.load_state(load_checkpoint(run_dir / "ckpt.txt"))
    metrics = TR.evaluate_model(model, test_set, cfg["task"])
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _cmd_build_graph(args) -> int:
    if args.points:
        pts = D.read_pointcloud(args.points)
        if args.normalize:
            pts = D.normalize_pointcloud(pts)
        write_graph(args.out, radius_graph(pts, args.radius))
    elif args.mnist_split:
        if not args.data_root:
            raise ConfigError("--mnist-split needs --data-root")
        tr_i, tr_l, te_i, te_l = D.load_mnist(args.data_root)
        images = tr_i if args.mnist_split == "train" else te_i
        if not 0 <= args.index < len(images):
            raise ConfigError(f"--index out of range [0, {len(images)})")
        sample = D.mnist_to_graph(images[args.index] / 255.0, rho=args.radius)
        write_graph(args.out, sample.graph)
    else:
        raise _UsageError("build-graph needs --points or --mnist-split")
    print(f"graph written to {args.out}")
    return 0


def _cmd_bench(args) -> int:
    base = args.arch if args.arch else "C(8)-MP(2,2)"
    spec = A.parse_arch(base)
    fused = A.fuse_pooling(spec)
    sizes = [int(s) for s in args.sizes.split(",") if s]
    rows = B.scaling_report(spec, fused, sizes, ratio=args.ratio,
                            seed=args.seed, out_dir=args.out_dir)
    print(B.render_table(rows))
    if args.out_dir:
        print(f"CSV written to {Path(args.out_dir) / 'scaling.csv'}")
    return 0


def dispatch(argv) -> int:
    parser = _build_argparser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage()
            return _USAGE_ERROR
        if args.command == "fuse":
            print(A.render_arch(A.fuse_pooling(A.parse_arch(args.arch))))
            return 0
        if args.command == "selftest":
            return run_selftest()
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "build-graph":
            return _cmd_build_graph(args)
        if args.command == "bench":
            return _cmd_bench(args)
        parser.print_usage()
        return _USAGE_ERROR
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return _USAGE_ERROR
    except (ParseError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _RUNTIME_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _RUNTIME_ERROR
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _RUNTIME_ERROR


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
