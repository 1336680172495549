"""Command-line front end: data generation, training, evaluation, gradient
checking, and matched-pair A/B comparison.

Every command takes a single strict JSON config (unknown keys are rejected),
writes back the fully resolved config it actually ran with, and is
reproducible: identical config and seed give byte-identical output files.

Exit codes: 0 success, 2 configuration/ingestion error, 3 numerical
divergence, 4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import network as net_mod
from . import trainer as trainer_mod
from .errors import (
    ConfoundNetError,
    ConfigError,
    DataError,
    DivergenceError,
    StateError,
)
from .network import NetworkConfig
from .tensor_engine import Tensor
from .trainer import HyperParams

# published full-scale MSTAR reference accuracies for this training scheme;
# not reproducible on the bundled synthetic data
MSTAR_REFERENCE = {"baseline": 99.03, "pose_aware": 99.50}

_TOP_KEYS = {"network", "hyperparams", "data", "pose_mode", "flip_augment", "seeds", "out_dir"}
_NETWORK_KEYS = {"input", "conv", "pool", "hidden", "pose_tap"}
_NETWORK_DEFAULTS = {
    "input": [1, 32, 32],
    "conv": [[16, 5, 2], [32, 5, 2], [64, 5, 2]],
    "pool": [True, True, True],
    "hidden": 128,
    "pose_tap": -1,
}
_DATA_KEYS = {"synthetic", "path"}
_POSE_MODES = ("none", "azimuth", "quaternion")


def _reject_unknown(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return raw


def resolve_config(raw: dict) -> dict:
    """Fill defaults and validate the strict schema; returns the full config."""
    _reject_unknown(raw, _TOP_KEYS, "config")

    network = dict(_NETWORK_DEFAULTS)
    net_section = raw.get("network", {})
    if not isinstance(net_section, dict):
        raise ConfigError("network section must be an object")
    _reject_unknown(net_section, _NETWORK_KEYS, "network")
    network.update(net_section)

    hp_section = raw.get("hyperparams", {})
    if not isinstance(hp_section, dict):
        raise ConfigError("hyperparams section must be an object")
    hp = HyperParams.from_dict(hp_section)

    data_section = raw.get("data", {"synthetic": {}})
    if not isinstance(data_section, dict):
        raise ConfigError("data section must be an object")
    _reject_unknown(data_section, _DATA_KEYS, "data")
    if ("synthetic" in data_section) == ("path" in data_section):
        raise ConfigError("data section needs exactly one of 'synthetic' or 'path'")
    if "synthetic" in data_section:
        synth_dict = data_section["synthetic"]
        if not isinstance(synth_dict, dict):
            raise ConfigError("data.synthetic must be an object")
        known = set(data_mod.SynthConfig().to_dict())
        _reject_unknown(synth_dict, known, "data.synthetic")
        synth = data_mod.SynthConfig(
            **{k: (tuple(v) if k.endswith("nuisance") else v) for k, v in synth_dict.items()}
        )
        data_resolved = {"synthetic": synth.to_dict()}
    else:
        data_resolved = {"path": str(data_section["path"])}

    pose_mode = raw.get("pose_mode", "none")
    if pose_mode not in _POSE_MODES:
        raise ConfigError(f"pose_mode must be one of {_POSE_MODES}, got {pose_mode!r}")

    seeds = raw.get("seeds", [0, 1, 2, 3, 4])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a list of integers")

    return {
        "network": network,
        "hyperparams": hp.to_dict(),
        "data": data_resolved,
        "pose_mode": pose_mode,
        "flip_augment": bool(raw.get("flip_augment", True)),
        "seeds": seeds,
        "out_dir": raw.get("out_dir"),
    }


def _hyperparams(resolved: dict) -> HyperParams:
    return HyperParams.from_dict(resolved["hyperparams"])


def _network_config(resolved: dict, num_classes: int, pose_mode=None) -> NetworkConfig:
    net = resolved["network"]
    hp = resolved["hyperparams"]
    return NetworkConfig(
        input_shape=tuple(net["input"]),
        conv=tuple(tuple(layer) for layer in net["conv"]),
        pool=tuple(net["pool"]),
        hidden=int(net["hidden"]),
        num_classes=num_classes,
        pose_mode=resolved["pose_mode"] if pose_mode is None else pose_mode,
        pose_tap=int(net["pose_tap"]),
        lam=float(hp["lambda"]),
        init_std=float(hp["init_std"]),
    )


def _load_chips(resolved: dict):
    """Chips and class names from the configured data source."""
    if "synthetic" in resolved["data"]:
        synth_dict = {
            k: (tuple(v) if k.endswith("nuisance") and v is not None else v)
            for k, v in resolved["data"]["synthetic"].items()
        }
        cfg = data_mod.SynthConfig(**synth_dict)
        return data_mod.synth_generate(cfg), cfg.resolved_class_names()
    return data_mod.load_dataset(resolved["data"]["path"])


def _prepare_chips(resolved: dict):
    chips, names = _load_chips(resolved)
    if resolved["flip_augment"]:
        train = [c for c in chips if c.split == "train"]
        rest = [c for c in chips if c.split != "train"]
        chips = data_mod.flip_augment(train) + rest
    return data_mod.normalize(chips), names


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve_out_dir(args, resolved) -> str:
    out = args.out or resolved.get("out_dir")
    if not out:
        raise ConfigError("an output directory is required (--out or config out_dir)")
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    resolved = resolve_config(load_config(args.config))
    if "synthetic" not in resolved["data"]:
        raise ConfigError("gen-data needs a data.synthetic section")
    if args.seed is not None:
        resolved["data"]["synthetic"]["seed"] = args.seed
    out = _resolve_out_dir(args, resolved)
    resolved["out_dir"] = out

    synth_dict = {
        k: (tuple(v) if k.endswith("nuisance") and v is not None else v)
        for k, v in resolved["data"]["synthetic"].items()
    }
    cfg = data_mod.SynthConfig(**synth_dict)
    chips = data_mod.synth_generate(cfg)
    names = cfg.resolved_class_names()

    existing = [f for f in os.listdir(out) if f != "resolved_config.json"]
    if existing and not args.force:
        raise ConfigError(f"{out} is not empty; rerun with --force to overwrite")
    data_mod.export_dataset(chips, names, out, force=True)
    _write_json(resolved, os.path.join(out, "resolved_config.json"))

    for split in ("train", "test"):
        for k, name in enumerate(names):
            n = sum(1 for c in chips if c.split == split and c.class_label == k)
            print(f"{split} {name}: {n} chips")
    print(f"wrote {len(chips)} chips to {out}")
    return 0


def cmd_train(args) -> int:
    resolved = resolve_config(load_config(args.config))
    if args.seed is not None:
        resolved["hyperparams"]["seed"] = args.seed
    out = _resolve_out_dir(args, resolved)
    resolved["out_dir"] = out

    chips, names = _prepare_chips(resolved)
    hp = _hyperparams(resolved)
    net_cfg = _network_config(resolved, num_classes=len(names))
    net = net_mod.build(net_cfg, hp.seed)
    print(
        f"training pose_mode={net_cfg.pose_mode} seed={hp.seed} "
        f"params={net.param_count()} train_chips={sum(c.split == 'train' for c in chips)}"
    )
    net, metrics = trainer_mod.train(net, chips, hp, class_names=names, log=print)

    trainer_mod.checkpoint_save(net, hp, metrics, os.path.join(out, "checkpoint.bin"))
    trainer_mod.write_metrics_csv(metrics, os.path.join(out, "metrics.csv"))
    if metrics.confusion is not None:
        trainer_mod.write_confusion_csv(metrics.confusion, names, os.path.join(out, "confusion.csv"))
    _write_json(resolved, os.path.join(out, "resolved_config.json"))
    if metrics.test_acc:
        print(f"final test accuracy: {metrics.test_acc[-1]!r}")
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    net, hp, metrics = trainer_mod.checkpoint_load(args.checkpoint)
    names = metrics.class_names if metrics and metrics.class_names else None
    chips, names = data_mod.load_dataset(args.data, classes=names)
    test = [c for c in chips if c.split == "test"]
    if not test:
        raise DataError(f"{args.data} has no test split")
    test = data_mod.normalize(test)

    if args.strip_pose:
        if not net.has_pose_head:
            raise StateError("--strip-pose given but the checkpoint has no pose head")
        stripped = net_mod.strip_pose_head(net)
        probe = Tensor(np.stack([c.image for c in test[:16]]))
        full_logits, _, _ = net_mod.forward(net, probe)
        strip_logits, _, _ = net_mod.forward(stripped, probe)
        if not np.array_equal(full_logits.data, strip_logits.data):
            print("verification failure: stripped head changed the class logits", file=sys.stderr)
            return 4
        net = stripped

    report = trainer_mod.evaluate(net, test)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    trainer_mod.write_confusion_csv(report.confusion, names, os.path.join(out, "confusion.csv"))
    _write_json(
        {
            "checkpoint": args.checkpoint,
            "data": args.data,
            "strip_pose": bool(args.strip_pose),
            "accuracy_percent": report.accuracy,
            "mean_pose_err_rad": report.mean_pose_err_rad,
            "per_class_counts": {n: int(c) for n, c in zip(names, report.counts)},
        },
        os.path.join(out, "eval_report.json"),
    )
    print(f"accuracy_percent {report.accuracy!r}")
    if report.mean_pose_err_rad is not None:
        print(f"mean_pose_err_rad {report.mean_pose_err_rad!r}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        resolve_config(load_config(args.config))  # validates the schema; the
        # battery itself runs with pinned sizes and tolerances
    results = gradcheck_mod.run_battery(instances=args.instances)
    report = gradcheck_mod.format_report(results)
    print(report)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck_report.txt"), "w") as fh:
            fh.write(report + "\n")
    return 0 if all(r.passed for r in results) else 4


def _ab_pair(payload):
    """Train one matched baseline/pose-aware pair; runs in a worker process."""
    resolved, seed, chips, names = payload
    hp = _hyperparams(resolved)
    hp.seed = seed
    base_cfg = _network_config(resolved, num_classes=len(names), pose_mode="none")
    pose_cfg = _network_config(resolved, num_classes=len(names))
    base_net = net_mod.build(base_cfg, seed)
    pose_net = net_mod.build(pose_cfg, seed)
    shared = zip(
        base_net.conv_params + [base_net.fc_hidden, base_net.class_head],
        pose_net.conv_params + [pose_net.fc_hidden, pose_net.class_head],
    )
    for a, b in shared:
        if not (
            np.array_equal(a.weights.data, b.weights.data)
            and np.array_equal(a.bias.data, b.bias.data)
        ):
            raise AssertionError("matched pair does not share its initialization")
    base_net, _ = trainer_mod.train(base_net, chips, hp, class_names=names)
    pose_net, _ = trainer_mod.train(pose_net, chips, hp, class_names=names)
    test = [c for c in chips if c.split == "test"]
    base_eval = trainer_mod.evaluate(base_net, test)
    pose_eval = trainer_mod.evaluate(pose_net, test)
    return (
        seed,
        base_eval.accuracy,
        pose_eval.accuracy,
        pose_eval.accuracy - base_eval.accuracy,
        pose_eval.mean_pose_err_rad,
    )


def cmd_ab(args) -> int:
    resolved = resolve_config(load_config(args.config))
    if resolved["pose_mode"] == "none":
        raise ConfigError("ab needs pose_mode 'azimuth' or 'quaternion' for the pose-aware arm")
    out = _resolve_out_dir(args, resolved)
    resolved["out_dir"] = out
    seeds = resolved["seeds"]
    if len(seeds) < 2:
        print("warning: fewer than 2 seeds; the comparison still runs but means are fragile")

    chips, names = _prepare_chips(resolved)
    if not any(c.split == "test" for c in chips):
        raise DataError("ab needs a test split")

    payloads = [(resolved, seed, chips, names) for seed in seeds]
    workers = int(os.environ.get("CONFOUNDNET_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_ab_pair, payloads))
    else:
        rows = [_ab_pair(p) for p in payloads]

    mean_base = float(np.mean([r[1] for r in rows]))
    mean_pose = float(np.mean([r[2] for r in rows]))
    mean_delta = float(np.mean([r[3] for r in rows]))
    mean_err = float(np.mean([r[4] for r in rows]))

    lines = ["seed,baseline_acc,poseaware_acc,delta,poseaware_mean_pose_err_rad"]
    for seed, b, p, d, e in rows:
        lines.append(f"{seed},{b!r},{p!r},{d!r},{e!r}")
    lines.append(f"mean,{mean_base!r},{mean_pose!r},{mean_delta!r},{mean_err!r}")
    with open(os.path.join(out, "ab_results.csv"), "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_json(resolved, os.path.join(out, "resolved_config.json"))

    print(f"{'seed':>6} {'baseline':>10} {'pose-aware':>10} {'delta':>8} {'pose_err':>9}")
    for seed, b, p, d, e in rows:
        print(f"{seed:>6} {b:>10.2f} {p:>10.2f} {d:>+8.2f} {e:>9.4f}")
    print(f"{'mean':>6} {mean_base:>10.2f} {mean_pose:>10.2f} {mean_delta:>+8.2f} {mean_err:>9.4f}")
    print(
        f"full-scale MSTAR reference (not reproducible here): "
        f"baseline {MSTAR_REFERENCE['baseline']}%, pose-aware {MSTAR_REFERENCE['pose_aware']}%"
    )
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="confoundnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset on disk")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train per config; writes checkpoint + metrics")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--strip-pose", action="store_true")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all kernels")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--instances", type=int, default=20)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("ab", help="matched-seed baseline vs pose-aware comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_ab)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except ConfoundNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
