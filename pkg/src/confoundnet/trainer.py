"""Mini-batch SGD with momentum and weight decay, evaluation, and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import network as net_mod
from . import pose_geometry
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    FormatError,
    NumericsError,
)
from .network import Network, NetworkConfig, combined_loss
from .tensor_engine import LayerParams, Tensor

_EVAL_BATCH = 256


@dataclass
class HyperParams:
    """Training knobs; the defaults are the standard recipe for this model."""

    batch_size: int = 100
    momentum: float = 0.9
    weight_decay: float = 0.0005
    learning_rate: float = 0.001
    lam: float = 1.0
    epochs: int = 12
    seed: int = 0
    init_std: float = 0.01

    def validate(self):
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.lam < 0:
            raise ConfigError("weight_decay and lambda must be nonnegative")
        if self.learning_rate <= 0 or self.init_std <= 0:
            raise ConfigError("learning_rate and init_std must be positive")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be nonnegative, got {self.epochs}")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "learning_rate": self.learning_rate,
            "lambda": self.lam,
            "epochs": self.epochs,
            "seed": self.seed,
            "init_std": self.init_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {
            "batch_size", "momentum", "weight_decay", "learning_rate",
            "lambda", "epochs", "seed", "init_std",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameter keys: {sorted(unknown)}")
        hp = cls(**{("lam" if k == "lambda" else k): v for k, v in d.items()})
        hp.validate()
        return hp


@dataclass
class Metrics:
    """Per-epoch training record plus the final test confusion matrix.

    Losses are per-example means of the batch-summed objectives; accuracies
    are percentages. Train accuracy is the running accuracy over the epoch's
    own training batches; test accuracy and pose error come from a full pass
    after the epoch. Pose columns are NaN for runs without a pose head. The
    confusion matrix holds row-normalized percentages (rows: truth).
    """

    combined_loss: list = field(default_factory=list)
    class_loss: list = field(default_factory=list)
    pose_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    mean_pose_err_rad: list = field(default_factory=list)
    confusion: np.ndarray | None = None
    class_names: list | None = None

    def to_dict(self) -> dict:
        return {
            "combined_loss": self.combined_loss,
            "class_loss": self.class_loss,
            "pose_loss": self.pose_loss,
            "train_acc": self.train_acc,
            "test_acc": self.test_acc,
            "mean_pose_err_rad": self.mean_pose_err_rad,
            "confusion": None if self.confusion is None else self.confusion.tolist(),
            "class_names": self.class_names,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        m = cls(
            combined_loss=list(d["combined_loss"]),
            class_loss=list(d["class_loss"]),
            pose_loss=list(d["pose_loss"]),
            train_acc=list(d["train_acc"]),
            test_acc=list(d["test_acc"]),
            mean_pose_err_rad=list(d["mean_pose_err_rad"]),
            class_names=d.get("class_names"),
        )
        if d.get("confusion") is not None:
            m.confusion = np.asarray(d["confusion"], dtype=np.float64)
        return m


@dataclass
class EvalReport:
    accuracy: float  # percent
    confusion: np.ndarray  # row-normalized percent, rows = truth
    counts: np.ndarray  # truth examples per class
    mean_pose_err_rad: float | None


def sgd_step(net: Network, hp: HyperParams):
    """v <- momentum*v - lr*(g + weight_decay*w); w <- w + v, for every parameter.

    Weight decay applies to biases as well. Raises on non-finite gradients.
    """
    lr = hp.learning_rate
    wd = hp.weight_decay
    mom = hp.momentum
    for p in net.parameters():
        for t, vel in ((p.weights, p.w_vel), (p.bias, p.b_vel)):
            g = t.grad
            if not np.all(np.isfinite(g)):
                raise DivergenceError("non-finite gradient in sgd_step")
            vel *= mom
            vel -= lr * (g + wd * t.data)
            t.data += vel


def _stack_split(chips):
    images = np.stack([c.image for c in chips]).astype(np.float64)
    labels = np.array([c.class_label for c in chips], dtype=np.int64)
    azimuths = np.array(
        [math.nan if c.azimuth is None else c.azimuth.theta for c in chips], dtype=np.float64
    )
    return images, labels, azimuths


def _truth_for(net: Network, azimuths: np.ndarray):
    """Truth pose array in the representation the head regresses against."""
    if net.config.pose_mode == "azimuth":
        return azimuths
    rows = [pose_geometry.quat_from_azimuth(t).as_array() for t in azimuths]
    return np.stack(rows)


def train(net: Network, chips, hp: HyperParams, class_names=None, log=None):
    """Train ``net`` in place on the train split of ``chips``; returns (net, Metrics).

    Each epoch shuffles with the seeded generator, partitions into batches of
    ``hp.batch_size`` (final short batch kept), and runs forward -> combined
    loss -> backward -> sgd_step. Identical seed, data, and hyperparameters
    reproduce every parameter bitwise.
    """
    hp.validate()
    train_chips = [c for c in chips if c.split == "train"]
    test_chips = [c for c in chips if c.split == "test"]
    if not train_chips:
        raise DataError("dataset has no train chips")

    images, labels, azimuths = _stack_split(train_chips)
    have_pose_labels = not np.any(np.isnan(azimuths))
    if net.has_pose_head and hp.lam > 0 and not have_pose_labels:
        raise DataError("pose-aware training with lambda > 0 needs an azimuth for every train chip")
    use_pose = net.has_pose_head and have_pose_labels

    n = len(train_chips)
    rng = np.random.default_rng(hp.seed)
    metrics = Metrics(class_names=list(class_names) if class_names else None)
    step = 0
    for epoch in range(1, hp.epochs + 1):
        perm = rng.permutation(n)
        combined_sum = 0.0
        class_sum = 0.0
        pose_sum = 0.0
        correct = 0
        for start in range(0, n, hp.batch_size):
            idx = perm[start : start + hp.batch_size]
            xb = Tensor(images[idx])
            try:
                logits, pose_raw, cache = net_mod.forward(net, xb)
                if use_pose:
                    bundle = combined_loss(logits, pose_raw, labels[idx], _truth_for(net, azimuths[idx]), hp.lam)
                else:
                    # pose head (if any) is left out of the objective when truth is missing
                    c_loss, g_logits = _class_only(logits, labels[idx])
                    bundle = net_mod.LossBundle(c_loss, c_loss, None, g_logits, None)
                if not np.isfinite(bundle.combined):
                    raise DivergenceError("non-finite loss")
                net.zero_grads()
                net_mod.backward(net, cache, bundle.grad_logits, bundle.grad_pose_raw)
                sgd_step(net, hp)
            except (DivergenceError, NumericsError) as exc:
                raise DivergenceError(f"training diverged at step {step}: {exc}") from None
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
            combined_sum += bundle.combined
            class_sum += bundle.class_loss
            if bundle.pose_loss is not None:
                pose_sum += bundle.pose_loss
            step += 1

        test_eval = evaluate(net, test_chips) if test_chips else None
        metrics.combined_loss.append(combined_sum / n)
        metrics.class_loss.append(class_sum / n)
        metrics.pose_loss.append(pose_sum / n if use_pose else math.nan)
        metrics.train_acc.append(correct / n * 100.0)
        metrics.test_acc.append(test_eval.accuracy if test_eval else math.nan)
        metrics.mean_pose_err_rad.append(
            test_eval.mean_pose_err_rad
            if test_eval and test_eval.mean_pose_err_rad is not None
            else math.nan
        )
        if log:
            log(
                f"epoch {epoch:3d}  combined {metrics.combined_loss[-1]:.4f}  "
                f"class {metrics.class_loss[-1]:.4f}  pose {metrics.pose_loss[-1]:.4f}  "
                f"train_acc {metrics.train_acc[-1]:6.2f}  test_acc {metrics.test_acc[-1]:6.2f}"
            )

    if test_chips:
        final_eval = evaluate(net, test_chips)
        metrics.confusion = final_eval.confusion
    return net, metrics


def _class_only(logits, labels):
    from .tensor_engine import softmax_logloss

    return softmax_logloss(logits, labels)


def evaluate(net: Network, chips, batch_size: int = _EVAL_BATCH) -> EvalReport:
    """Accuracy, row-normalized confusion (percent), and mean pose error.

    Class predictions use only the argmax of the logits; pose labels are
    consumed only to score the pose head, and only when every chip has one.
    """
    if not chips:
        raise DataError("cannot evaluate an empty split")
    images, labels, azimuths = _stack_split(chips)
    c = net.config.num_classes
    preds = np.empty(len(chips), dtype=np.int64)
    pose_err_sum = 0.0
    have_pose = net.has_pose_head and not np.any(np.isnan(azimuths))
    for start in range(0, len(chips), batch_size):
        xb = Tensor(images[start : start + batch_size])
        logits, pose_raw, _cache = net_mod.forward(net, xb)
        preds[start : start + batch_size] = np.argmax(logits.data, axis=1)
        if have_pose:
            loss, _ = pose_geometry.pose_loss(pose_raw, _truth_for(net, azimuths[start : start + batch_size]))
            pose_err_sum += loss

    confusion_counts = np.zeros((c, c), dtype=np.float64)
    np.add.at(confusion_counts, (labels, preds), 1.0)
    counts = confusion_counts.sum(axis=1)
    confusion = np.zeros_like(confusion_counts)
    nonempty = counts > 0
    confusion[nonempty] = confusion_counts[nonempty] / counts[nonempty, None] * 100.0
    accuracy = float(np.mean(preds == labels) * 100.0)
    mean_pose = pose_err_sum / len(chips) if have_pose else None
    return EvalReport(accuracy, confusion, counts.astype(np.int64), mean_pose)


# ---------------------------------------------------------------------------
# metrics / confusion files


METRICS_HEADER = "epoch,combined_loss,class_loss,pose_loss,train_acc,test_acc,mean_pose_err_rad"


def write_metrics_csv(metrics: Metrics, path):
    lines = [METRICS_HEADER]
    for i in range(len(metrics.combined_loss)):
        lines.append(
            f"{i + 1},{metrics.combined_loss[i]!r},{metrics.class_loss[i]!r},"
            f"{metrics.pose_loss[i]!r},{metrics.train_acc[i]!r},"
            f"{metrics.test_acc[i]!r},{metrics.mean_pose_err_rad[i]!r}"
        )
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_confusion_csv(confusion: np.ndarray, class_names, path):
    names = list(class_names)
    lines = ["," + ",".join(names)]
    for i, name in enumerate(names):
        lines.append(name + "," + ",".join(repr(float(v)) for v in confusion[i]))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoints: magic, little-endian uint64 JSON header length, JSON header,
# then each tensor's raw float64 little-endian bytes in header order


_CKPT_MAGIC = b"CFNETCKP"
_CKPT_VERSION = 1


def _tensor_table(net: Network):
    table = []
    for i, p in enumerate(net.conv_params):
        table.append((f"conv{i}", p))
    table.append(("hidden", net.fc_hidden))
    table.append(("class_head", net.class_head))
    if net.pose_head is not None:
        table.append(("pose_head", net.pose_head))
    out = []
    for name, p in table:
        out.extend(
            [
                (f"{name}.weights", p.weights.data),
                (f"{name}.bias", p.bias.data),
                (f"{name}.w_vel", p.w_vel),
                (f"{name}.b_vel", p.b_vel),
            ]
        )
    return out


def checkpoint_save(net: Network, hp: HyperParams, metrics: Metrics | None, path):
    tensors = _tensor_table(net)
    header = {
        "format_version": _CKPT_VERSION,
        "seed": hp.seed,
        "config": net.config.to_dict(),
        "hyperparams": hp.to_dict(),
        "metrics": None if metrics is None else metrics.to_dict(),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _name, a in tensors:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def checkpoint_load(path):
    """Rebuild (net, hyperparams, metrics) from a checkpoint file.

    The whole file is validated before anything is constructed; a malformed
    or truncated file raises FormatError and returns nothing partial.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_CKPT_MAGIC) + 8 or raw[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint file")
    off = len(_CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if off + hlen > len(raw):
        raise FormatError(f"{path} is truncated inside the header")
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path} has a corrupt header: {exc}") from None
    off += hlen
    if header.get("format_version") != _CKPT_VERSION:
        raise FormatError(
            f"{path} has format version {header.get('format_version')}, expected {_CKPT_VERSION}"
        )
    for key in ("config", "hyperparams", "tensors", "seed"):
        if key not in header:
            raise FormatError(f"{path} header is missing {key!r}")

    config = NetworkConfig.from_dict(header["config"])
    hp = HyperParams.from_dict(header["hyperparams"])
    metrics = Metrics.from_dict(header["metrics"]) if header.get("metrics") else None

    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(int(v) for v in entry["shape"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        if off + nbytes > len(raw):
            raise FormatError(f"{path} is truncated inside tensor {entry['name']!r}")
        arrays[entry["name"]] = (
            np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)), offset=off)
            .reshape(shape)
            .astype(np.float64)
        )
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path} has {len(raw) - off} trailing bytes")

    def take(name, w_shape, b_shape):
        for suffix, shape in (("weights", w_shape), ("bias", b_shape), ("w_vel", w_shape), ("b_vel", b_shape)):
            key = f"{name}.{suffix}"
            if key not in arrays:
                raise FormatError(f"{path} is missing tensor {key!r}")
            if arrays[key].shape != shape:
                raise FormatError(
                    f"{path} tensor {key!r} has shape {arrays[key].shape}, expected {shape}"
                )
        p = LayerParams(arrays[f"{name}.weights"], arrays[f"{name}.bias"])
        p.w_vel = arrays[f"{name}.w_vel"].copy()
        p.b_vel = arrays[f"{name}.b_vel"].copy()
        return p

    conv_params = []
    c_in = config.input_shape[0]
    for i, (k, ksz, _pad) in enumerate(config.conv):
        conv_params.append(take(f"conv{i}", (k, c_in, ksz, ksz), (k,)))
        c_in = k
    fc_hidden = take("hidden", (config.hidden, config.feature_size()), (config.hidden,))
    class_head = take("class_head", (config.num_classes, config.hidden), (config.num_classes,))
    pose_head = None
    if config.pose_mode != "none":
        pose_head = take("pose_head", (config.pose_dim, config.tap_width()), (config.pose_dim,))
    expected = 4 * (len(conv_params) + 2 + (1 if pose_head is not None else 0))
    if len(arrays) != expected:
        raise FormatError(f"{path} lists {len(arrays)} tensors, expected {expected}")
    return Network(config, conv_params, fc_hidden, class_head, pose_head), hp, metrics
