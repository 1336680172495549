"""Network assembly: a conv trunk, a classification head, and an optional
secondary pose head that taps a hidden activation during training and can be
stripped afterwards without touching any other parameter."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import pose_geometry
from .errors import ConfigError, DataError, DimensionError, StateError
from .tensor_engine import (
    LayerParams,
    Tensor,
    conv2d_forward,
    conv2d_backward,
    fc_forward,
    fc_backward,
    maxpool2_forward,
    maxpool2_backward,
    relu_forward,
    relu_backward,
    softmax_logloss,
)

POSE_DIMS = {"none": 0, "azimuth": 2, "quaternion": 4}


@dataclass
class NetworkConfig:
    """Geometry and head layout of a network.

    ``conv`` lists (filters, kernel, pad) per stage, all stride 1; ``pool``
    flags a 2x2/2 max pool after each stage's ReLU. ``pose_tap`` indexes the
    hidden activations (stage outputs then the top hidden layer); -1 means the
    top hidden layer, which is where the secondary head normally attaches.
    """

    input_shape: tuple = (1, 32, 32)
    conv: tuple = ((16, 5, 2), (32, 5, 2), (64, 5, 2))
    pool: tuple = (True, True, True)
    hidden: int = 128
    num_classes: int = 4
    pose_mode: str = "none"
    pose_tap: int = -1
    lam: float = 1.0
    init_std: float = 0.01

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.conv = tuple(tuple(int(v) for v in layer) for layer in self.conv)
        self.pool = tuple(bool(v) for v in self.pool)
        self.validate()

    @property
    def pose_dim(self) -> int:
        return POSE_DIMS[self.pose_mode]

    def validate(self):
        if self.pose_mode not in POSE_DIMS:
            raise ConfigError(f"pose_mode must be one of {sorted(POSE_DIMS)}, got {self.pose_mode!r}")
        if len(self.input_shape) != 3 or any(v <= 0 for v in self.input_shape):
            raise ConfigError(f"input must be positive (channels, H, W), got {self.input_shape}")
        if len(self.pool) != len(self.conv):
            raise ConfigError(f"{len(self.conv)} conv stages but {len(self.pool)} pool flags")
        if not self.conv:
            raise ConfigError("at least one conv stage is required")
        if self.hidden <= 0 or self.num_classes < 2:
            raise ConfigError(
                f"hidden width must be positive and class count >= 2, "
                f"got hidden={self.hidden}, classes={self.num_classes}"
            )
        if self.init_std <= 0:
            raise ConfigError(f"init_std must be positive, got {self.init_std}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        self.stage_shapes()  # raises on a broken geometry chain
        n_taps = len(self.conv) + 1
        tap = self.pose_tap if self.pose_tap >= 0 else n_taps + self.pose_tap
        if not 0 <= tap < n_taps:
            raise ConfigError(f"pose_tap {self.pose_tap} outside the {n_taps} hidden activations")

    def stage_shapes(self):
        """Per-stage output shapes (post ReLU/pool); raises ConfigError if they break."""
        c, h, w = self.input_shape
        shapes = []
        for i, ((k, ksz, pad), pooled) in enumerate(zip(self.conv, self.pool)):
            if k <= 0 or ksz <= 0 or pad < 0:
                raise ConfigError(f"conv stage {i} has invalid (filters, kernel, pad) = {(k, ksz, pad)}")
            h = h + 2 * pad - ksz + 1
            w = w + 2 * pad - ksz + 1
            if h <= 0 or w <= 0:
                raise ConfigError(f"conv stage {i} output {h}x{w} is not positive")
            if pooled:
                if h % 2 or w % 2:
                    raise ConfigError(f"pool after stage {i} needs even dims, got {h}x{w}")
                h //= 2
                w //= 2
            c = k
            shapes.append((c, h, w))
        return shapes

    def tap_index(self) -> int:
        n_taps = len(self.conv) + 1
        return self.pose_tap if self.pose_tap >= 0 else n_taps + self.pose_tap

    def tap_width(self) -> int:
        tap = self.tap_index()
        if tap == len(self.conv):
            return self.hidden
        c, h, w = self.stage_shapes()[tap]
        return c * h * w

    def feature_size(self) -> int:
        c, h, w = self.stage_shapes()[-1]
        return c * h * w

    def to_dict(self) -> dict:
        return {
            "input": list(self.input_shape),
            "conv": [list(layer) for layer in self.conv],
            "pool": list(self.pool),
            "hidden": self.hidden,
            "num_classes": self.num_classes,
            "pose_mode": self.pose_mode,
            "pose_tap": self.pose_tap,
            "lambda": self.lam,
            "init_std": self.init_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {
            "input", "conv", "pool", "hidden", "num_classes",
            "pose_mode", "pose_tap", "lambda", "init_std",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        missing = known - set(d)
        if missing:
            raise ConfigError(f"missing network config keys: {sorted(missing)}")
        return cls(
            input_shape=tuple(d["input"]),
            conv=tuple(tuple(layer) for layer in d["conv"]),
            pool=tuple(d["pool"]),
            hidden=int(d["hidden"]),
            num_classes=int(d["num_classes"]),
            pose_mode=str(d["pose_mode"]),
            pose_tap=int(d["pose_tap"]),
            lam=float(d["lambda"]),
            init_std=float(d["init_std"]),
        )


class Network:
    """Trunk parameters plus heads; pure data holder mutated by the trainer."""

    __slots__ = ("config", "conv_params", "fc_hidden", "class_head", "pose_head", "trunk_evals")

    def __init__(self, config, conv_params, fc_hidden, class_head, pose_head):
        self.config = config
        self.conv_params = conv_params
        self.fc_hidden = fc_hidden
        self.class_head = class_head
        self.pose_head = pose_head
        self.trunk_evals = 0

    @property
    def has_pose_head(self) -> bool:
        return self.pose_head is not None

    def parameters(self):
        params = list(self.conv_params) + [self.fc_hidden, self.class_head]
        if self.pose_head is not None:
            params.append(self.pose_head)
        return params

    def param_count(self) -> int:
        return sum(p.num_params() for p in self.parameters())

    def zero_grads(self):
        for p in self.parameters():
            p.zero_grad()


def build(config: NetworkConfig, seed: int) -> Network:
    """Seeded Gaussian init; identical seeds give bitwise-identical networks.

    Shared parameters (trunk + classification head) are drawn before the pose
    head, so a pose-aware net and a baseline built from the same seed share
    their common initialization bitwise.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    std = config.init_std
    conv_params = []
    c_in = config.input_shape[0]
    for k, ksz, _pad in config.conv:
        conv_params.append(LayerParams.gaussian((k, c_in, ksz, ksz), (k,), std, rng))
        c_in = k
    fc_hidden = LayerParams.gaussian((config.hidden, config.feature_size()), (config.hidden,), std, rng)
    class_head = LayerParams.gaussian((config.num_classes, config.hidden), (config.num_classes,), std, rng)
    pose_head = None
    if config.pose_mode != "none":
        pose_head = LayerParams.gaussian((config.pose_dim, config.tap_width()), (config.pose_dim,), std, rng)
    return Network(config, conv_params, fc_hidden, class_head, pose_head)


@dataclass
class ForwardCache:
    """Everything backward needs, tied to one specific forward evaluation."""

    net: Network
    eval_id: int
    steps: list  # (kind, ctx_or_src, out_tensor) in forward order
    logits: Tensor
    class_ctx: object
    pose_raw: Tensor | None
    pose_ctx: object | None


def forward(net: Network, batch: Tensor):
    """Run the trunk once and both heads off the shared hidden activation.

    Returns (class logits, raw pose outputs or None, cache for backward).
    """
    cfg = net.config
    if batch.data.ndim != 4 or batch.data.shape[1:] != cfg.input_shape:
        raise DimensionError(
            f"batch shape {batch.shape} does not match input {cfg.input_shape}"
        )
    steps = []
    hidden_acts = []
    a = batch
    for params, (k, ksz, pad), pooled in zip(net.conv_params, cfg.conv, cfg.pool):
        a, ctx = conv2d_forward(a, params, stride=1, pad=pad)
        steps.append(("conv", ctx, a))
        a, ctx = relu_forward(a)
        steps.append(("relu", ctx, a))
        if pooled:
            a, ctx = maxpool2_forward(a)
            steps.append(("pool", ctx, a))
        hidden_acts.append(a)

    n = batch.data.shape[0]
    flat = Tensor(a.data.reshape(n, -1))
    steps.append(("flatten", a, flat))
    hz, ctx = fc_forward(flat, net.fc_hidden)
    steps.append(("fc", ctx, hz))
    h, ctx = relu_forward(hz)
    steps.append(("relu", ctx, h))
    hidden_acts.append(h)

    logits, class_ctx = fc_forward(h, net.class_head)

    pose_raw = None
    pose_ctx = None
    if net.pose_head is not None:
        tap = hidden_acts[cfg.tap_index()]
        if tap.data.ndim != 2:
            tap_flat = Tensor(tap.data.reshape(n, -1))
            steps.append(("flatten", tap, tap_flat))
            tap = tap_flat
        pose_raw, pose_ctx = fc_forward(tap, net.pose_head)

    net.trunk_evals += 1
    cache = ForwardCache(
        net=net,
        eval_id=net.trunk_evals,
        steps=steps,
        logits=logits,
        class_ctx=class_ctx,
        pose_raw=pose_raw,
        pose_ctx=pose_ctx,
    )
    return logits, pose_raw, cache


@dataclass
class LossBundle:
    combined: float
    class_loss: float
    pose_loss: float | None
    grad_logits: np.ndarray
    grad_pose_raw: np.ndarray | None


def combined_loss(logits, pose_raw, labels, truth_poses, lam: float) -> LossBundle:
    """Classification loss plus lam times the pose loss.

    The returned pose gradient is already scaled by lam, i.e. it is the
    gradient of the combined objective at the pose head output. With lam = 0
    the combined value equals the classification loss exactly.
    """
    class_loss, grad_logits = softmax_logloss(logits, labels)
    if pose_raw is None:
        if truth_poses is not None:
            raise DataError("truth poses supplied but the network has no pose head")
        return LossBundle(class_loss, class_loss, None, grad_logits, None)
    if truth_poses is None:
        raise DataError("pose head present but no truth poses supplied")
    p_loss, p_grad = pose_geometry.pose_loss(pose_raw, truth_poses)
    combined = class_loss + lam * p_loss
    return LossBundle(combined, class_loss, p_loss, grad_logits, lam * p_grad)


def backward(net: Network, cache: ForwardCache, grad_logits, grad_pose_raw=None):
    """Accumulate parameter gradients for the combined objective.

    Head gradients are injected into the shared activations first (their
    contributions sum in the grad buffers), then the trunk is walked in
    reverse. A head injection that is identically zero is skipped so that a
    lam = 0 run leaves trunk gradients bitwise identical to a baseline net.
    """
    if cache.net is not net or cache.eval_id != net.trunk_evals:
        raise StateError("forward cache is stale; rerun forward before backward")
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if grad_logits.shape != cache.logits.data.shape:
        raise DimensionError(
            f"grad_logits shape {grad_logits.shape} != logits {cache.logits.data.shape}"
        )
    if grad_pose_raw is not None and net.pose_head is None:
        raise StateError("pose gradient supplied but the network has no pose head")

    cache.logits.grad += grad_logits
    if np.any(cache.logits.grad):
        fc_backward(cache.class_ctx, cache.logits.grad)

    if net.pose_head is not None and grad_pose_raw is not None:
        grad_pose_raw = np.asarray(grad_pose_raw, dtype=np.float64)
        if grad_pose_raw.shape != cache.pose_raw.data.shape:
            raise DimensionError(
                f"grad_pose_raw shape {grad_pose_raw.shape} != pose output "
                f"{cache.pose_raw.data.shape}"
            )
        cache.pose_raw.grad += grad_pose_raw
        if np.any(cache.pose_raw.grad):
            fc_backward(cache.pose_ctx, cache.pose_raw.grad)

    for kind, ctx, out in reversed(cache.steps):
        if kind == "conv":
            conv2d_backward(ctx, out.grad)
        elif kind == "relu":
            relu_backward(ctx, out.grad)
        elif kind == "pool":
            maxpool2_backward(ctx, out.grad)
        elif kind == "fc":
            fc_backward(ctx, out.grad)
        else:  # flatten: ctx is the source tensor
            ctx.grad += out.grad.reshape(ctx.data.shape)


def strip_pose_head(net: Network) -> Network:
    """Drop the secondary head; trunk and classification head are copied bitwise."""
    if net.pose_head is None:
        raise StateError("network has no pose head to strip")
    cfg = net.config
    stripped_cfg = NetworkConfig(
        input_shape=cfg.input_shape,
        conv=cfg.conv,
        pool=cfg.pool,
        hidden=cfg.hidden,
        num_classes=cfg.num_classes,
        pose_mode="none",
        pose_tap=cfg.pose_tap,
        lam=cfg.lam,
        init_std=cfg.init_std,
    )
    return Network(
        stripped_cfg,
        [p.copy() for p in net.conv_params],
        net.fc_hidden.copy(),
        net.class_head.copy(),
        None,
    )
