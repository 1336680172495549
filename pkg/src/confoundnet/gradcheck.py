"""Finite-difference verification battery for every kernel and the combined objective.

Each component is checked on seeded random instances with inputs nudged away
from non-smooth points (ReLU zero crossings, pool ties, pose-metric corners),
then scored with the central-difference oracle. Kernels are called through the
module object so a corrupted backward pass injected in tests is picked up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import network as net_mod
from . import pose_geometry
from . import tensor_engine as te
from .network import NetworkConfig

SMOOTH_TOL = 1e-6
ROUGH_TOL = 1e-4
EPS = 1e-5


@dataclass
class ComponentResult:
    name: str
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def _nudged(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(x >= 0.0, x + margin, x - margin)


def _pool_safe(rng, shape, gap=1e-3):
    """Random tensor whose 2x2 windows all have a clear top-2 gap."""
    for _ in range(200):
        x = rng.uniform(0.0, 1.0, size=shape)
        n, c, h, w = shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
        top2 = np.sort(win, axis=1)[:, -2:]
        if np.min(top2[:, 1] - top2[:, 0]) > gap:
            return x
    raise RuntimeError("could not draw a tie-free pooling input")


def _check_conv(seed):
    rng = np.random.default_rng([101, seed])
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    kh = int(rng.integers(1, 4))
    # choose spatial dims that give an integer, positive output size
    ho = int(rng.integers(2, 4))
    h = stride * (ho - 1) + kh - 2 * pad
    while h <= 0:
        ho += 1
        h = stride * (ho - 1) + kh - 2 * pad
    cin = int(rng.integers(1, 3))
    k = int(rng.integers(1, 4))
    x = rng.standard_normal((2, cin, h, h))
    w = rng.standard_normal((k, cin, kh, kh))
    b = rng.standard_normal(k)
    probe = rng.standard_normal((2, k, ho, ho))

    def fn(arrays):
        xt = te.Tensor(arrays[0])
        params = te.LayerParams(arrays[1].copy(), arrays[2].copy())
        out, ctx = te.conv2d_forward(xt, params, stride=stride, pad=pad)
        loss = float(np.sum(out.data * probe))
        te.conv2d_backward(ctx, probe)
        return loss, [xt.grad, params.weights.grad, params.bias.grad]

    return te.grad_check(fn, [x, w, b], eps=EPS)


def _check_fc(seed):
    rng = np.random.default_rng([102, seed])
    n, fin, fout = 3, int(rng.integers(2, 8)), int(rng.integers(2, 6))
    x = rng.standard_normal((n, fin))
    w = rng.standard_normal((fout, fin))
    b = rng.standard_normal(fout)
    probe = rng.standard_normal((n, fout))

    def fn(arrays):
        xt = te.Tensor(arrays[0])
        params = te.LayerParams(arrays[1].copy(), arrays[2].copy())
        out, ctx = te.fc_forward(xt, params)
        loss = float(np.sum(out.data * probe))
        te.fc_backward(ctx, probe)
        return loss, [xt.grad, params.weights.grad, params.bias.grad]

    return te.grad_check(fn, [x, w, b], eps=EPS)


def _check_relu(seed):
    rng = np.random.default_rng([103, seed])
    x = _nudged(rng, (4, 9))
    probe = rng.standard_normal(x.shape)

    def fn(arrays):
        xt = te.Tensor(arrays[0])
        out, ctx = te.relu_forward(xt)
        loss = float(np.sum(out.data * probe))
        te.relu_backward(ctx, probe)
        return loss, [xt.grad]

    return te.grad_check(fn, [x], eps=EPS)


def _check_maxpool(seed):
    rng = np.random.default_rng([104, seed])
    x = _pool_safe(rng, (2, 2, 4, 6))
    probe = rng.standard_normal((2, 2, 2, 3))

    def fn(arrays):
        xt = te.Tensor(arrays[0])
        out, ctx = te.maxpool2_forward(xt)
        loss = float(np.sum(out.data * probe))
        te.maxpool2_backward(ctx, probe)
        return loss, [xt.grad]

    return te.grad_check(fn, [x], eps=EPS)


def _check_softmax(seed):
    rng = np.random.default_rng([105, seed])
    n, c = 4, int(rng.integers(2, 6))
    x = rng.standard_normal((n, c)) * 2.0
    labels = rng.integers(0, c, size=n)

    def fn(arrays):
        loss, grad = te.softmax_logloss(te.Tensor(arrays[0]), labels)
        return loss, [grad]

    return te.grad_check(fn, [x], eps=EPS)


def _pose_instance(rng, pd):
    """Predictions at a controlled angular offset from truth, away from the
    dot-product corners at 0 and +/-1 where the metric is non-smooth."""
    n = 8
    offs = rng.uniform(0.3, 1.2, size=n) * rng.choice([-1.0, 1.0], size=n)
    radius = rng.uniform(0.5, 2.0, size=n)
    if pd == 2:
        truth = rng.uniform(0.0, 2.0 * math.pi, size=n)
        ang = truth / 2.0 + offs
        raw = np.stack([np.cos(ang), np.sin(ang)], axis=1) * radius[:, None]
        return raw, truth
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1)[:, None]
    o = rng.standard_normal((n, 4))
    o -= (o * q).sum(axis=1)[:, None] * q
    o /= np.linalg.norm(o, axis=1)[:, None]
    raw = (q * np.cos(offs)[:, None] + o * np.sin(offs)[:, None]) * radius[:, None]
    return raw, q


def _check_pose(seed):
    rng = np.random.default_rng([106, seed])
    worst = 0.0
    for pd in (2, 4):
        raw, truth = _pose_instance(rng, pd)

        def fn(arrays, _truth=truth):
            loss, grad = pose_geometry.pose_loss(arrays[0], _truth)
            return loss, [grad]

        worst = max(worst, te.grad_check(fn, [raw], eps=EPS))
    return worst


_COMBO_CFG = NetworkConfig(
    input_shape=(1, 8, 8),
    conv=((3, 3, 1), (4, 3, 1), (4, 3, 1)),
    pool=(True, True, True),
    hidden=6,
    num_classes=3,
    pose_mode="azimuth",
    lam=0.7,
    init_std=0.35,
)


def _well_conditioned(net, x, truth, margin=3e-4):
    """Reject instances whose activations sit near a ReLU kink, a pool tie, or
    a pose-metric corner; central differences would be meaningless there."""
    logits, pose_raw, cache = net_mod.forward(net, x)
    for kind, ctx, out in cache.steps:
        if kind == "relu" and np.min(np.abs(ctx.x.data)) < margin:
            return False
        if kind == "pool":
            n, c, h, w = ctx.x.data.shape
            win = (
                ctx.x.data.reshape(n, c, h // 2, 2, w // 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(-1, 4)
            )
            top2 = np.sort(win, axis=1)[:, -2:]
            # post-ReLU windows that are entirely zero tie harmlessly; a tight
            # gap only destabilizes the check when the max is positive
            live = top2[:, 1] > 0.0
            if np.any(live & (top2[:, 1] - top2[:, 0] < margin)):
                return False
    raw = pose_raw.data
    r = np.linalg.norm(raw, axis=1)
    if np.min(r) < 1e-3:
        return False
    q = raw / r[:, None]
    dot = np.abs((q * pose_geometry.azimuth_to_target(truth)).sum(axis=1))
    return bool(np.all((dot > 0.03) & (dot < 0.97)))


def _check_combo(seed):
    base = np.random.default_rng([107, seed])
    for attempt in range(60):
        rng = np.random.default_rng([107, seed, attempt])
        net = net_mod.build(_COMBO_CFG, int(base.integers(0, 2**31)) + attempt)
        x = te.Tensor(rng.standard_normal((2, 1, 8, 8)))
        labels = rng.integers(0, _COMBO_CFG.num_classes, size=2)
        truth = rng.uniform(0.0, 2.0 * math.pi, size=2)
        if _well_conditioned(net, x, truth):
            break
    else:
        raise RuntimeError("no well-conditioned combo instance found")

    params = net.parameters()
    arrays = [a for p in params for a in (p.weights.data.copy(), p.bias.data.copy())]

    def fn(arr):
        for i, p in enumerate(params):
            np.copyto(p.weights.data, arr[2 * i])
            np.copyto(p.bias.data, arr[2 * i + 1])
        net.zero_grads()
        logits, pose_raw, cache = net_mod.forward(net, x)
        bundle = net_mod.combined_loss(logits, pose_raw, labels, truth, _COMBO_CFG.lam)
        net_mod.backward(net, cache, bundle.grad_logits, bundle.grad_pose_raw)
        grads = [g for p in params for g in (p.weights.grad.copy(), p.bias.grad.copy())]
        return bundle.combined, grads

    return te.grad_check(fn, arrays, eps=EPS)


_COMPONENTS = [
    ("conv2d", _check_conv, SMOOTH_TOL),
    ("fc", _check_fc, SMOOTH_TOL),
    ("relu", _check_relu, ROUGH_TOL),
    ("maxpool2", _check_maxpool, ROUGH_TOL),
    ("softmax_logloss", _check_softmax, SMOOTH_TOL),
    ("pose_loss", _check_pose, ROUGH_TOL),
    ("obj_combo", _check_combo, ROUGH_TOL),
]


def run_battery(instances: int = 20) -> list[ComponentResult]:
    """Max relative error per component over ``instances`` seeded instances."""
    results = []
    for name, runner, tol in _COMPONENTS:
        worst = 0.0
        for i in range(instances):
            worst = max(worst, runner(i))
        results.append(ComponentResult(name, worst, tol))
    return results


def format_report(results) -> str:
    lines = []
    for r in results:
        lines.append(
            f"{r.name:<16} max_rel_err {r.worst:.3e}   tol {r.tol:.0e}   "
            f"{'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
