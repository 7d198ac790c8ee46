"""All-convolutional descriptor network with hand-written backprop and Adam.

Activations are NHWC numpy arrays.  Every conv but the last is followed by a
parameter-free batch normalisation (scale 1, shift 0) and a ReLU; the last
conv covers the whole remaining map and its output is L2-normalised.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteLoss, ShapeMismatch, ValidationError
from .losses import LossParams, hardest_in_batch_loss, total_loss

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    out_ch: int
    stride: int = 1
    padding: str = "same"  # or "valid"
    norm: bool = True

    def out_size(self, size: int) -> int:
        pad = self.kernel // 2 if self.padding == "same" else 0
        return (size + 2 * pad - self.kernel) // self.stride + 1


FULL_ARCH = (
    ConvSpec(3, 32, 1), ConvSpec(3, 32, 1), ConvSpec(3, 64, 2), ConvSpec(3, 64, 1),
    ConvSpec(3, 128, 2), ConvSpec(3, 128, 1), ConvSpec(8, 128, 1, "valid", False),
)
# Same topology at a quarter of the width, for CI-scale end-to-end runs.
SMALL_ARCH = (
    ConvSpec(3, 8, 1), ConvSpec(3, 8, 1), ConvSpec(3, 16, 2), ConvSpec(3, 16, 1),
    ConvSpec(3, 32, 2), ConvSpec(3, 32, 1), ConvSpec(8, 128, 1, "valid", False),
)
# 8x8 input, two convs, 8-d output: small enough for whole-network finite differences.
MICRO_ARCH = (ConvSpec(3, 4, 2), ConvSpec(4, 8, 1, "valid", False))

ARCHS = {"full": (FULL_ARCH, 32), "small": (SMALL_ARCH, 32), "micro": (MICRO_ARCH, 8)}


@dataclass
class NetParams:
    arch: Tuple[ConvSpec, ...]
    in_size: int
    weights: List[np.ndarray]  # (k, k, c_in, c_out)
    running_mean: List[Optional[np.ndarray]]
    running_var: List[Optional[np.ndarray]]

    @property
    def out_dim(self) -> int:
        return self.arch[-1].out_ch

    def shape_trace(self) -> Tuple[int, ...]:
        sizes = [self.in_size]
        for spec in self.arch:
            sizes.append(spec.out_size(sizes[-1]))
        return tuple(sizes)

    def copy(self) -> "NetParams":
        return NetParams(self.arch, self.in_size, [w.copy() for w in self.weights],
                         [None if m is None else m.copy() for m in self.running_mean],
                         [None if v is None else v.copy() for v in self.running_var])

    def n_weights(self) -> int:
        return int(sum(w.size for w in self.weights))


def _orthogonal(shape, rng: np.random.Generator, dtype) -> np.ndarray:
    k, _, cin, cout = shape
    rows, cols = k * k * cin, cout
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q[:rows, :cols].reshape(shape).astype(dtype)


def init_params(arch: Sequence[ConvSpec] = FULL_ARCH, in_size: int = 32, seed: int = 0,
                dtype=np.float32) -> NetParams:
    """Orthogonal (gain 1) initialisation; BN running stats start at mean 0, var 1."""
    arch = tuple(arch)
    rng = np.random.default_rng(seed)
    weights, means, vars_ = [], [], []
    cin = 1
    size = in_size
    for spec in arch:
        weights.append(_orthogonal((spec.kernel, spec.kernel, cin, spec.out_ch), rng, dtype))
        means.append(np.zeros(spec.out_ch, dtype) if spec.norm else None)
        vars_.append(np.ones(spec.out_ch, dtype) if spec.norm else None)
        size = spec.out_size(size)
        if size < 1:
            raise ValidationError("architecture shrinks the input below 1x1")
        cin = spec.out_ch
    if size != 1:
        raise ValidationError(f"architecture must end at 1x1, got {size}x{size}")
    return NetParams(arch, in_size, weights, means, vars_)


def params_for(name: str, seed: int = 0, dtype=np.float32) -> NetParams:
    arch, size = ARCHS[name]
    return init_params(arch, size, seed, dtype)


# --- layers -----------------------------------------------------------------

def _pad(spec: ConvSpec) -> int:
    return spec.kernel // 2 if spec.padding == "same" else 0


def conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    """x (B, H, W, C), w (k, k, C, O) -> y (B, Ho, Wo, O) and the im2col cache."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    b, h, wd, c = x.shape
    k = w.shape[0]
    ho = (h - k) // stride + 1
    wo = (wd - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, : (ho - 1) * stride + 1: stride,
                                                      : (wo - 1) * stride + 1: stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * ho * wo, k * k * c)
    y = cols @ w.reshape(k * k * c, -1)
    return y.reshape(b, ho, wo, -1), (cols, x.shape)


def conv_backward(dy: np.ndarray, w: np.ndarray, cache, stride: int, pad: int, need_dx: bool = True):
    cols, xshape = cache
    b, ho, wo, o = dy.shape
    k = w.shape[0]
    c = w.shape[2]
    dy2 = dy.reshape(-1, o)
    dw = (cols.T @ dy2).reshape(w.shape)
    if not need_dx:
        return None, dw
    if stride == 1 and k <= 3:
        # small stride-1 kernels: dx is a full convolution of dy with the flipped kernel
        hp, wp = xshape[1], xshape[2]
        full = np.zeros((b, hp + k - 1, wp + k - 1, o), dtype=dy.dtype)
        full[:, k - 1:k - 1 + ho, k - 1:k - 1 + wo] = dy
        flipped = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        dx, _ = conv_forward(full, flipped, 1, 0)
        return (dx[:, pad:hp - pad, pad:wp - pad] if pad else dx), dw
    dcols = (dy2 @ w.reshape(k * k * c, o).T).reshape(b, ho, wo, k, k, c)
    dx = np.zeros(xshape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i: i + stride * (ho - 1) + 1: stride, j: j + stride * (wo - 1) + 1: stride, :] += dcols[:, :, :, i, j, :]
    if pad:
        dx = dx[:, pad:-pad, pad:-pad, :]
    return dx, dw


def bn_forward_train(x: np.ndarray):
    mean = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv
    return xhat, (xhat, inv), mean, var


def bn_backward(dy: np.ndarray, cache):
    xhat, inv = cache
    m1 = dy.mean(axis=(0, 1, 2))
    m2 = (dy * xhat).mean(axis=(0, 1, 2))
    return (dy - m1 - xhat * m2) * inv


def l2_normalize(z: np.ndarray):
    norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    return z / norm, norm


def l2_normalize_backward(g: np.ndarray, y: np.ndarray, norm: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the pre-normalisation vector; orthogonal to ``y`` by construction."""
    return (g - y * (y * g).sum(axis=1, keepdims=True)) / norm


def _check_input(params: NetParams, patches: np.ndarray) -> np.ndarray:
    x = np.asarray(patches)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (params.in_size, params.in_size):
        raise ShapeMismatch(f"expected (B, {params.in_size}, {params.in_size}) patches, got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeMismatch("empty patch batch")
    return x.astype(params.weights[0].dtype, copy=False)[..., None]


def forward(params: NetParams, patches: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Inference: fixed running statistics, so each row depends on its own patch only."""
    x_all = _check_input(params, patches)
    outs = []
    for start in range(0, x_all.shape[0], chunk):
        x = x_all[start:start + chunk]
        for li, spec in enumerate(params.arch):
            x, _ = conv_forward(x, params.weights[li], spec.stride, _pad(spec))
            if spec.norm:
                x = (x - params.running_mean[li]) / np.sqrt(params.running_var[li] + BN_EPS)
                x = np.maximum(x, 0)
        z = x.reshape(x.shape[0], -1)
        outs.append(l2_normalize(z)[0])
    return np.concatenate(outs, axis=0)


def activation_shapes(params: NetParams, patches: np.ndarray) -> List[Tuple[int, ...]]:
    """Spatial size after every layer, for shape-trace checks."""
    x = _check_input(params, patches)
    sizes = [x.shape[1]]
    for li, spec in enumerate(params.arch):
        x, _ = conv_forward(x, params.weights[li], spec.stride, _pad(spec))
        sizes.append(x.shape[1])
    return sizes


def forward_train(params: NetParams, patches: np.ndarray):
    """Training-mode forward (batch statistics). Returns (features, cache, batch_stats)."""
    x = _check_input(params, patches)
    caches = []
    stats = []
    for li, spec in enumerate(params.arch):
        y, ccache = conv_forward(x, params.weights[li], spec.stride, _pad(spec))
        if spec.norm:
            yh, bcache, mean, var = bn_forward_train(y)
            mask = yh > 0
            x = yh * mask
            caches.append((ccache, bcache, mask))
            stats.append((mean, var, y.shape[0] * y.shape[1] * y.shape[2]))
        else:
            x = y
            caches.append((ccache, None, None))
            stats.append(None)
    z = x.reshape(x.shape[0], -1)
    feats, norm = l2_normalize(z)
    return feats, (caches, feats, norm, x.shape), stats


def backward(params: NetParams, cache, grad_feats: np.ndarray) -> List[np.ndarray]:
    """Weight gradients given dLoss/dfeatures (features are the L2-normalised outputs)."""
    caches, feats, norm, last_shape = cache
    g = l2_normalize_backward(grad_feats.astype(feats.dtype, copy=False), feats, norm).reshape(last_shape)
    grads: List[Optional[np.ndarray]] = [None] * len(params.arch)
    for li in range(len(params.arch) - 1, -1, -1):
        spec = params.arch[li]
        ccache, bcache, mask = caches[li]
        if spec.norm:
            g = bn_backward(g * mask, bcache)
        g, dw = conv_backward(g, params.weights[li], ccache, spec.stride, _pad(spec), need_dx=li > 0)
        grads[li] = dw
    return grads


def update_running_stats(params: NetParams, stats, momentum: float = BN_MOMENTUM) -> None:
    for li, st in enumerate(stats):
        if st is None:
            continue
        mean, var, count = st
        unbiased = var * count / max(count - 1, 1)
        params.running_mean[li] = ((1 - momentum) * params.running_mean[li] + momentum * mean).astype(
            params.running_mean[li].dtype)
        params.running_var[li] = ((1 - momentum) * params.running_var[li] + momentum * unbiased).astype(
            params.running_var[li].dtype)


# --- optimiser --------------------------------------------------------------

def lr_schedule(step: int, base_lr: float = 0.001, decay: float = 0.9, every: int = 10000) -> float:
    if step < 0:
        raise ValidationError("step must be nonnegative")
    return base_lr * decay ** (step // every)


@dataclass
class OptimizerState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    base_lr: float = 0.001
    weight_decay: float = 0.0001
    decay: float = 0.9
    decay_every: int = 10000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def lr(self) -> float:
        return lr_schedule(self.step, self.base_lr, self.decay, self.decay_every)

    def copy(self) -> "OptimizerState":
        return replace(self, m=[a.copy() for a in self.m], v=[a.copy() for a in self.v])


def init_optimizer(params: NetParams, **kw) -> OptimizerState:
    return OptimizerState([np.zeros_like(w) for w in params.weights],
                          [np.zeros_like(w) for w in params.weights], **kw)


def adam_update(params: NetParams, opt: OptimizerState, grads: Sequence[np.ndarray]):
    """Adam with decoupled weight decay; returns new (params, opt)."""
    p2 = params.copy()
    o2 = opt.copy()
    lr = opt.lr()
    t = opt.step + 1
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for i, g in enumerate(grads):
        o2.m[i] = opt.beta1 * opt.m[i] + (1 - opt.beta1) * g
        o2.v[i] = opt.beta2 * opt.v[i] + (1 - opt.beta2) * g * g
        step = (o2.m[i] / c1) / (np.sqrt(o2.v[i] / c2) + opt.eps)
        w = params.weights[i] * (1.0 - lr * opt.weight_decay) - lr * step
        p2.weights[i] = w.astype(params.weights[i].dtype)
        o2.m[i] = o2.m[i].astype(params.weights[i].dtype)
        o2.v[i] = o2.v[i].astype(params.weights[i].dtype)
    o2.step = t
    return p2, o2


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class Objective:
    """Which loss trains the net: the match-set loss or the hardest-in-batch comparator."""

    kind: str = "structured"  # or "hardest"
    margin: float = 0.6
    loss: LossParams = field(default_factory=LossParams)


def batch_arrays(batch):
    """Stack a TrainingBatch (or list of MatchSets) into (patches, n_sets, n1, s_patch)."""
    sets = batch.match_sets if hasattr(batch, "match_sets") else batch
    n1 = len(sets[0].s_patch)
    xs = []
    for ms in sets:
        xs.append(ms.patches_a)
        xs.append(ms.patches_b)
    return np.concatenate(xs, axis=0), len(sets), n1, [np.asarray(ms.s_patch) for ms in sets]


def loss_and_feature_grads(feats: np.ndarray, n_sets: int, n1: int, s_patch, objective: Objective):
    """Loss value and dLoss/dfeatures; features are laid out [a_0, b_0, a_1, b_1, ...] per set."""
    blocks = feats.reshape(n_sets, 2, n1, -1)
    # hinge comparisons are False on NaN, so non-finite features would otherwise score zero loss
    for k in range(n_sets):
        if not np.all(np.isfinite(blocks[k])):
            raise NonFiniteLoss(k, float("nan"))
    gfeat = np.zeros_like(blocks, dtype=np.float64)
    if objective.kind == "structured":
        pairs = [(blocks[k, 0].astype(np.float64), blocks[k, 1].astype(np.float64)) for k in range(n_sets)]
        loss, grads, per_set = total_loss(pairs, s_patch, objective.loss)
        for k, (g1, g2) in enumerate(grads):
            gfeat[k, 0] = g1
            gfeat[k, 1] = g2
        for k, v in enumerate(per_set):
            if not np.isfinite(v):
                raise NonFiniteLoss(k, v)
    elif objective.kind == "hardest":
        # one pool over the whole batch, as in random-batch hardest-in-batch training
        a = blocks[:, 0].reshape(n_sets * n1, -1).astype(np.float64)
        b = blocks[:, 1].reshape(n_sets * n1, -1).astype(np.float64)
        loss, g1, g2 = hardest_in_batch_loss(a, b, objective.margin)
        if not np.isfinite(loss):
            raise NonFiniteLoss(0, loss)
        gfeat[:, 0] = g1.reshape(n_sets, n1, -1)
        gfeat[:, 1] = g2.reshape(n_sets, n1, -1)
    else:
        raise ValidationError(f"unknown objective {objective.kind!r}")
    return loss, gfeat.reshape(feats.shape)


def train_step(params: NetParams, opt: OptimizerState, batch, objective: Objective = Objective()):
    """One optimisation step; returns (params', opt', loss). Inputs are not modified."""
    x, n_sets, n1, s_patch = batch_arrays(batch)
    bad = ~np.isfinite(x.reshape(n_sets, 2 * n1, -1)).all(axis=(1, 2))
    if bad.any():
        raise NonFiniteLoss(int(np.argmax(bad)), float("nan"))
    feats, cache, stats = forward_train(params, x)
    loss, gfeat = loss_and_feature_grads(feats, n_sets, n1, s_patch, objective)
    if not np.isfinite(loss):
        raise NonFiniteLoss(0, loss)
    grads = backward(params, cache, gfeat)
    new_params, new_opt = adam_update(params, opt, grads)
    update_running_stats(new_params, stats)
    return new_params, new_opt, float(loss)


def training_loss(params: NetParams, batch, objective: Objective = Objective()) -> float:
    """Loss in training mode without touching parameters (for finite differences)."""
    x, n_sets, n1, s_patch = batch_arrays(batch)
    feats, _, _ = forward_train(params, x)
    return float(loss_and_feature_grads(feats, n_sets, n1, s_patch, objective)[0])


def weight_gradients(params: NetParams, batch, objective: Objective = Objective()):
    x, n_sets, n1, s_patch = batch_arrays(batch)
    feats, cache, _ = forward_train(params, x)
    loss, gfeat = loss_and_feature_grads(feats, n_sets, n1, s_patch, objective)
    return loss, backward(params, cache, gfeat)
