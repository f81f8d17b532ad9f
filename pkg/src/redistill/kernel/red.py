"""Gated residual adapter block and its feature-matching loss.

The block maps a feature map f_s of C channels to

    f_d = f_r + f_s * gate
    gate = sigmoid(bn(conv1x1(f_s)))      -- the logit module
    f_r  = relu6(bn(convKxK(f_s)))        -- the residual encoder

with all convs C -> C so the elementwise product and sum are shape exact.
Ablation variants drop individual paths. The loss collapses channels by
averaging and compares the resulting spatial maps per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFinite, ShapeMismatch
from . import ops

VARIANTS = ("full", "no_logit", "no_residual_encoder", "no_shortcut")


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass
class RedBlockParams:
    lm_w: np.ndarray            # (C, C, 1, 1)
    lm_b: np.ndarray            # (C,)
    lm_bn: BatchNormState
    re_w: np.ndarray            # (C, C, k, k)
    re_b: np.ndarray
    re_bn: BatchNormState

    @property
    def channels(self) -> int:
        return self.lm_w.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.re_w.shape[2]

    def arrays(self) -> dict:
        """Trainable arrays by name (running stats excluded)."""
        return {
            "lm_w": self.lm_w, "lm_b": self.lm_b,
            "lm_gamma": self.lm_bn.gamma, "lm_beta": self.lm_bn.beta,
            "re_w": self.re_w, "re_b": self.re_b,
            "re_gamma": self.re_bn.gamma, "re_beta": self.re_bn.beta,
        }


def _bn_state(channels, dtype):
    return BatchNormState(
        gamma=np.ones(channels, dtype=dtype),
        beta=np.zeros(channels, dtype=dtype),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
    )


def init_red_block(channels, kernel_size=3, rng=None, dtype=np.float32):
    """Fan-in uniform conv weights; gate bias starts at zero (gate near 0.5)."""
    rng = rng or np.random.default_rng(0)
    lm_bound = 1.0 / np.sqrt(channels)
    re_bound = 1.0 / np.sqrt(channels * kernel_size * kernel_size)
    return RedBlockParams(
        lm_w=rng.uniform(-lm_bound, lm_bound,
                         (channels, channels, 1, 1)).astype(dtype),
        lm_b=np.zeros(channels, dtype=dtype),
        lm_bn=_bn_state(channels, dtype),
        re_w=rng.uniform(-re_bound, re_bound,
                         (channels, channels, kernel_size, kernel_size)).astype(dtype),
        re_b=rng.uniform(-re_bound, re_bound, channels).astype(dtype),
        re_bn=_bn_state(channels, dtype),
    )


def red_forward(params: RedBlockParams, f_s, training=True, variant="full"):
    """Returns (f_d, cache). Training mode updates BN running stats in place."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if f_s.ndim != 4 or f_s.shape[1] != params.channels:
        raise ShapeMismatch(
            f"adapter expects (n, {params.channels}, h, w), got {f_s.shape}")
    if not np.isfinite(f_s).all():
        raise NonFinite("adapter input contains NaN/Inf")

    use_gate = variant in ("full", "no_residual_encoder", "no_shortcut")
    use_re = variant in ("full", "no_logit", "no_shortcut")

    gate = gate_cache = None
    if use_gate:
        z, conv_cache = ops.conv2d_forward(f_s, params.lm_w, params.lm_b)
        zn, bn_cache, running = ops.batchnorm_forward(
            z, params.lm_bn.gamma, params.lm_bn.beta,
            params.lm_bn.running_mean, params.lm_bn.running_var,
            params.lm_bn.eps, params.lm_bn.momentum, training)
        if training:
            params.lm_bn.running_mean, params.lm_bn.running_var = running
        gate, sig_cache = ops.sigmoid_forward(zn)
        gate_cache = (conv_cache, bn_cache, sig_cache)

    f_r = re_cache = None
    if use_re:
        pad = params.kernel_size // 2
        r, conv_cache = ops.conv2d_forward(f_s, params.re_w, params.re_b, padding=pad)
        rn, bn_cache, running = ops.batchnorm_forward(
            r, params.re_bn.gamma, params.re_bn.beta,
            params.re_bn.running_mean, params.re_bn.running_var,
            params.re_bn.eps, params.re_bn.momentum, training)
        if training:
            params.re_bn.running_mean, params.re_bn.running_var = running
        f_r, relu_cache = ops.relu6_forward(rn)
        re_cache = (conv_cache, bn_cache, relu_cache)

    if variant == "full":
        gated, mul_cache = ops.mul_forward(f_s, gate)
        f_d = f_r + gated
    elif variant == "no_logit":
        mul_cache = None
        f_d = f_r + f_s
    elif variant == "no_residual_encoder":
        gated, mul_cache = ops.mul_forward(f_s, gate)
        f_d = gated
    else:  # no_shortcut: the two modules stacked multiplicatively, no f_s path
        gated, mul_cache = ops.mul_forward(f_r, gate)
        f_d = gated
    cache = (variant, gate_cache, re_cache, mul_cache)
    return f_d, cache


def red_backward(d_fd, cache):
    """Returns (d_fs, grads) with grads keyed like RedBlockParams.arrays()."""
    variant, gate_cache, re_cache, mul_cache = cache
    grads = {}
    d_fs = np.zeros_like(d_fd)

    d_gate = None
    if variant == "full":
        d_fr = d_fd
        d_a, d_gate = ops.mul_backward(d_fd, mul_cache)
        d_fs = d_fs + d_a
    elif variant == "no_logit":
        d_fr = d_fd
        d_fs = d_fs + d_fd
    elif variant == "no_residual_encoder":
        d_fr = None
        d_a, d_gate = ops.mul_backward(d_fd, mul_cache)
        d_fs = d_fs + d_a
    else:  # no_shortcut
        d_fr, d_gate = ops.mul_backward(d_fd, mul_cache)

    if d_gate is not None:
        conv_cache, bn_cache, sig_cache = gate_cache
        d_zn = ops.sigmoid_backward(d_gate, sig_cache)
        d_z, d_gamma, d_beta = ops.batchnorm_backward(d_zn, bn_cache)
        d_in, d_w, d_b = ops.conv2d_backward(d_z, conv_cache)
        grads.update({"lm_w": d_w, "lm_b": d_b, "lm_gamma": d_gamma, "lm_beta": d_beta})
        d_fs = d_fs + d_in
    if d_fr is not None and re_cache is not None:
        conv_cache, bn_cache, relu_cache = re_cache
        d_rn = ops.relu6_backward(d_fr, relu_cache)
        d_r, d_gamma, d_beta = ops.batchnorm_backward(d_rn, bn_cache)
        d_in, d_w, d_b = ops.conv2d_backward(d_r, conv_cache)
        grads.update({"re_w": d_w, "re_b": d_b, "re_gamma": d_gamma, "re_beta": d_beta})
        d_fs = d_fs + d_in
    return d_fs, grads


_NORM_FLOOR = 1e-12


def red_loss(f_t, f_d, distance="cosine"):
    """Distance between channel-averaged maps; returns (loss, d_loss/d_f_d).

    Cosine: per-sample 1 - cos over the flattened spatial map, batch mean.
    Euclidean: per-sample L2 norm of the difference, batch mean. Degenerate
    norms (< 1e-12) contribute a constant with zero gradient.
    """
    if f_t.ndim != 4 or f_d.ndim != 4:
        raise ShapeMismatch("feature maps must be 4-D NCHW")
    if f_t.shape[0] != f_d.shape[0] or f_t.shape[2:] != f_d.shape[2:]:
        raise ShapeMismatch(
            f"feature maps disagree on batch/spatial dims: {f_t.shape} vs {f_d.shape}")
    if not (np.isfinite(f_t).all() and np.isfinite(f_d).all()):
        raise NonFinite("feature map contains NaN/Inf")

    n = f_t.shape[0]
    c_d = f_d.shape[1]
    a = f_t.mean(axis=1).reshape(n, -1)
    b = f_d.mean(axis=1).reshape(n, -1)
    d_b = np.zeros_like(b)
    losses = np.empty(n, dtype=b.dtype)

    if distance == "cosine":
        for i in range(n):
            na = np.linalg.norm(a[i])
            nb = np.linalg.norm(b[i])
            if na < _NORM_FLOOR or nb < _NORM_FLOOR:
                losses[i] = 1.0
                continue
            cos = float(a[i] @ b[i]) / (na * nb)
            losses[i] = 1.0 - cos
            d_b[i] = -(a[i] / (na * nb) - cos * b[i] / (nb * nb))
    elif distance == "euclidean":
        for i in range(n):
            diff = b[i] - a[i]
            dist = np.linalg.norm(diff)
            losses[i] = dist
            if dist >= _NORM_FLOOR:
                d_b[i] = diff / dist
    else:
        raise ValueError(f"unknown distance {distance!r}")

    loss = float(losses.mean())
    spatial = f_d.shape[2], f_d.shape[3]
    d_map = d_b.reshape(n, 1, *spatial) / (n * c_d)
    d_fd = np.broadcast_to(d_map, f_d.shape).astype(f_d.dtype)
    return loss, d_fd
