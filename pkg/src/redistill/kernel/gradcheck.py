"""Finite-difference verification of the kernel's backward passes.

Central differences with per-parameter step h = 1e-5 * max(1, |theta|),
run in float64. Relative error uses max(|analytic|, |numeric|, DELTA) as
the denominator with DELTA = 1e-2, so near-zero gradients are judged on a
1e-2-scaled absolute basis. Instances are redrawn when a pre-activation
sits within 1e-3 of a ReLU6 kink, where central differences are invalid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .losses import diffusion_loss, kd_loss
from .red import init_red_block, red_backward, red_forward, red_loss

DELTA = 1e-2
STEP_SCALE = 1e-5
_KINK_MARGIN = 1e-3


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    tolerance: float
    max_rel_error: float
    per_group: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"{self.op_name}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.1e}) {status}")


def central_difference(f, arr):
    """Numeric gradient of scalar f() wrt arr, perturbing arr in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = STEP_SCALE * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DELTA)
    return float((np.abs(analytic - numeric) / denom).max())


def compare(f, arrays, analytic, op_name, tolerance):
    per_group = {}
    for name, arr in arrays.items():
        numeric = central_difference(f, arr)
        per_group[name] = relative_error(analytic[name], numeric)
    return GradCheckReport(op_name, tolerance, max(per_group.values()), per_group)


# --- instance builders (float64) ------------------------------------------------


def _draw_red_instance(seed, variant, kernel_size):
    """Redraws until ReLU6 pre-activations clear the kink margin."""
    for attempt in range(50):
        rng = np.random.default_rng([seed, attempt, 91])
        params = init_red_block(3, kernel_size, rng, dtype=np.float64)
        params.lm_bn.gamma += rng.uniform(-0.3, 0.3, 3)
        params.lm_bn.beta += rng.uniform(-0.3, 0.3, 3)
        params.re_bn.gamma += rng.uniform(-0.3, 0.3, 3)
        params.re_bn.beta += rng.uniform(-0.3, 0.3, 3)
        params.lm_b += rng.uniform(-0.2, 0.2, 3)
        f_s = rng.normal(0.0, 1.0, (2, 3, 4, 4))
        pad = kernel_size // 2
        r, _ = ops.conv2d_forward(f_s, params.re_w, params.re_b, padding=pad)
        rn, _, _ = ops.batchnorm_forward(
            r, params.re_bn.gamma, params.re_bn.beta,
            params.re_bn.running_mean, params.re_bn.running_var)
        margin = np.minimum(np.abs(rn), np.abs(rn - 6.0)).min()
        if margin > _KINK_MARGIN:
            return params, f_s, rng
    raise RuntimeError(f"no kink-free instance found for seed {seed}")


def check_red_forward(seed, tolerance=1e-5, variant="full", kernel_size=3,
                      corrupt=False):
    """Backward of the adapter block against a random linear readout."""
    params, f_s, rng = _draw_red_instance(seed, variant, kernel_size)
    v = rng.normal(0.0, 1.0, f_s.shape)

    def f():
        out, _ = red_forward(params, f_s, training=True, variant=variant)
        return float((out * v).sum())

    out, cache = red_forward(params, f_s, training=True, variant=variant)
    d_fs, grads = red_backward(v.copy(), cache)
    analytic = dict(grads)
    analytic["f_s"] = d_fs
    arrays = {k: a for k, a in params.arrays().items() if k in grads}
    arrays["f_s"] = f_s
    if corrupt:
        analytic["re_w" if "re_w" in analytic else "lm_w"] *= -1.0
    return compare(f, arrays, analytic, f"red-block[{variant}]", tolerance)


def check_red_chain(seed, tolerance=1e-5, distance="cosine", corrupt=False):
    """Feature-matching loss composed after the adapter block."""
    params, f_s, rng = _draw_red_instance(seed, "full", 3)
    f_t = rng.normal(0.0, 1.0, (2, 5, 4, 4))  # different teacher channel count

    def f():
        out, _ = red_forward(params, f_s, training=True)
        loss, _ = red_loss(f_t, out, distance)
        return loss

    out, cache = red_forward(params, f_s, training=True)
    _, d_fd = red_loss(f_t, out, distance)
    d_fs, grads = red_backward(d_fd, cache)
    analytic = dict(grads)
    analytic["f_s"] = d_fs
    arrays = dict(params.arrays())
    arrays["f_s"] = f_s
    if corrupt:
        analytic["lm_w"] *= -1.0
    return compare(f, arrays, analytic, f"red-loss[{distance}]", tolerance)


def check_kd_loss(seed, tolerance=1e-5, temperature=4.0, literal_order=False,
                  corrupt=False):
    rng = np.random.default_rng([seed, 17])
    student = rng.normal(0.0, 2.0, (4, 6))
    teacher = rng.normal(0.0, 2.0, (4, 6))

    def f():
        loss, _ = kd_loss(student, teacher, temperature, literal_order=literal_order)
        return loss

    _, d = kd_loss(student, teacher, temperature, literal_order=literal_order)
    if corrupt:
        d = -d
    name = "kd-loss" + ("[literal]" if literal_order else "")
    return compare(f, {"student_logits": student}, {"student_logits": d},
                   name, tolerance)


def check_diffusion_loss(seed, tolerance=1e-5, corrupt=False):
    rng = np.random.default_rng([seed, 23])
    eps = rng.normal(0.0, 1.0, (3, 2, 4, 4))
    pred = rng.normal(0.0, 1.0, (3, 2, 4, 4))

    def f():
        loss, _ = diffusion_loss(eps, pred)
        return loss

    _, d = diffusion_loss(eps, pred)
    if corrupt:
        d = -d
    return compare(f, {"eps_pred": pred}, {"eps_pred": d}, "diffusion-loss", tolerance)


CHECKS = {
    "red-block": check_red_forward,
    "red-loss": check_red_chain,
    "kd-loss": check_kd_loss,
    "diffusion-loss": check_diffusion_loss,
}


def run_grad_checks(op, seeds, tolerance=1e-5, **kwargs):
    """GradCheckReport per seed for one op, or for all ops when op='all'."""
    names = list(CHECKS) if op == "all" else [op]
    reports = []
    for name in names:
        if name not in CHECKS:
            raise ValueError(f"unknown grad-check op {name!r}; choose from {sorted(CHECKS)} or 'all'")
        for seed in seeds:
            reports.append(CHECKS[name](seed, tolerance=tolerance, **kwargs))
    return reports
