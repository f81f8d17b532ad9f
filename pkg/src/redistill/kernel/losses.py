"""Classification, distillation and denoising losses with gradients."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross entropy over the batch; returns (loss, d_logits)."""
    if logits.ndim != 2 or len(labels) != logits.shape[0]:
        raise ShapeMismatch(f"logits {logits.shape} vs {len(labels)} labels")
    n = logits.shape[0]
    p = _softmax(logits)
    idx = np.arange(n)
    loss = float(-np.log(np.maximum(p[idx, labels], 1e-30)).mean())
    d = p.copy()
    d[idx, labels] -= 1.0
    return loss, d / n


def kd_loss(student_logits, teacher_logits, temperature,
            scale_by_t_sq=True, literal_order=False):
    """Temperature-softened KL between class distributions.

    Default is KL(teacher || student) scaled by temperature^2, mean over the
    batch; literal_order=True swaps the divergence arguments, and
    scale_by_t_sq=False drops the temperature^2 factor (in which case the
    loss vanishes as the temperature grows). Returns (loss, d_student_logits).
    """
    if student_logits.shape != teacher_logits.shape:
        raise ShapeMismatch(
            f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n = student_logits.shape[0]
    t = temperature
    p_s = _softmax(student_logits / t)
    p_t = _softmax(teacher_logits / t)
    log_s = np.log(np.maximum(p_s, 1e-30))
    log_t = np.log(np.maximum(p_t, 1e-30))
    if literal_order:
        per_sample = (p_s * (log_s - log_t)).sum(axis=1)
        d = p_s * ((log_s - log_t) - per_sample[:, None]) / t
    else:
        per_sample = (p_t * (log_t - log_s)).sum(axis=1)
        d = (p_s - p_t) / t
    loss = float(per_sample.mean())
    d = d / n
    if scale_by_t_sq:
        loss *= t * t
        d = d * (t * t)
    return loss, d


def diffusion_loss(eps, eps_pred):
    """Squared L2 norm of the prediction error, mean over the batch.

    Returns (loss, d_eps_pred).
    """
    if eps.shape != eps_pred.shape:
        raise ShapeMismatch(f"shapes differ: {eps.shape} vs {eps_pred.shape}")
    n = eps.shape[0]
    diff = eps_pred - eps
    loss = float((diff * diff).sum() / n)
    return loss, 2.0 * diff / n
