"""Tempered softmax and the cross-entropy family of distillation losses.

Every loss returns a :class:`LossValue` holding the batch-mean scalar and its
gradient with respect to the student logits. Expert logits are treated as
constants: no gradient ever flows into them.
"""
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, DomainError

LOG_EPS = 1e-12


@dataclass(frozen=True)
class KDHyperparams:
    temperature: float = 10.0
    alpha: float = 0.9

    def __post_init__(self):
        if not self.temperature > 0:
            raise DomainError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class LossValue:
    value: float
    grad: np.ndarray


def tempered_softmax(z, T=1.0):
    """Row-wise ``softmax(z / T)`` with max subtraction."""
    if not T > 0:
        raise DomainError(f"temperature must be > 0, got {T}")
    z = np.asarray(z)
    s = z / T
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _log(p):
    return np.log(np.maximum(p, LOG_EPS))


def cross_entropy_soft(p_target, p_pred):
    """Mean over rows of ``-sum(p_target * log(p_pred))``.

    The gradient is taken with respect to ``p_pred``.
    """
    p_target, p_pred = np.asarray(p_target), np.asarray(p_pred)
    if p_target.shape != p_pred.shape:
        raise ConfigurationError(f"shape mismatch: {p_target.shape} vs {p_pred.shape}")
    n = p_pred.shape[0]
    value = float(-(p_target * _log(p_pred)).sum() / n)
    grad = np.where(p_pred > LOG_EPS, -p_target / np.maximum(p_pred, LOG_EPS), 0.0) / n
    return LossValue(value, grad.astype(p_pred.dtype, copy=False))


def one_hot(labels, n_classes, dtype=np.float64):
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def _as_one_hot(labels, like):
    labels = np.asarray(labels)
    if labels.ndim == 1:
        return one_hot(labels, like.shape[1], dtype=like.dtype)
    if labels.shape != like.shape:
        raise ConfigurationError(f"label shape {labels.shape} does not match logits {like.shape}")
    return labels.astype(like.dtype, copy=False)


def per_sample_cross_entropy(logits, labels):
    """Hard-label cross-entropy of each row at ``T = 1`` (no averaging)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    p = tempered_softmax(logits, 1.0)
    return -_log(p[np.arange(len(labels)), labels])


def cross_entropy(z_s, labels):
    """Mean hard-label cross-entropy of student logits, ``T = 1``."""
    z_s = np.asarray(z_s)
    y = _as_one_hot(labels, z_s)
    p = tempered_softmax(z_s, 1.0)
    n = z_s.shape[0]
    value = float(-(y * _log(p)).sum() / n)
    return LossValue(value, (p - y) / n)


def kd_select_loss(z_s, z_l, T):
    """Soft cross-entropy from the selected expert to the student at temperature ``T``.

    Target is ``softmax(z_l / T)``, prediction ``softmax(z_s / T)``. The
    gradient w.r.t. ``z_s`` is ``(p_s - p_l) / (T * n)``.
    """
    z_s, z_l = np.asarray(z_s), np.asarray(z_l)
    if z_s.shape != z_l.shape:
        raise ConfigurationError(f"student logits {z_s.shape} vs expert logits {z_l.shape}")
    p_l = tempered_softmax(z_l, T)
    p_s = tempered_softmax(z_s, T)
    n = z_s.shape[0]
    value = float(-(p_l * _log(p_s)).sum() / n)
    grad = (p_s - p_l) / (T * n)
    return LossValue(value, grad.astype(z_s.dtype, copy=False))


def _combine(kd, ce, hp):
    w = hp.alpha * hp.temperature ** 2
    value = w * kd.value + (1.0 - hp.alpha) * ce.value
    grad = w * kd.grad + (1.0 - hp.alpha) * ce.grad
    return LossValue(float(value), grad)


def ceskd_total_loss(z_s, z_expert, labels, hp: KDHyperparams):
    """``alpha * T**2 * KD(expert -> student) + (1 - alpha) * CE(labels, student)``."""
    kd = kd_select_loss(z_s, z_expert, hp.temperature)
    ce = cross_entropy(z_s, labels)
    return _combine(kd, ce, hp)


def ensemble_kd_loss(z_s, ancestor_logits, labels, hp: KDHyperparams):
    """Like :func:`ceskd_total_loss` with the KD term averaged over all ancestors."""
    ancestor_logits = list(ancestor_logits)
    if not ancestor_logits:
        raise ConfigurationError("ensemble_kd_loss needs at least one ancestor")
    terms = [kd_select_loss(z_s, z, hp.temperature) for z in ancestor_logits]
    m = len(terms)
    value = terms[0].value
    grad = terms[0].grad.copy()
    for t in terms[1:]:
        value += t.value
        grad += t.grad
    kd = LossValue(value / m, grad / m)
    ce = cross_entropy(z_s, labels)
    return _combine(kd, ce, hp)
