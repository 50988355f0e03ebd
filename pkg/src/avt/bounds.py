"""Interval bound propagation over l-inf balls clipped to the [0, 1] input domain.

Intervals are carried as (lower, upper) tensors and pushed through affine
layers in center/radius form: ``mu' = W mu + b`` and ``r' = |W| r``.  The
margin bounds fold the specification matrix into the last Dense layer
before its propagation step, which is tighter than bounding the logits
first and subtracting intervals afterwards.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .groups import spec_standard
from .network import Conv2D, Dense, FixedAffine, Flatten, ReLU, fixed_affine_arrays


@dataclass
class IntervalActivations:
    """``lower[k]``/``upper[k]``: bounds after layer ``k`` (index 0 is the input box)."""
    lower: list
    upper: list


@dataclass
class MarginBounds:
    m_lower: np.ndarray
    m_upper: np.ndarray
    spec: np.ndarray
    eps: float


def input_box(x, eps):
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    return np.clip(x - eps, 0.0, 1.0), np.clip(x + eps, 0.0, 1.0)


def _affine_interval(net, i, lo, hi):
    layer, p = net.layers[i], net.params[i]
    mu = (lo + hi) * 0.5
    r = (hi - lo) * 0.5
    if isinstance(layer, Dense):
        out_mu = ad.matmul(mu, ad.transpose(p[0])) + p[1]
        out_r = ad.matmul(r, ad.transpose(ad.abs_(p[0])))
    elif isinstance(layer, Conv2D):
        out_mu = ad.conv2d(mu, p[0], p[1], layer.stride, layer.padding)
        out_r = ad.conv2d(r, ad.abs_(p[0]), None, layer.stride, layer.padding)
    else:
        scale, shift = fixed_affine_arrays(layer, lo.ndim)
        out_mu = mu * scale + shift
        out_r = r * np.abs(scale)
    return out_mu - out_r, out_mu + out_r


def _layer_interval(net, i, lo, hi):
    layer = net.layers[i]
    if isinstance(layer, (Dense, Conv2D, FixedAffine)):
        return _affine_interval(net, i, lo, hi)
    if isinstance(layer, ReLU):
        return ad.relu(lo), ad.relu(hi)
    if isinstance(layer, Flatten):
        return ad.reshape(lo, (lo.shape[0], -1)), ad.reshape(hi, (hi.shape[0], -1))
    raise TypeError(layer)


def _batch_input(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], True
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"input shape {x.shape} does not match {net.input_shape}")
    return x, False


def interval_tensors(net, x, eps, upto=None):
    """Differentiable per-layer bounds for a batch ``x``; list of (lo, hi) tensors."""
    lo, hi = input_box(x, eps)
    bounds = [(ad.Tensor(lo), ad.Tensor(hi))]
    for i in range(len(net.layers) if upto is None else upto):
        bounds.append(_layer_interval(net, i, *bounds[-1]))
    return bounds


def propagate_intervals(net, x, eps):
    xb, single = _batch_input(net, x)
    bounds = interval_tensors(net, xb, eps)
    pick = (lambda a: a[0]) if single else (lambda a: a)
    return IntervalActivations([pick(lo.data) for lo, _ in bounds],
                               [pick(hi.data) for _, hi in bounds])


def margin_tensors(net, spec, x, eps):
    """Differentiable (lower, upper) margin bounds of ``spec @ f`` over the ball.

    ``x`` is a batch [B, ...]; ``spec`` is [n, n] (shared) or [B, n, n].
    Returns two [B, n] tensors.  Rows of ``spec`` that are all zero give
    exactly zero in both bounds.
    """
    if not isinstance(net.layers[-1], Dense):
        raise ValueError("margin bounds need a Dense final layer")
    spec = np.asarray(spec, dtype=np.float64)
    n = net.n_classes
    if spec.shape[-2:] != (n, n):
        raise ValueError(f"spec must be {n}x{n}, got {spec.shape}")
    lo, hi = interval_tensors(net, x, eps, upto=len(net.layers) - 1)[-1]
    w, b = net.params[-1]
    cw = ad.matmul(spec, w)                       # [B?, n, d]
    cb = ad.matmul(spec, ad.reshape(b, (n, 1)))   # [B?, n, 1]
    mu = ad.reshape((lo + hi) * 0.5, (lo.shape[0], -1, 1))
    r = ad.reshape((hi - lo) * 0.5, (lo.shape[0], -1, 1))
    m_mu = ad.matmul(cw, mu) + cb
    m_r = ad.matmul(ad.abs_(cw), r)
    m_lo = ad.reshape(m_mu - m_r, (lo.shape[0], n))
    m_hi = ad.reshape(m_mu + m_r, (lo.shape[0], n))
    live = np.broadcast_to(np.any(spec != 0, axis=-1), m_lo.shape)
    if not live.all():
        m_lo = ad.where(live, m_lo, 0.0)
        m_hi = ad.where(live, m_hi, 0.0)
    return m_lo, m_hi


def margin_bounds(net, spec, x, eps):
    xb, single = _batch_input(net, x)
    lo, hi = margin_tensors(net, spec, xb, eps)
    if single:
        return MarginBounds(lo.data[0], hi.data[0], np.asarray(spec), eps)
    return MarginBounds(lo.data, hi.data, np.asarray(spec), eps)


def certified(m_lower, spec):
    """True where every margin at a non-zero spec row is strictly positive."""
    live = np.broadcast_to(np.any(np.asarray(spec) != 0, axis=-1), np.shape(m_lower))
    return np.all((m_lower > 0) | ~live, axis=-1)


def verify_sample(net, x, y, eps, spec=None):
    """True iff ``x`` is certified robust for ``spec`` (standard spec of ``y`` by default)."""
    if spec is None:
        spec = spec_standard(int(y), net.n_classes)
    mb = margin_bounds(net, spec, x, eps)
    return bool(certified(mb.m_lower, spec))


def certify_batch(net, x, spec, eps, batch_size=1024):
    """Certification flags for a batch; ``spec`` is [B, n, n]."""
    out = []
    for i in range(0, len(x), batch_size):
        s = spec[i:i + batch_size]
        lo, _ = margin_tensors(net, s, x[i:i + batch_size], eps)
        out.append(certified(lo.data, s))
    return np.concatenate(out) if out else np.zeros(0, dtype=bool)
