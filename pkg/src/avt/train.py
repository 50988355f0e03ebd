"""Verifiable training: natural, robust (IBP) and inter-group (IGRP) objectives."""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .bounds import margin_tensors
from .data import batches
from .groups import GroupPartition, row_masks, spec_batch

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


# -- configuration --------------------------------------------------------

@dataclass
class Optimizer:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


@dataclass
class LossMode:
    """``natural``, ``robust`` (one eps) or ``igrp`` (outer/inner eps over a partition).

    ``terms`` optionally lists extra ``(kind, partition, eps)`` IGRP terms
    with kind ``"outer"`` or ``"inner"``; when given they replace the
    default outer+inner pair.
    """
    kind: str = "natural"
    eps: float = 0.0
    eps_outer: float = 0.0
    eps_inner: float = 0.0
    ubs: bool = False
    terms: list = None

    def __post_init__(self):
        if self.kind not in ("natural", "robust", "igrp"):
            raise ValueError(f"unknown loss mode {self.kind!r}")
        for v in (self.eps, self.eps_outer, self.eps_inner):
            if v < 0:
                raise ValueError("eps values must be >= 0")
        if self.kind == "igrp" and self.eps_inner > self.eps_outer:
            raise ValueError("eps_inner must not exceed eps_outer")


@dataclass
class Schedule:
    natural_warmup_epochs: int = 5
    ramp_epochs: int = None
    kappa_start: float = 1.0
    kappa_end: float = 0.5

    def __post_init__(self):
        for k in (self.kappa_start, self.kappa_end):
            if not 0.0 <= k <= 1.0:
                raise ValueError("kappa must lie in [0, 1]")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    optimizer: Optimizer = field(default_factory=Optimizer)
    loss: LossMode = field(default_factory=LossMode)
    partition: GroupPartition = None
    schedule: Schedule = field(default_factory=Schedule)
    balance_classes: bool = False

    def __post_init__(self):
        if self.loss.kind == "igrp" and self.partition is None and not self.loss.terms:
            raise ValueError("igrp training needs a partition")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def resolved_schedule(self):
        """Fill the default ramp: 40% of the epochs left after warmup.

        Warmup is capped at a quarter of the run so short runs still train
        robustly.
        """
        s = self.schedule
        warm = min(s.natural_warmup_epochs, self.epochs // 4)
        ramp = s.ramp_epochs
        if ramp is None:
            ramp = max(1, math.ceil(0.4 * (self.epochs - warm)))
        return replace(s, natural_warmup_epochs=warm, ramp_epochs=max(1, ramp))

    def to_json(self):
        doc = {"epochs": self.epochs, "batch_size": self.batch_size, "seed": self.seed,
               "optimizer": asdict(self.optimizer),
               "loss": {k: v for k, v in asdict(self.loss).items() if k != "terms"},
               "schedule": asdict(self.schedule),
               "balance_classes": self.balance_classes}
        if self.loss.terms:
            doc["loss"]["terms"] = [{"kind": k, "groups": p.to_json()["groups"], "eps": e}
                                    for k, p, e in self.loss.terms]
        if self.partition is not None:
            doc["partition"] = self.partition.to_json()
        return doc

    @classmethod
    def from_json(cls, doc):
        loss = dict(doc.get("loss", {}))
        if "terms" in loss:
            loss["terms"] = [(t["kind"], GroupPartition(tuple(map(tuple, t["groups"]))), t["eps"])
                             for t in loss["terms"]]
        part = doc.get("partition")
        return cls(epochs=doc.get("epochs", 20), batch_size=doc.get("batch_size", 64),
                   seed=doc.get("seed", 0), optimizer=Optimizer(**doc.get("optimizer", {})),
                   loss=LossMode(**loss),
                   partition=GroupPartition.from_json(part) if part is not None else None,
                   schedule=Schedule(**doc.get("schedule", {})),
                   balance_classes=doc.get("balance_classes", False))


@dataclass
class ScheduleState:
    eps_mult: float
    kappa: float


def schedule_state(schedule, epoch):
    """Eps multiplier 0 during warmup, linear to 1 over the ramp, then 1."""
    warm, ramp = schedule.natural_warmup_epochs, schedule.ramp_epochs
    if epoch < warm:
        mult = 0.0
    else:
        mult = min(1.0, (epoch - warm + 1) / ramp)
    kappa = schedule.kappa_start + (schedule.kappa_end - schedule.kappa_start) * mult
    return ScheduleState(mult, kappa)


# -- losses ---------------------------------------------------------------

def _batch(net, x, y):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x[None], np.atleast_1d(np.asarray(y, dtype=np.int64))
    return x, np.asarray(y, dtype=np.int64)


def _reduce(per_sample, weights):
    if weights is None:
        return ad.mean(per_sample)
    w = np.asarray(weights, dtype=np.float64)
    return ad.sum_(per_sample * (w / w.sum()))


def natural_loss(net, x, y, weights=None):
    x, y = _batch(net, x, y)
    return _reduce(ad.softmax_cross_entropy(net.forward(x), y), weights)


def robust_terms(net, x, y, eps):
    """Per-sample CE(-m_lower) with the standard spec at ``eps``."""
    x, y = _batch(net, x, y)
    m_lo, _ = _standard_margins(net, x, y, eps)
    return ad.softmax_cross_entropy(-m_lo, y)


def robust_loss(net, x, y, eps, weights=None):
    """Cross-entropy on the negated worst-case margins, batch mean."""
    return _reduce(robust_terms(net, x, y, eps), weights)


def _standard_margins(net, x, y, eps):
    return margin_tensors(net, spec_batch(y, net.n_classes), x, eps)


def igrp_terms(net, x, y, terms, ubs=False):
    """Per-sample sum over ``(kind, partition, eps)`` terms of CE(-v).

    ``v`` holds the worst-case margins on the term's active rows and zero
    elsewhere; with ``ubs`` the inactive off-label rows carry the best-case
    margins at the same eps instead of zero.  One interval propagation is
    shared by all terms with equal eps.
    """
    x, y = _batch(net, x, y)
    n = net.n_classes
    cache = {}
    total = None
    for kind, partition, eps in terms:
        if partition.n_classes != n:
            raise ValueError(f"partition covers {partition.n_classes} classes, network has {n}")
        if eps not in cache:
            cache[eps] = _standard_margins(net, x, y, eps)
        if kind not in ("outer", "inner"):
            raise ValueError(f"unknown IGRP term kind {kind!r}")
        m_lo, m_hi = cache[eps]
        standard, outer, inner = row_masks(y, partition, n)
        active = outer if kind == "outer" else inner
        if ubs:
            v = ad.where(active, m_lo, ad.where(standard & ~active, m_hi, 0.0))
        else:
            v = ad.where(active, m_lo, 0.0)
        term = ad.softmax_cross_entropy(-v, y)
        total = term if total is None else total + term
    return total


def igrp_loss(net, x, y, partition, eps_outer, eps_inner, ubs=False, weights=None):
    terms = [("outer", partition, eps_outer), ("inner", partition, eps_inner)]
    return _reduce(igrp_terms(net, x, y, terms, ubs), weights)


def _mode_terms(mode, partition):
    if mode.terms:
        return list(mode.terms)
    return [("outer", partition, mode.eps_outer), ("inner", partition, mode.eps_inner)]


def mixed_objective(net, batch, state, config, weights=None):
    """kappa * natural CE + (1 - kappa) * robust term with eps scaled by the schedule."""
    x, y = _batch(net, *batch)
    mode = config.loss
    nat = natural_loss(net, x, y, weights)
    if mode.kind == "natural" or state.kappa == 1.0:
        return nat
    if mode.kind == "robust":
        rob = robust_loss(net, x, y, mode.eps * state.eps_mult, weights)
    else:
        terms = [(k, p, e * state.eps_mult) for k, p, e in _mode_terms(mode, config.partition)]
        rob = _reduce(igrp_terms(net, x, y, terms, mode.ubs), weights)
    if state.kappa == 0.0:
        return rob
    return nat * state.kappa + rob * (1.0 - state.kappa)


# -- optimizers -----------------------------------------------------------

class _Adam:
    def __init__(self, params, cfg):
        self.params, self.cfg, self.t = params, cfg, 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads):
        c = self.cfg
        self.t += 1
        b1t, b2t = 1 - c.beta1 ** self.t, 1 - c.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p.data -= c.lr * (m / b1t) / (np.sqrt(v / b2t) + c.eps)


class _SGD:
    def __init__(self, params, cfg):
        self.params, self.cfg = params, cfg
        self.buf = [np.zeros_like(p.data) for p in params]

    def step(self, grads):
        for p, g, b in zip(self.params, grads, self.buf):
            b *= self.cfg.momentum
            b += g
            p.data -= self.cfg.lr * b


def make_optimizer(params, cfg):
    return (_Adam if cfg.kind == "adam" else _SGD)(params, cfg)


def class_weights(y, n_classes):
    """Inverse-frequency weight per sample (classes absent from ``y`` ignored)."""
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    return len(y) / (np.count_nonzero(counts) * counts[y])


def train(net, dataset, config, on_epoch=None):
    """Optimize a copy of ``net``; returns (trained network, per-epoch history)."""
    if dataset.n_classes != net.n_classes:
        raise ValueError(f"dataset has {dataset.n_classes} classes, network {net.n_classes}")
    if config.loss.kind == "igrp" and config.partition is not None:
        config.partition.check_covers(net.n_classes)
    net = net.copy()
    params = net.parameters()
    opt = make_optimizer(params, config.optimizer)
    schedule = config.resolved_schedule()
    history = []
    for epoch in range(config.epochs):
        state = schedule_state(schedule, epoch)
        total, count = 0.0, 0
        for b, (xb, yb) in enumerate(batches(dataset, config.batch_size, config.seed, epoch)):
            w = class_weights(yb, net.n_classes) if config.balance_classes else None
            loss = mixed_objective(net, (xb, yb), state, config, w)
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss {float(loss.data)} at epoch {epoch}, "
                                     f"batch {b} (eps multiplier {state.eps_mult}, "
                                     f"kappa {state.kappa})")
            grads = ad.backward(loss, params)
            opt.step(grads)
            total += float(loss.data) * len(yb)
            count += len(yb)
        preds = net.predict(dataset.x) if len(dataset) else np.zeros(0)
        record = {"epoch": epoch,
                  "loss": total / max(count, 1),
                  "clean_error": float(np.mean(preds != dataset.y)) if len(dataset) else 0.0,
                  "eps_mult": state.eps_mult,
                  "kappa": state.kappa}
        history.append(record)
        log.info("epoch %d loss %.5f err %.4f eps_mult %.3f kappa %.3f", epoch,
                 record["loss"], record["clean_error"], state.eps_mult, state.kappa)
        if on_epoch is not None:
            on_epoch(record)
    return net, history


def write_history(history, path):
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
