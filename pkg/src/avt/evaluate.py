"""Clean, inter-/intra-group and verified error rates, confusion counts, reports.

A predictor is either a :class:`~avt.network.Network` (argmax of logits)
or an :class:`~avt.ndt.Ndt` (routing).  For networks a sample whose true
class ties for the top logit counts as an error: the decision is moved to
the lowest-index tied class other than the label.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndt as ndt_mod
from .bounds import certify_batch
from .groups import spec_batch
from .network import Network


def _check_nonempty(dataset):
    if len(dataset) == 0:
        raise ValueError("cannot compute an error rate on an empty dataset")


def decisions(predictor, dataset):
    """Predicted class per sample (ties resolved against the true label)."""
    if isinstance(predictor, ndt_mod.Ndt):
        return ndt_mod.predict(predictor, dataset.x)
    if not isinstance(predictor, Network):
        return np.asarray([predictor(x) for x in dataset.x], dtype=np.int64)
    z = predictor.logits(dataset.x) if len(dataset) else np.zeros((0, predictor.n_classes))
    pred = np.argmax(z, axis=1)
    rows = np.arange(len(z))
    top = z[rows, pred]
    tied = (z == top[:, None]).sum(axis=1) > 1
    hit = tied & (z[rows, dataset.y] == top)
    for i in np.flatnonzero(hit):
        others = np.flatnonzero(z[i] == top[i])
        pred[i] = others[others != dataset.y[i]][0]
    return pred


def clean_error(predictor, dataset):
    _check_nonempty(dataset)
    return float(np.mean(decisions(predictor, dataset) != dataset.y))


def inter_group_error(predictor, dataset, partition):
    _check_nonempty(dataset)
    gid = partition.group_array(dataset.n_classes)
    pred = decisions(predictor, dataset)
    return float(np.mean(gid[pred] != gid[dataset.y]))


def _ndt_in_group(ndt, x, y, group):
    node = ndt.root
    while not set(node.classes) <= group:
        i = node.child_index(y)
        if node.children[i] is None:
            return y
        node = node.children[i]
    return int(ndt_mod.predict_from(node, x[None])[0])


def intra_group_error(predictor, dataset, partition):
    """Error of the in-group decision: argmax over the true group's classes.

    For a tree, the sample is walked along its true path until the node's
    classes fall inside the true group, then routed normally from there.
    """
    _check_nonempty(dataset)
    gid = partition.group_array(dataset.n_classes)
    if isinstance(predictor, ndt_mod.Ndt):
        groups = [set(g) for g in partition.groups]
        pred = np.array([_ndt_in_group(predictor, x, int(y), groups[gid[y]])
                         for x, y in dataset], dtype=np.int64)
        return float(np.mean(pred != dataset.y))
    z = predictor.logits(dataset.x)
    same = gid[None, :] == gid[dataset.y][:, None]
    masked = np.where(same, z, -np.inf)
    rows = np.arange(len(z))
    best = masked.max(axis=1)
    ties = (masked == best[:, None]).sum(axis=1) > 1
    wrong = (masked[rows, dataset.y] < best) | ties
    return float(np.mean(wrong))


def _verified(net, dataset, eps, kind, partition=None):
    _check_nonempty(dataset)
    specs = spec_batch(dataset.y, net.n_classes, partition, kind)
    return float(np.mean(~certify_batch(net, dataset.x, specs, eps)))


def _root_matches(ndt, partition):
    return {frozenset(g) for g in partition.groups} == \
        {frozenset(g) for g in ndt.root.child_groups}


def verified_inter_group_error(predictor, dataset, partition, eps):
    """Share of samples not certified against every class outside the true group.

    Trees are certified at their root, which must split along ``partition``.
    """
    if isinstance(predictor, ndt_mod.Ndt):
        if not _root_matches(predictor, partition):
            raise ValueError("partition does not match the tree's root split")
        _check_nonempty(dataset)
        return float(np.mean(~ndt_mod.certify_root_batch(predictor, dataset.x, dataset.y, eps)))
    return _verified(predictor, dataset, eps, "outer", partition)


def verified_intra_group_error(net, dataset, partition, eps_inner):
    if isinstance(net, ndt_mod.Ndt):
        raise TypeError("verified intra-group error is defined for flat networks only")
    return _verified(net, dataset, eps_inner, "inner", partition)


def verified_error(net, dataset, eps):
    if isinstance(net, ndt_mod.Ndt):
        raise TypeError("verified error is defined for flat networks only")
    return _verified(net, dataset, eps, "standard")


def confusion(predictor, dataset):
    """counts[true][predicted]."""
    n = dataset.n_classes
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (dataset.y, decisions(predictor, dataset)), 1)
    return counts


# -- reports --------------------------------------------------------------

COLUMNS = [("clean_error", "Error"),
           ("inter_group_error", "Inter-Group Error"),
           ("verified_inter_group_error", "Verified Inter-Group Error"),
           ("intra_group_error", "Intra-Group Error"),
           ("verified_intra_group_error", "Verified Intra-Group Error"),
           ("verified_error", "Verified Error")]


@dataclass
class MetricsReport:
    clean_error: float
    inter_group_error: float
    verified_inter_group_error: float
    intra_group_error: float
    verified_intra_group_error: float = None
    verified_error: float = None
    confusion: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def format_table(reports, labels=None):
    """Aligned text table, one row per report, rates in percent."""
    labels = labels or [r.metadata.get("model", "") for r in reports]
    head = ["Model", "eps"] + [title for _, title in COLUMNS]
    rows = []
    for label, r in zip(labels, reports):
        cells = [str(label), f"{r.metadata.get('eps', 0):.4g}"]
        for key, _ in COLUMNS:
            v = getattr(r, key)
            cells.append("n/a" if v is None else f"{100 * v:.2f}%")
        rows.append(cells)
    widths = [max(len(row[i]) for row in [head] + rows) for i in range(len(head))]
    fmt = lambda row: "  ".join(c.rjust(w) for c, w in zip(row, widths))
    return "\n".join([fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows])


def evaluate(predictor, dataset, partition, eps, eps_inner=None, metadata=None):
    """All metrics at one eps (``eps_inner`` defaults to ``eps``)."""
    eps_inner = eps if eps_inner is None else eps_inner
    flat = not isinstance(predictor, ndt_mod.Ndt)
    meta = {"eps": eps, "eps_inner": eps_inner, "partition": partition.to_json()["groups"],
            "dataset": dataset.name, "n_samples": len(dataset)}
    meta.update(metadata or {})
    return MetricsReport(
        clean_error=clean_error(predictor, dataset),
        inter_group_error=inter_group_error(predictor, dataset, partition),
        verified_inter_group_error=verified_inter_group_error(predictor, dataset, partition, eps),
        intra_group_error=intra_group_error(predictor, dataset, partition),
        verified_intra_group_error=(verified_intra_group_error(predictor, dataset, partition,
                                                               eps_inner) if flat else None),
        verified_error=verified_error(predictor, dataset, eps) if flat else None,
        confusion=confusion(predictor, dataset).tolist(),
        metadata=meta)
