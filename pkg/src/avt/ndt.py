"""Neural decision trees built from a class dendrogram.

Each internal node is a classifier choosing among its child groups; a child
holding a single class is a terminal leaf.  Variants:

* ``full``: every node a robust binary classifier at one eps;
* ``mixed``: only the root is robust, every other node natural;
* ``truncated:<d>``: robust binary nodes above depth ``d``; each subtree
  rooted at depth ``d`` is collapsed into one natural multi-way classifier
  over its classes.
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import network as nw
from .bounds import certify_batch, verify_sample
from .data import Dataset
from .groups import ClusterTree, spec_batch, spec_standard
from .train import LossMode, train


@dataclass(frozen=True)
class Variant:
    kind: str
    max_depth: int = None

    def __post_init__(self):
        if self.kind not in ("full", "mixed", "truncated"):
            raise ValueError(f"unknown NDT variant {self.kind!r}")
        if self.kind == "truncated" and (self.max_depth is None or self.max_depth < 1):
            raise ValueError("truncated variant needs max_depth >= 1")

    @classmethod
    def parse(cls, text):
        if isinstance(text, Variant):
            return text
        kind, _, depth = str(text).partition(":")
        kind = {"truncated-mixed": "truncated"}.get(kind, kind)
        return cls(kind, int(depth) if depth else None)

    def __str__(self):
        return self.kind if self.max_depth is None else f"{self.kind}:{self.max_depth}"


@dataclass
class NdtNode:
    classes: tuple
    child_groups: list
    children: list          # NdtNode, or None for a singleton leaf
    eps: float
    depth: int
    key: str                # path from the root, e.g. "r", "r0", "r01"
    net: object = None

    @property
    def robust(self):
        return self.eps > 0

    def walk(self):
        """Pre-order traversal."""
        yield self
        for c in self.children:
            if c is not None:
                yield from c.walk()

    def child_index(self, cls):
        for i, g in enumerate(self.child_groups):
            if cls in g:
                return i
        raise ValueError(f"class {cls} is not under node {self.key}")


@dataclass
class Ndt:
    root: NdtNode
    variant: Variant
    tree: ClusterTree
    eps_table: list
    arch: list
    input_shape: tuple = None
    meta: dict = field(default_factory=dict)

    def nodes(self):
        return list(self.root.walk())

    def node(self, key):
        for n in self.root.walk():
            if n.key == key:
                return n
        raise KeyError(key)

    @property
    def depth(self):
        return max(n.depth for n in self.root.walk()) + 1

    @property
    def n_classes(self):
        return len(self.root.classes)

    @property
    def trained(self):
        return all(n.net is not None for n in self.root.walk())

    def root_group(self, y):
        return self.root.child_index(int(y))


def _eps_at(eps_table, depth):
    return eps_table[min(depth, len(eps_table) - 1)]


def _build(tree, tnode, variant, eps_table, depth, key):
    if variant.kind == "truncated" and depth >= variant.max_depth:
        classes = tree.classes(tnode)
        return NdtNode(classes, [(c,) for c in classes], [None] * len(classes), 0.0, depth, key)
    if variant.kind == "full":
        eps = eps_table[0]
    elif variant.kind == "mixed":
        eps = eps_table[0] if depth == 0 else 0.0
    else:
        eps = _eps_at(eps_table, depth)
    groups, children = [], []
    for i, child in enumerate(tree.children(tnode)):
        groups.append(tree.classes(child))
        children.append(None if tree.is_leaf(child)
                        else _build(tree, child, variant, eps_table, depth + 1, key + str(i)))
    return NdtNode(tree.classes(tnode), groups, children, eps, depth, key)


def build_plan(tree, variant, eps_table, arch, input_shape=None):
    """Untrained tree of nodes mirroring ``tree`` under ``variant``.

    ``eps_table[d]`` is the eps for depth ``d`` (the last entry extends to
    deeper levels) and must be non-increasing.  ``arch`` is a layer list
    whose final Dense width is replaced by each node's child count.
    """
    variant = Variant.parse(variant)
    eps_table = [float(e) for e in np.atleast_1d(eps_table)]
    if not eps_table or any(e < 0 for e in eps_table):
        raise ValueError("eps_table needs non-negative entries")
    if any(b > a for a, b in zip(eps_table, eps_table[1:])):
        raise ValueError(f"eps_table {eps_table} violates parent >= child robustness")
    if variant.kind == "full" and len(set(eps_table)) > 1:
        raise ValueError("a full NDT uses one eps for every node")
    if tree.n_classes < 2:
        raise ValueError("need at least two classes")
    root = _build(tree, tree.root, variant, eps_table, 0, "r")
    return Ndt(root, variant, tree, eps_table, list(arch), input_shape)


def node_dataset(node, dataset):
    """Samples whose label lies under ``node``, labels remapped to child indices."""
    lut = np.full(dataset.n_classes, -1, dtype=np.int64)
    for i, g in enumerate(node.child_groups):
        lut[list(g)] = i
    mask = lut[dataset.y] >= 0
    return Dataset(dataset.x[mask], lut[dataset.y[mask]], len(node.child_groups),
                   f"{dataset.name}/{node.key}")


def _node_seed(base_seed, key):
    # keyed by tree position so equal nodes of different variants train identically
    return int(np.random.SeedSequence([base_seed, *key.encode()]).generate_state(1)[0])


def train_node(node, dataset, base_config, arch, input_shape, finetune_base=None,
               balance=None):
    """Train ``node`` in place; returns its history."""
    sub = node_dataset(node, dataset)
    if len(sub) == 0:
        raise ValueError(f"NDT node {node.key} (classes {list(node.classes)}) has no samples")
    k = len(node.child_groups)
    seed = _node_seed(base_config.seed, node.key)
    if finetune_base is not None:
        net = nw.clone_for_head(finetune_base, k, seed=seed)
    else:
        net = nw.init(nw.with_output_dim(arch, k), seed, input_shape)
    loss = LossMode("robust", eps=node.eps) if node.robust else LossMode("natural")
    cfg = replace(base_config, loss=loss, partition=None, seed=seed,
                  balance_classes=base_config.balance_classes if balance is None else balance)
    node.net, history = train(net, sub, cfg)
    return history


def train_ndt(plan, dataset, base_config, finetune_base=None, threads=1, reuse=None):
    """Train every node of ``plan`` (pre-order); returns the plan with nets filled in.

    ``reuse`` maps node keys to already-trained networks that are kept as-is
    (used to share a trained root across truncation depths).
    """
    missing = set(plan.root.classes) - set(np.unique(dataset.y).tolist())
    if missing:
        raise ValueError(f"dataset has no samples for classes {sorted(missing)}")
    reuse = reuse or {}
    jobs = []
    for node in plan.root.walk():
        if node.key in reuse:
            node.net = reuse[node.key]
        else:
            jobs.append(node)
    run = lambda node: train_node(node, dataset, base_config, plan.arch, plan.input_shape,
                                  finetune_base)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            histories = list(pool.map(run, jobs))
    else:
        histories = [run(j) for j in jobs]
    plan.meta["history"] = {node.key: h for node, h in zip(jobs, histories)}
    return plan


def truncate(ndt, max_depth, dataset, base_config, finetune_base=None):
    """Truncated-mixed copy of a trained tree at ``max_depth``.

    Nodes whose position, child groups and eps agree with the source tree
    keep their trained networks (in particular the root); the rest are
    trained afresh.
    """
    plan = build_plan(ndt.tree, Variant("truncated", max_depth), ndt.eps_table, ndt.arch,
                      ndt.input_shape)
    old = {n.key: n for n in ndt.root.walk()}
    keep = {}
    for n in plan.root.walk():
        src = old.get(n.key)
        if src is not None and src.child_groups == n.child_groups and src.eps == n.eps:
            keep[n.key] = src.net
    return train_ndt(plan, dataset, base_config, finetune_base, reuse=keep)


# -- inference ------------------------------------------------------------

def _route(node, x, out, idx):
    choice = np.argmax(node.net.logits(x), axis=-1)   # lowest index wins ties
    for i, child in enumerate(node.children):
        sel = choice == i
        if not sel.any():
            continue
        if child is None:
            out[idx[sel]] = node.child_groups[i][0]
        else:
            _route(child, x[sel], out, idx[sel])


def predict(ndt, x):
    """Class for one input, or an array of classes for a batch."""
    x = np.asarray(x, dtype=np.float64)
    shape = ndt.input_shape or ndt.root.net.input_shape
    single = x.shape == tuple(shape)
    xb = x[None] if single else x
    out = np.full(len(xb), -1, dtype=np.int64)
    if len(xb):
        _route(ndt.root, xb, out, np.arange(len(xb)))
    return int(out[0]) if single else out


def predict_from(node, x):
    """Route a batch starting at ``node`` instead of the root."""
    out = np.full(len(x), -1, dtype=np.int64)
    if len(x):
        _route(node, np.asarray(x, dtype=np.float64), out, np.arange(len(x)))
    return out


def certify_root(ndt, x, true_group, eps):
    """Certify the root's decision for ``true_group`` over the eps ball."""
    net = ndt.root.net
    if net.n_classes != 2:
        raise ValueError("root certification needs a binary root")
    return verify_sample(net, x, true_group, eps, spec_standard(int(true_group), 2))


def certify_root_batch(ndt, x, y, eps):
    """Root certification flags for a batch with class labels ``y``."""
    if ndt.root.net.n_classes != 2:
        raise ValueError("root certification needs a binary root")
    groups = np.array([ndt.root_group(c) for c in y], dtype=np.int64)
    return certify_batch(ndt.root.net, np.asarray(x, dtype=np.float64),
                         spec_batch(groups, 2), eps)


# -- files ----------------------------------------------------------------

def save_ndt(ndt, directory):
    """Write ``manifest.json`` plus one model file per node into ``directory``."""
    os.makedirs(directory, exist_ok=True)

    def node_doc(node):
        fname = f"node_{node.key}.json"
        nw.save(node.net, os.path.join(directory, fname))
        return {"key": node.key, "classes": list(node.classes),
                "child_groups": [list(g) for g in node.child_groups],
                "eps": node.eps, "depth": node.depth, "model": fname,
                "children": [None if c is None else node_doc(c) for c in node.children]}

    doc = {"format_version": 1, "variant": str(ndt.variant), "eps_table": ndt.eps_table,
           "input_shape": list(ndt.input_shape) if ndt.input_shape else None,
           "arch": [nw.layer_to_json(l) for l in ndt.arch],
           "tree": ndt.tree.to_json(), "root": node_doc(ndt.root)}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_ndt(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        doc = json.load(fh)

    def node_from(d):
        children = [None if c is None else node_from(c) for c in d["children"]]
        node = NdtNode(tuple(d["classes"]), [tuple(g) for g in d["child_groups"]], children,
                       float(d["eps"]), int(d["depth"]), d["key"])
        node.net = nw.load(os.path.join(directory, d["model"]))
        if node.net.n_classes != len(node.child_groups):
            raise ValueError(f"node {node.key}: model has {node.net.n_classes} outputs for "
                             f"{len(node.child_groups)} child groups")
        return node

    shape = tuple(doc["input_shape"]) if doc.get("input_shape") else None
    return Ndt(node_from(doc["root"]), Variant.parse(doc["variant"]),
               ClusterTree.from_json(doc["tree"]), doc["eps_table"],
               [nw.layer_from_json(l) for l in doc["arch"]], shape)


def is_ndt_dir(path):
    return os.path.isdir(path) and os.path.exists(os.path.join(path, "manifest.json"))
