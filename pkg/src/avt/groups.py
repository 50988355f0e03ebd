"""Class-similarity clustering, group partitions and specification matrices.

Specification matrices are plain float arrays of shape [n, n]: row ``i``
holds +1 at the true label and -1 at ``i``, so ``C @ logits`` is the vector
of margins ``f_y - f_i``.  Rows that are switched off are all zero.
"""

import json
from dataclasses import dataclass, field

import numpy as np

TIE_RTOL = 1e-12


@dataclass(frozen=True)
class GroupPartition:
    groups: tuple
    n_classes: int = field(init=False)

    def __post_init__(self):
        groups = tuple(tuple(sorted(int(c) for c in g)) for g in self.groups)
        if not groups or any(len(g) == 0 for g in groups):
            raise ValueError("a partition needs at least one non-empty group")
        flat = [c for g in groups for c in g]
        if len(flat) != len(set(flat)):
            raise ValueError("groups overlap")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "n_classes", len(flat))

    @classmethod
    def from_labels(cls, group_of):
        """Build from a sequence mapping class index -> group id."""
        ids = sorted(set(group_of))
        return cls(tuple(tuple(c for c, g in enumerate(group_of) if g == gid) for gid in ids))

    @property
    def n_groups(self):
        return len(self.groups)

    @property
    def classes(self):
        return tuple(sorted(c for g in self.groups for c in g))

    @property
    def group_of(self):
        return {c: gi for gi, g in enumerate(self.groups) for c in g}

    def group_array(self, n_classes=None):
        """``a[c]`` = group id of class ``c``; requires classes 0..n-1 all covered."""
        n = self.n_classes if n_classes is None else n_classes
        self.check_covers(n)
        out = np.empty(n, dtype=np.int64)
        for c, gi in self.group_of.items():
            out[c] = gi
        return out

    def check_covers(self, n_classes):
        if self.classes != tuple(range(n_classes)):
            raise ValueError(f"partition covers classes {list(self.classes)}, "
                             f"expected 0..{n_classes - 1}")

    def to_json(self):
        return {"groups": [list(g) for g in self.groups]}

    @classmethod
    def from_json(cls, doc):
        if isinstance(doc, str):
            with open(doc) as fh:
                doc = json.load(fh)
        if "groups" in doc:
            return cls(tuple(tuple(g) for g in doc["groups"]))
        if "group_of" in doc:
            return cls.from_labels(doc["group_of"])
        raise ValueError("partition document needs 'groups' or 'group_of'")


# -- clustering -----------------------------------------------------------

@dataclass
class ClusterTree:
    """Binary dendrogram in merge order.

    Leaves are ids ``0..n-1``; merge ``k`` creates node ``n + k`` from
    ``merges[k] = (left, right, distance)`` where ``left`` is the child
    holding the smaller class index.  The root is node ``2n - 2``.
    """

    n_classes: int
    merges: list
    linkage: str = "average"

    @property
    def root(self):
        return 2 * self.n_classes - 2

    def is_leaf(self, node):
        return node < self.n_classes

    def children(self, node):
        if self.is_leaf(node):
            raise ValueError(f"node {node} is a leaf")
        left, right, _ = self.merges[node - self.n_classes]
        return left, right

    def distance(self, node):
        return 0.0 if self.is_leaf(node) else self.merges[node - self.n_classes][2]

    def classes(self, node):
        if self.is_leaf(node):
            return (node,)
        left, right = self.children(node)
        return tuple(sorted(self.classes(left) + self.classes(right)))

    def node_for(self, classes):
        target = tuple(sorted(classes))
        for node in range(2 * self.n_classes - 1):
            if self.classes(node) == target:
                return node
        raise KeyError(f"no dendrogram node covers exactly {list(target)}")

    def depth(self, node=None):
        """Number of internal nodes on the longest path from ``node`` to a leaf."""
        node = self.root if node is None else node
        if self.is_leaf(node):
            return 0
        return 1 + max(self.depth(c) for c in self.children(node))

    def nested(self, node=None):
        node = self.root if node is None else node
        if self.is_leaf(node):
            return node
        return [self.nested(c) for c in self.children(node)]

    def to_json(self):
        merges = [{"left": int(l), "right": int(r), "distance": float(d),
                   "classes": list(self.classes(self.n_classes + k))}
                  for k, (l, r, d) in enumerate(self.merges)]
        return {"n_classes": self.n_classes, "linkage": self.linkage,
                "merges": merges, "nested": self.nested()}

    @classmethod
    def from_json(cls, doc):
        if isinstance(doc, str):
            with open(doc) as fh:
                doc = json.load(fh)
        n = int(doc["n_classes"])
        merges = [(int(m["left"]), int(m["right"]), float(m["distance"])) for m in doc["merges"]]
        if len(merges) != n - 1:
            raise ValueError(f"{n} classes need {n - 1} merges, got {len(merges)}")
        tree = cls(n, merges, doc.get("linkage", "average"))
        if tree.classes(tree.root) != tuple(range(n)):
            raise ValueError("dendrogram root does not cover every class")
        return tree

    def render(self, names=None, node=None, indent=""):
        """Indented text dendrogram."""
        node = self.root if node is None else node
        label = (lambda c: names[c] if names else str(c))
        if self.is_leaf(node):
            return f"{indent}{label(node)}\n"
        out = f"{indent}+ {self.distance(node):.6g}  [{', '.join(label(c) for c in self.classes(node))}]\n"
        for c in self.children(node):
            out += self.render(names, c, indent + "  ")
        return out


def _pick_pair(dist, active, mins):
    """Closest pair; near-ties go to the lexicographically smallest (min, min) key."""
    best = None
    for ai, a in enumerate(active):
        for b in active[ai + 1:]:
            d = dist[a][b]
            key = tuple(sorted((mins[a], mins[b])))
            if best is None:
                best = (d, key, a, b)
                continue
            tol = TIE_RTOL * max(1.0, abs(best[0]), abs(d))
            if d < best[0] - tol or (abs(d - best[0]) <= tol and key < best[1]):
                best = (d, key, a, b)
    return best


def agglomerative_cluster(class_weights, linkage="average"):
    """Dendrogram of the rows of ``class_weights`` under Euclidean distance.

    ``linkage`` is ``"average"`` (mean pairwise distance) or ``"ward"``
    (Lance-Williams Ward update on Euclidean distances).
    """
    w = np.asarray(class_weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 2:
        raise ValueError("need a weight matrix with at least two class rows")
    if linkage not in ("average", "ward"):
        raise ValueError(f"unsupported linkage {linkage!r}")
    n = w.shape[0]
    point = np.sqrt(((w[:, None, :] - w[None, :, :]) ** 2).sum(-1))
    # dist[a][b]: current linkage distance between clusters a and b
    dist = {a: {} for a in range(n)}
    for a in range(n):
        for b in range(n):
            if a != b:
                dist[a][b] = point[a, b]
    total = {a: {b: point[a, b] for b in range(n) if b != a} for a in range(n)}
    size = {a: 1 for a in range(n)}
    mins = {a: a for a in range(n)}
    active = list(range(n))
    merges = []
    for k in range(n - 1):
        d, _, a, b = _pick_pair(dist, active, mins)
        if mins[b] < mins[a]:
            a, b = b, a
        new = n + k
        merges.append((a, b, float(d)))
        active = [c for c in active if c not in (a, b)]
        dist[new], total[new] = {}, {}
        na, nb = size[a], size[b]
        for c in active:
            if linkage == "average":
                total[new][c] = total[c][new] = total[a][c] + total[b][c]
                nd = total[new][c] / ((na + nb) * size[c])
            else:
                nc = size[c]
                t = na + nb + nc
                nd = np.sqrt(max(0.0, ((na + nc) * dist[a][c] ** 2 + (nb + nc) * dist[b][c] ** 2
                                        - nc * d ** 2) / t))
            dist[new][c] = dist[c][new] = nd
        size[new] = na + nb
        mins[new] = min(mins[a], mins[b])
        active.append(new)
    return ClusterTree(n, merges, linkage)


def top_level_split(tree):
    return partition_at(tree, tree.root)


def partition_at(tree, node):
    """Partition of ``node``'s classes into its two children's class sets."""
    left, right = tree.children(node)
    return GroupPartition((tree.classes(left), tree.classes(right)))


# -- specification matrices -----------------------------------------------

def _check_label(y, n):
    if not 0 <= y < n:
        raise ValueError(f"label {y} out of range for {n} classes")


def spec_standard(y, n_classes):
    _check_label(y, n_classes)
    c = -np.eye(n_classes)
    c[:, y] += 1.0
    c[y] = 0.0
    return c


def _spec_masked(y, partition, n_classes, same_group):
    _check_label(y, n_classes)
    gid = partition.group_array(n_classes)
    c = spec_standard(y, n_classes)
    keep = (gid == gid[y]) if same_group else (gid != gid[y])
    c[~keep] = 0.0
    return c


def spec_outer(y, partition, n_classes):
    """Rows only for classes outside the true label's group."""
    return _spec_masked(y, partition, n_classes, same_group=False)


def spec_inner(y, partition, n_classes):
    """Rows only for the other classes inside the true label's group."""
    return _spec_masked(y, partition, n_classes, same_group=True)


def row_masks(ys, partition, n_classes):
    """Boolean [B, n] masks of active rows: (standard, outer, inner)."""
    ys = np.asarray(ys)
    gid = partition.group_array(n_classes)
    cols = np.arange(n_classes)[None, :]
    standard = cols != ys[:, None]
    outer = gid[None, :] != gid[ys][:, None]
    inner = standard & ~outer
    return standard, outer, inner


def spec_batch(ys, n_classes, partition=None, kind="standard"):
    """Stacked [B, n, n] specification matrices for labels ``ys``."""
    ys = np.asarray(ys)
    out = np.stack([spec_standard(int(y), n_classes) for y in ys]) if ys.size \
        else np.zeros((0, n_classes, n_classes))
    if kind == "standard":
        return out
    _, outer, inner = row_masks(ys, partition, n_classes)
    keep = outer if kind == "outer" else inner
    out[~keep] = 0.0
    return out


def check_spec_matrix(c, y):
    """Raise AssertionError unless ``c`` is a well-formed specification matrix for ``y``."""
    c = np.asarray(c)
    n = c.shape[0]
    assert c.shape == (n, n)
    assert np.isin(c, (-1.0, 0.0, 1.0)).all()
    assert not c[y].any(), "row of the true label must be zero"
    assert (c.sum(axis=1) == 0).all()
    for i in range(n):
        if c[i].any():
            assert c[i, y] == 1.0 and c[i, i] == -1.0 and np.count_nonzero(c[i]) == 2
