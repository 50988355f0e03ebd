"""End-to-end acceptance suite.

Each test records one PASS/FAIL line (printed in the pytest terminal
summary) and then asserts, so a failing criterion is visible both ways.
Criterion 10 needs Fashion-MNIST under $AVT_DATA_DIR/fashion-mnist and is
skipped otherwise.
"""

import contextlib
import math
import os
import time

import numpy as np
import pytest

from avt import autodiff as ad
from avt import network as nw
from avt.bounds import margin_bounds
from avt.data import BlobSpec, Dataset, load_fashion_mnist, synth_blobs
from avt.evaluate import evaluate, inter_group_error, verified_error
from avt.groups import (GroupPartition, agglomerative_cluster, check_spec_matrix, spec_inner,
                        spec_outer, spec_standard, top_level_split)
from avt.ndt import build_plan, certify_root_batch, save_ndt, train_ndt, truncate
from avt.train import LossMode, TrainConfig, igrp_loss, natural_loss, robust_loss, train
import conftest
from conftest import PAIR_CENTERS, random_mlp
from oracles import (brute_force_average_linkage, corner_certified, corner_margins, finite_diff,
                     max_rel_error, set_partitions)

EIGHT_CENTERS = [(0.1, 0.1), (0.2, 0.1), (0.1, 0.3), (0.2, 0.3),
                 (0.8, 0.9), (0.9, 0.9), (0.8, 0.6), (0.9, 0.6)]


@contextlib.contextmanager
def criterion(number, title, budget=None):
    """Record PASS/FAIL for one criterion; failures re-raise."""
    start = time.perf_counter()
    notes = {}
    try:
        yield notes
        elapsed = time.perf_counter() - start
        if budget is not None:
            assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget}s"
    except BaseException as exc:
        if isinstance(exc, pytest.skip.Exception):
            conftest.ACCEPTANCE[number] = f"[{number:2d}] SKIP  {title}: {exc}"
        else:
            conftest.ACCEPTANCE[number] = f"[{number:2d}] FAIL  {title}: {exc}".splitlines()[0]
        raise
    detail = ", ".join(f"{k}={v}" for k, v in notes.items())
    conftest.ACCEPTANCE[number] = (f"[{number:2d}] PASS  {title} "
                                   f"({time.perf_counter() - start:.1f}s{', ' if detail else ''}"
                                   f"{detail})")
    print(conftest.ACCEPTANCE[number])


def test_01_gradients_match_finite_differences():
    with criterion(1, "gradient correctness", budget=60) as notes:
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(20):
            net = random_mlp(rng, max_layers=3, max_width=16, n_classes=int(rng.integers(2, 6)))
            n = net.n_classes
            x = rng.uniform(size=(3,) + net.input_shape)
            y = rng.integers(0, n, size=3)
            part = GroupPartition.from_labels(np.arange(n) % 2)
            params = net.parameters()
            losses = [lambda: natural_loss(net, x, y),
                      lambda: robust_loss(net, x, y, 0.03),
                      lambda: igrp_loss(net, x, y, part, 0.03, 0.01, ubs=False),
                      lambda: igrp_loss(net, x, y, part, 0.03, 0.01, ubs=True)]
            for f in losses:
                grads = ad.backward(f(), params)
                fd = finite_diff(lambda: float(f().data), params)
                worst = max(worst, max_rel_error(grads, fd))
        notes["max_rel_err"] = f"{worst:.2e}"
        assert worst < 1e-6, worst


def test_02_ibp_soundness():
    with criterion(2, "IBP soundness", budget=120) as notes:
        rng = np.random.default_rng(2)
        violations = 0
        for _ in range(50):
            net = random_mlp(rng, max_layers=3, max_width=16)
            n = net.n_classes
            for _ in range(20):
                x = rng.uniform(size=net.input_shape)
                y = int(rng.integers(n))
                eps = float(rng.uniform(0.0, 0.2))
                c = spec_standard(y, n)
                mb = margin_bounds(net, c, x, eps)
                lo, hi = np.clip(x - eps, 0, 1), np.clip(x + eps, 0, 1)
                xs = lo + (hi - lo) * rng.uniform(size=(200,) + x.shape)
                f = net.logits(xs)
                m = f @ c.T
                violations += int(np.sum(m < mb.m_lower - 1e-9) + np.sum(m > mb.m_upper + 1e-9))
                bound = float(robust_loss(net, x, y, eps).data)
                ce = ad.softmax_cross_entropy(f, np.full(200, y)).data
                violations += int(np.sum(bound < ce - 1e-9))
        notes["violations"] = violations
        assert violations == 0


def test_03_single_affine_exactness():
    with criterion(3, "corner exactness oracle", budget=60) as notes:
        rng = np.random.default_rng(3)
        worst, mismatches = 0.0, 0
        for _ in range(100):
            d = int(rng.integers(1, 11))
            net = random_mlp(rng, max_layers=1, in_dim=d)
            n = net.n_classes
            w, b = net.params[0][0].data, net.params[0][1].data
            x = rng.uniform(size=d)
            eps = float(rng.uniform(0, 0.3))
            y = int(rng.integers(n))
            c = spec_standard(y, n)
            mb = margin_bounds(net, c, x, eps)
            lo, _ = corner_margins(w, b, c, x, eps)
            worst = max(worst, float(np.max(np.abs(mb.m_lower - lo))))
            ds = Dataset(x[None], [y], n)
            mismatches += verified_error(net, ds, eps) != float(not corner_certified(w, b, c, x, eps))
        notes["max_abs_err"] = f"{worst:.1e}"
        notes["verdict_mismatches"] = mismatches
        assert worst <= 1e-9 and mismatches == 0


def test_04_spec_algebra_exhaustive():
    with criterion(4, "spec-matrix algebra", budget=10) as notes:
        cases = 0
        for n in range(1, 7):
            for blocks in set_partitions(range(n)):
                p = GroupPartition(tuple(map(tuple, blocks)))
                for y in range(n):
                    s, o, i = spec_standard(y, n), spec_outer(y, p, n), spec_inner(y, p, n)
                    for m in (s, o, i):
                        check_spec_matrix(m, y)
                    assert (o + i == s).all()
                    cases += 1
        notes["cases"] = cases


def test_05_degenerate_identities():
    with criterion(5, "degenerate-loss identities", budget=10) as notes:
        rng = np.random.default_rng(5)
        worst9, worst12 = 0.0, 0.0
        for _ in range(30):
            net = random_mlp(rng)
            n = net.n_classes
            x = rng.uniform(size=(5,) + net.input_shape)
            y = rng.integers(0, n, size=5)
            one = GroupPartition((tuple(range(n)),))
            singles = GroupPartition(tuple((c,) for c in range(n)))
            a = igrp_loss(net, x, y, one, 0.1, 0.04).data
            worst9 = max(worst9, abs(a - math.log(n) - robust_loss(net, x, y, 0.04).data))
            a = igrp_loss(net, x, y, singles, 0.1, 0.04).data
            worst9 = max(worst9, abs(a - math.log(n) - robust_loss(net, x, y, 0.1).data))
            worst12 = max(worst12, abs(robust_loss(net, x, y, 0.0).data -
                                       natural_loss(net, x, y).data))
        notes["igrp_err"] = f"{worst9:.1e}"
        notes["eps0_err"] = f"{worst12:.1e}"
        assert worst9 <= 1e-9 and worst12 <= 1e-12


def test_06_clustering_oracle():
    with criterion(6, "clustering oracle", budget=30) as notes:
        rng = np.random.default_rng(6)
        ties = 0
        for k in range(200):
            n = int(rng.integers(2, 9))
            dim = int(rng.integers(1, 4))
            if k % 3 == 0:
                w = rng.integers(0, 3, size=(n, dim)).astype(float)      # lattice: many ties
            elif k % 3 == 1:
                w = rng.normal(size=(n, dim))
                w[rng.integers(n)] = w[rng.integers(n)]                  # duplicated row
            else:
                w = rng.normal(size=(n, dim))
            tree = agglomerative_cluster(w)
            ours = [(tree.classes(l), tree.classes(r), d) for l, r, d in tree.merges]
            ref = brute_force_average_linkage(w)
            assert [(a, b) for a, b, _ in ours] == [(a, b) for a, b, _ in ref], (k, w)
            assert np.allclose([d for *_, d in ours], [d for *_, d in ref], rtol=0, atol=1e-9)
            ds = [d for *_, d in ref]
            ties += len(ds) != len(set(np.round(ds, 9)))
        notes["matrices_with_tied_distances"] = ties
        assert ties > 0


# -- synthetic end-to-end runs (criteria 7-9, repeated for 11) ---------------

def pair_data():
    train_set = synth_blobs(BlobSpec(PAIR_CENTERS, 0.02, 100, seed=1), "pairs-train")
    test_set = synth_blobs(BlobSpec(PAIR_CENTERS, 0.02, 100, seed=2), "pairs-test")
    return train_set, test_set


PAIRS = GroupPartition(((0, 1), (2, 3)))
ARCH = nw.preset("mlp-tiny", (2,), 4)


def _config(loss, partition=None):
    return TrainConfig(epochs=40, batch_size=32, seed=0, loss=loss, partition=partition)


def run_robust_vs_igrp():
    train_set, test_set = pair_data()
    init = nw.init(ARCH, 0)
    robust, _ = train(init, train_set, _config(LossMode("robust", eps=0.15)))
    igrp, _ = train(init, train_set,
                    _config(LossMode("igrp", eps_outer=0.15, eps_inner=0.03), PAIRS))
    reports = {name: evaluate(net, test_set, PAIRS, 0.15, 0.03, {"model": name})
               for name, net in (("robust", robust), ("igrp", igrp))}
    return {"robust": robust, "igrp": igrp}, reports


def run_mixed_ndt():
    train_set, test_set = pair_data()
    tree = agglomerative_cluster([[0.0], [1.0], [10.0], [11.0]])
    plan = build_plan(tree, "mixed", [0.15], nw.preset("mlp-tiny", (2,), 2), (2,))
    ndt = train_ndt(plan, train_set, _config(LossMode("natural")))
    return ndt, evaluate(ndt, test_set, PAIRS, 0.15, metadata={"model": "mixed-ndt"})


def eight_class_data():
    spec = lambda s: BlobSpec(EIGHT_CENTERS, 0.02, 60, seed=s)
    return synth_blobs(spec(11), "eight-train"), synth_blobs(spec(12), "eight-test")


def run_truncation_family():
    train_set, test_set = eight_class_data()
    arch = nw.preset("mlp-tiny", (2,), 8)
    base, _ = train(nw.init(arch, 0), train_set,
                    TrainConfig(epochs=30, batch_size=32, seed=0, loss=LossMode("natural")))
    tree = agglomerative_cluster(base.params[-1][0].data)
    cfg = TrainConfig(epochs=15, batch_size=32, seed=0, loss=LossMode("natural"))
    deepest = tree.depth() - 1
    first = train_ndt(build_plan(tree, "truncated:1", [0.05], arch, (2,)), train_set, cfg)
    family = {1: first}
    for d in range(2, deepest + 1):
        family[d] = truncate(family[d - 1], d, train_set, cfg)
    return tree, family, test_set


def _timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


@pytest.fixture(scope="module")
def robust_vs_igrp():
    return _timed(run_robust_vs_igrp)


@pytest.fixture(scope="module")
def mixed_ndt():
    return _timed(run_mixed_ndt)


@pytest.fixture(scope="module")
def truncation_family():
    return _timed(run_truncation_family)


def test_07_igrp_beats_uniform_eps(robust_vs_igrp):
    with criterion(7, "IGRP vs uniform-eps IBP on pair blobs", budget=300) as notes:
        (_, rep), seconds = robust_vs_igrp
        notes["train_s"] = f"{seconds:.1f}"
        assert seconds < 300
        a, b = rep["robust"], rep["igrp"]
        notes["clean"] = f"{a.clean_error:.4f}->{b.clean_error:.4f}"
        notes["verified_inter"] = (f"{a.verified_inter_group_error:.4f}->"
                                   f"{b.verified_inter_group_error:.4f}")
        assert b.clean_error < a.clean_error
        assert b.verified_inter_group_error <= a.verified_inter_group_error + 0.02


def test_08_mixed_ndt_beats_uniform_eps(robust_vs_igrp, mixed_ndt):
    with criterion(8, "Mixed NDT vs uniform-eps IBP on pair blobs", budget=300) as notes:
        a = robust_vs_igrp[0][1]["robust"]
        (ndt, rep), seconds = mixed_ndt
        notes["train_s"] = f"{seconds:.1f}"
        assert seconds < 300
        _, test_set = pair_data()
        root_verified = float(np.mean(~certify_root_batch(ndt, test_set.x, test_set.y, 0.15)))
        assert root_verified == rep.verified_inter_group_error
        notes["clean"] = f"{a.clean_error:.4f}->{rep.clean_error:.4f}"
        notes["verified_inter"] = f"{a.verified_inter_group_error:.4f}->{root_verified:.4f}"
        assert rep.clean_error < a.clean_error
        assert root_verified <= a.verified_inter_group_error + 0.02


def test_09_truncation_invariance(truncation_family):
    with criterion(9, "truncation invariance", budget=60) as notes:
        (tree, family, test_set), seconds = truncation_family
        notes["train_s"] = f"{seconds:.1f}"
        assert seconds < 60
        part = top_level_split(tree)
        depths = sorted(family)
        assert len(depths) >= 2, "tree too shallow to truncate at two depths"
        ref = family[depths[0]]
        for d in depths:
            ndt = family[d]
            assert ndt.root.net is ref.root.net
            assert inter_group_error(ndt, test_set, part) == inter_group_error(ref, test_set, part)
            for eps in (0.0, 0.02, 0.05, 0.1):
                got = certify_root_batch(ndt, test_set.x, test_set.y, eps)
                assert (got == certify_root_batch(ref, test_set.x, test_set.y, eps)).all()
        notes["depths"] = depths
        notes["inter_error"] = f"{inter_group_error(ref, test_set, part):.4f}"


def _fmnist_root():
    root = os.environ.get("AVT_DATA_DIR")
    if not root or not os.path.isdir(os.path.join(root, "fashion-mnist")):
        return None
    return os.path.join(root, "fashion-mnist")


@pytest.mark.slow
def test_10_fashion_mnist_long_check():
    with criterion(10, "Fashion-MNIST long check", budget=3600) as notes:
        root = _fmnist_root()
        if root is None:
            pytest.skip("Fashion-MNIST not found under $AVT_DATA_DIR/fashion-mnist")
        train_set, test_set = load_fashion_mnist(root, "train"), load_fashion_mnist(root, "test")
        arch = nw.preset("mlp-small", (1, 28, 28), 10)
        cfg = lambda loss, part=None: TrainConfig(epochs=20, batch_size=64, seed=0, loss=loss,
                                                  partition=part)
        init = nw.init(arch, 0, (1, 28, 28))
        natural, _ = train(init, train_set, cfg(LossMode("natural")))
        tree = agglomerative_cluster(natural.params[-1][0].data)
        part = top_level_split(tree)
        base, _ = train(init, train_set, cfg(LossMode("robust", eps=0.1)))
        igrp, _ = train(init, train_set,
                        cfg(LossMode("igrp", eps_outer=0.1, eps_inner=0.0), part))
        plan = build_plan(tree, "mixed", [0.1], nw.preset("mlp-small", (1, 28, 28), 2),
                          (1, 28, 28))
        ndt = train_ndt(plan, train_set, cfg(LossMode("natural")))
        rb, ri, rn = (evaluate(m, test_set, part, 0.1) for m in (base, igrp, ndt))
        notes["split"] = part.groups
        notes["clean"] = f"{rb.clean_error:.4f}/{ri.clean_error:.4f}/{rn.clean_error:.4f}"
        notes["verified_inter"] = (f"{rb.verified_inter_group_error:.4f}/"
                                   f"{ri.verified_inter_group_error:.4f}/"
                                   f"{rn.verified_inter_group_error:.4f}")
        for r in (ri, rn):
            assert r.clean_error <= rb.clean_error - 0.02
            assert r.verified_inter_group_error <= rb.verified_inter_group_error + 0.05


def _artifact_bytes(tmp, tag):
    """Run criteria 7-9 from scratch and return every written file's bytes."""
    out = tmp / tag
    out.mkdir()
    nets, reports = run_robust_vs_igrp()
    for name, net in nets.items():
        nw.save(net, out / f"{name}.json")
        reports[name].save(out / f"{name}_report.json")
    ndt, rep = run_mixed_ndt()
    save_ndt(ndt, out / "mixed")
    rep.save(out / "mixed_report.json")
    tree, family, test_set = run_truncation_family()
    part = top_level_split(tree)
    for d, t in family.items():
        save_ndt(t, out / f"trunc{d}")
        evaluate(t, test_set, part, 0.05).save(out / f"trunc{d}_report.json")
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_11_determinism(tmp_path):
    with criterion(11, "determinism of criteria 7-9", budget=600) as notes:
        first = _artifact_bytes(tmp_path, "a")
        second = _artifact_bytes(tmp_path, "b")
        assert first.keys() == second.keys()
        differing = [k for k in first if first[k] != second[k]]
        notes["files"] = len(first)
        assert not differing, differing
