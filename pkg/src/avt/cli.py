"""Command-line entry point: ``avt {synth,cluster,train,train-ndt,eval,certify}``.

Every command writes its outputs plus a ``manifest.json`` (resolved config,
sha256 of every input file, tool version) under ``--out``.  Exit codes:
0 success, 1 runtime/IO failure, 2 config schema error, 3 numerical abort.
"""

import argparse
import hashlib
import json
import logging
import os
import sys

import jsonschema

from . import __version__
from . import network as nw
from . import ndt as ndt_mod
from .data import BlobSpec, load_cifar10, load_fashion_mnist, load_idx, save_idx, synth_blobs
from .evaluate import evaluate, format_table
from .groups import ClusterTree, GroupPartition, agglomerative_cluster, top_level_split
from .train import NumericalError, TrainConfig, train, write_history

log = logging.getLogger("avt")

EXIT_FAIL, EXIT_SCHEMA, EXIT_NUMERIC = 1, 2, 3


class ConfigError(ValueError):
    pass


_num = {"type": "number", "minimum": 0}
_partition = {"oneOf": [
    {"type": "string"},
    {"type": "object", "required": ["groups"],
     "properties": {"groups": {"type": "array", "minItems": 1,
                               "items": {"type": "array", "items": {"type": "integer",
                                                                   "minimum": 0}}}}}]}
DATASET_SCHEMA = {
    "type": "object", "required": ["kind"],
    "properties": {
        "kind": {"enum": ["blobs", "idx", "idx-dir", "fashion-mnist", "cifar10"]},
        "split": {"enum": ["train", "test"]},
        "images": {"type": "string"}, "labels": {"type": "string"},
        "path": {"type": "string"}, "root": {"type": "string"},
        "n_classes": {"type": "integer", "minimum": 2},
        "class_centers": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "noise_stddev": {"type": "number", "exclusiveMinimum": 0},
        "samples_per_class": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "input_dim": {"type": "integer", "minimum": 1},
        "limit": {"type": "integer", "minimum": 1},
    },
    "allOf": [
        {"if": {"properties": {"kind": {"const": "blobs"}}},
         "then": {"required": ["class_centers", "noise_stddev", "samples_per_class"]}},
        {"if": {"properties": {"kind": {"const": "idx"}}},
         "then": {"required": ["images", "labels"]}},
        {"if": {"properties": {"kind": {"const": "idx-dir"}}}, "then": {"required": ["path"]}},
    ],
}
TRAIN_SCHEMA = {
    "type": "object",
    "properties": {
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "balance_classes": {"type": "boolean"},
        "optimizer": {"type": "object", "properties": {
            "kind": {"enum": ["adam", "sgd-momentum"]}, "lr": _num, "momentum": _num,
            "beta1": _num, "beta2": _num, "eps": _num}, "additionalProperties": False},
        "loss": {"type": "object", "properties": {
            "kind": {"enum": ["natural", "robust", "igrp"]}, "eps": _num, "eps_outer": _num,
            "eps_inner": _num, "ubs": {"type": "boolean"},
            "terms": {"type": "array", "items": {
                "type": "object", "required": ["kind", "groups", "eps"],
                "properties": {"kind": {"enum": ["outer", "inner"]}, "eps": _num,
                               "groups": {"type": "array"}}}}},
            "additionalProperties": False},
        "schedule": {"type": "object", "properties": {
            "natural_warmup_epochs": {"type": "integer", "minimum": 0},
            "ramp_epochs": {"type": ["integer", "null"], "minimum": 1},
            "kappa_start": {"type": "number", "minimum": 0, "maximum": 1},
            "kappa_end": {"type": "number", "minimum": 0, "maximum": 1}},
            "additionalProperties": False},
    },
    "additionalProperties": False,
}
_arch = {"oneOf": [{"type": "string"}, {"type": "array", "items": {
    "type": "object", "required": ["type"]}}]}
SCHEMAS = {
    "synth": {"type": "object", "required": ["class_centers", "noise_stddev",
                                              "samples_per_class"],
              "properties": {k: v for k, v in DATASET_SCHEMA["properties"].items()
                             if k in ("class_centers", "noise_stddev", "samples_per_class",
                                      "seed", "n_classes", "input_dim")}},
    "train": {"type": "object", "required": ["dataset", "arch"],
              "properties": {"dataset": DATASET_SCHEMA, "arch": _arch,
                             "init_seed": {"type": "integer"}, "train": TRAIN_SCHEMA,
                             "partition": _partition, "init_model": {"type": "string"}},
              "additionalProperties": False},
    "train-ndt": {"type": "object", "required": ["dataset", "arch", "tree", "variant",
                                                 "eps_table"],
                  "properties": {"dataset": DATASET_SCHEMA, "arch": _arch,
                                 "tree": {"type": "string"},
                                 "variant": {"type": "string",
                                             "pattern": "^(full|mixed|truncated(-mixed)?:[1-9][0-9]*)$"},
                                 "eps_table": {"type": "array", "minItems": 1, "items": _num},
                                 "train": TRAIN_SCHEMA, "finetune_model": {"type": "string"}},
                  "additionalProperties": False},
    "eval": {"type": "object", "required": ["dataset", "partition"],
             "properties": {"dataset": DATASET_SCHEMA, "partition": _partition,
                            "model": {"type": "string"},
                            "eps": {"type": "array", "items": _num},
                            "eps_inner": _num},
             "additionalProperties": False},
}


def validate(doc, command):
    errors = sorted(jsonschema.Draft7Validator(SCHEMAS[command]).iter_errors(doc),
                    key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = "config" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}"
                                       for p in e.absolute_path)
            lines.append(f"{where}: {e.message}")
        raise ConfigError("\n".join(lines))


# -- helpers ----------------------------------------------------------------

def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects inputs and outputs for the run manifest."""

    def __init__(self, command, out_dir, config):
        self.command, self.out_dir, self.config = command, out_dir, config
        self.inputs, self.outputs = {}, []
        os.makedirs(out_dir, exist_ok=True)

    def input(self, path):
        path = str(path)
        if os.path.isdir(path):
            for name in sorted(os.listdir(path)):
                full = os.path.join(path, name)
                if os.path.isfile(full):
                    self.inputs[full] = sha256(full)
        else:
            self.inputs[path] = sha256(path)
        return path

    def output(self, name):
        self.outputs.append(name)
        return os.path.join(self.out_dir, name)

    def finish(self):
        doc = {"tool": "avt", "version": __version__, "command": self.command,
               "config": self.config, "inputs": self.inputs, "outputs": sorted(self.outputs)}
        with open(os.path.join(self.out_dir, "manifest.json"), "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _resolve(path, data_dir):
    if os.path.isabs(path) or os.path.exists(path) or not data_dir:
        return path
    return os.path.join(data_dir, path)


def load_dataset(spec, run, data_dir):
    kind = spec["kind"]
    split = spec.get("split", "train")
    if kind == "blobs":
        ds = synth_blobs(BlobSpec.from_json(spec))
    elif kind == "idx":
        ds = load_idx(run.input(_resolve(spec["images"], data_dir)),
                      run.input(_resolve(spec["labels"], data_dir)), spec.get("n_classes"))
    elif kind == "idx-dir":
        root = _resolve(spec["path"], data_dir)
        ds = load_idx(run.input(os.path.join(root, "images.idx")),
                      run.input(os.path.join(root, "labels.idx")), spec.get("n_classes"))
    elif kind == "fashion-mnist":
        root = _resolve(spec.get("root", "fashion-mnist"), data_dir)
        ds = load_fashion_mnist(root, split)
        run.input(root)
    else:
        root = _resolve(spec.get("root", "cifar-10-batches-bin"), data_dir)
        ds = load_cifar10(root, split)
        run.input(root)
    if "limit" in spec:
        ds = ds.subset(slice(0, spec["limit"]))
    return ds


def load_partition(spec, run):
    if isinstance(spec, str):
        return GroupPartition.from_json(run.input(spec))
    return GroupPartition.from_json(spec)


def resolve_arch(arch, dataset):
    if isinstance(arch, str):
        return nw.preset(arch, dataset.sample_shape, dataset.n_classes)
    return [nw.layer_from_json(l) for l in arch]


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None


# -- commands ---------------------------------------------------------------

def cmd_synth(args):
    cfg = _read_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    validate(cfg, "synth")
    try:
        spec = BlobSpec.from_json(cfg)
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from None
    run = Run("synth", args.out, cfg)
    ds = synth_blobs(spec)
    save_idx(ds, run.output("images.idx"), run.output("labels.idx"))
    run.finish()
    print(f"wrote {len(ds)} samples to {args.out}")


def cmd_cluster(args):
    run = Run("cluster", args.out, {"model": args.model, "linkage": args.linkage})
    net = nw.load(run.input(args.model))
    tree = agglomerative_cluster(net.params[-1][0].data, linkage=args.linkage)
    _dump(tree.to_json(), run.output("tree.json"))
    _dump(top_level_split(tree).to_json(), run.output("partition.json"))
    with open(run.output("dendrogram.txt"), "w") as fh:
        fh.write(tree.render())
    run.finish()
    print(tree.render(), end="")


def _train_config(doc, seed):
    doc = dict(doc or {})
    if seed is not None:
        doc["seed"] = seed
    try:
        return TrainConfig.from_json(doc)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config.train: {exc}") from None


def cmd_train(args):
    cfg = _read_config(args.config)
    validate(cfg, "train")
    run = Run("train", args.out, cfg)
    ds = load_dataset(cfg["dataset"], run, args.data_dir)
    tdoc = dict(cfg.get("train", {}))
    if "partition" in cfg:
        tdoc["partition"] = load_partition(cfg["partition"], run).to_json()
    tcfg = _train_config(tdoc, args.seed)
    if "init_model" in cfg:
        net = nw.load(run.input(cfg["init_model"]))
    else:
        try:
            arch = resolve_arch(cfg["arch"], ds)
            net = nw.init(arch, cfg.get("init_seed", tcfg.seed), ds.sample_shape)
        except ValueError as exc:
            raise ConfigError(f"config.arch: {exc}") from None
    model, history = train(net, ds, tcfg)
    nw.save(model, run.output("model.json"))
    write_history(history, run.output("history.jsonl"))
    run.finish()
    if history:
        print(f"final epoch: loss {history[-1]['loss']:.5f}, "
              f"clean error {history[-1]['clean_error']:.4f}")


def cmd_train_ndt(args):
    cfg = _read_config(args.config)
    validate(cfg, "train-ndt")
    run = Run("train-ndt", args.out, cfg)
    ds = load_dataset(cfg["dataset"], run, args.data_dir)
    tree = ClusterTree.from_json(run.input(cfg["tree"]))
    if tree.n_classes != ds.n_classes:
        raise ConfigError(f"config.tree: {tree.n_classes} classes, dataset has {ds.n_classes}")
    tcfg = _train_config(cfg.get("train"), args.seed)
    base = nw.load(run.input(cfg["finetune_model"])) if "finetune_model" in cfg else None
    try:
        arch = resolve_arch(cfg["arch"], ds)
        plan = ndt_mod.build_plan(tree, cfg["variant"], cfg["eps_table"], arch, ds.sample_shape)
    except ValueError as exc:
        raise ConfigError(f"config: {exc}") from None
    model = ndt_mod.train_ndt(plan, ds, tcfg, finetune_base=base, threads=args.threads)
    ndt_dir = os.path.join(args.out, "ndt")
    ndt_mod.save_ndt(model, ndt_dir)
    run.outputs.append("ndt/")
    with open(run.output("history.jsonl"), "w") as fh:
        for key, hist in model.meta.get("history", {}).items():
            for rec in hist:
                fh.write(json.dumps(dict(rec, node=key), sort_keys=True) + "\n")
    run.finish()
    print(f"trained {len(model.nodes())} nodes, depth {model.depth}")


def load_predictor(path):
    if ndt_mod.is_ndt_dir(path):
        return ndt_mod.load_ndt(path)
    if os.path.isdir(path) and os.path.exists(os.path.join(path, "model.json")):
        return nw.load(os.path.join(path, "model.json"))
    return nw.load(path)


def cmd_eval(args, require_eps=False):
    cfg = _read_config(args.config)
    if args.model:
        cfg["model"] = args.model
    if args.eps is not None:
        cfg["eps"] = [float(v) for v in args.eps.split(",") if v.strip()]
    validate(cfg, "eval")
    if "model" not in cfg:
        raise ConfigError("config.model: a model path is required (or pass --model)")
    if require_eps and not cfg.get("eps"):
        raise ConfigError("config.eps: certify needs a non-empty eps list (--eps)")
    run = Run(args.command, args.out, cfg)
    model_path = cfg["model"]
    if not os.path.exists(model_path):
        raise FileNotFoundError(f"model not found: {model_path}")
    run.input(model_path)
    predictor = load_predictor(model_path)
    ds = load_dataset(cfg["dataset"], run, args.data_dir)
    part = load_partition(cfg["partition"], run)
    n = predictor.n_classes
    if part.n_classes != n or ds.n_classes != n:
        raise ConfigError(f"config.partition: partition covers {part.n_classes} classes, "
                          f"model {n}, dataset {ds.n_classes}")
    reports = []
    for eps in cfg.get("eps") or [0.0]:
        rep = evaluate(predictor, ds, part, eps, cfg.get("eps_inner"),
                       {"model": os.path.basename(os.path.normpath(model_path))})
        rep.save(run.output(f"report_eps{eps:g}.json"))
        reports.append(rep)
    table = format_table(reports)
    with open(run.output("report.txt"), "w") as fh:
        fh.write(table + "\n")
    run.finish()
    print(table)
    return reports


# -- entry point ------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="avt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON config file")
        sp.add_argument("--out", required=True, help="run output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--data-dir", default=os.environ.get("AVT_DATA_DIR"),
                        help="dataset root (default $AVT_DATA_DIR)")

    sp = sub.add_parser("synth", help="write a synthetic blob dataset as IDX")
    common(sp)
    sp = sub.add_parser("cluster", help="cluster classes by final-layer weights")
    sp.add_argument("model")
    sp.add_argument("--linkage", choices=["average", "ward"], default="average")
    common(sp, config_required=False)
    for name, helptext in (("train", "train a flat classifier"),
                           ("train-ndt", "train a neural decision tree")):
        common(sub.add_parser(name, help=helptext))
    for name, helptext in (("eval", "compute error and verified error rates"),
                           ("certify", "eval with a required eps list")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, config_required=False)
        sp.add_argument("--model", help="model file or NDT directory")
        sp.add_argument("--eps", help="comma-separated eps values")
    return p


COMMANDS = {"synth": cmd_synth, "cluster": cmd_cluster, "train": cmd_train,
            "train-ndt": cmd_train_ndt, "eval": cmd_eval,
            "certify": lambda a: cmd_eval(a, require_eps=True)}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_SCHEMA
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return 0


if __name__ == "__main__":
    sys.exit(main())
