"""Command-line entry point: ``hopfe <subcommand> [flags]``.

Exit status is 0 on success, 2 on configuration errors (the message names
the offending flag) and 1 on runtime failures.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, asdict, fields

import numpy as np

from . import data, evaluation, hopf, model, training
from .errors import HopfEError

log = logging.getLogger("hopfe")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "train_log.jsonl"
CONFIG_NAME = "config.json"

# settings for the full-benchmark attempt; far beyond desk scale
PAPER_PROFILE = {
    "dim": 500, "heads": 1, "batch": 512, "neg": 256, "alpha": 1.0, "gamma": 6.0,
    "lr": 0.1, "decay": 0.1, "steps": 100_000, "valid_every": 5000, "matching": "sinkhorn",
}


class ConfigError(Exception):
    def __init__(self, flag, message):
        super().__init__(f"{flag}: {message}")
        self.flag = flag


@dataclass
class RunConfig:
    dim: int = 100
    heads: int = 1
    batch: int = 512
    neg: int = 64
    alpha: float = 1.0
    gamma: float = 12.0
    lr: float = 0.1
    decay: float = 0.1
    steps: int = 1000
    valid_every: int = 0
    variant: str = "hopfe"
    matching: str = "min"
    epsilon: float = 0.1
    seed: int = 0
    threads: int = 1
    eval_max: int = None
    grad_check_interval: int = 0
    data: str = None
    out: str = None
    checkpoint: str = None
    semantics: str = None
    vectors: str = None

    def model_config(self):
        return model.ModelConfig(dim=self.dim, heads=self.heads, variant=self.variant,
                                 matching=self.matching, gamma=self.gamma, alpha=self.alpha,
                                 epsilon=self.epsilon)

    def train_config(self):
        return training.TrainConfig(batch_size=self.batch, neg_samples=self.neg,
                                    learning_rate=self.lr, decay_rate=self.decay,
                                    max_steps=self.steps, seed=self.seed,
                                    grad_check_interval=self.grad_check_interval,
                                    valid_every=self.valid_every, eval_max_triples=self.eval_max,
                                    threads=self.threads)


CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def _flag(name):
    return "--" + name.replace("_", "-")


def _positive(cfg, names, strict=True):
    for name in names:
        v = getattr(cfg, name)
        if v is None:
            continue
        if (strict and not v > 0) or (not strict and v < 0):
            raise ConfigError(_flag(name), f"must be {'> 0' if strict else '>= 0'}, got {v}")


def validate(cfg, need=()):
    _positive(cfg, ("dim", "heads", "batch", "neg", "alpha", "gamma", "lr", "steps", "threads",
                    "epsilon"))
    _positive(cfg, ("valid_every", "seed", "grad_check_interval"), strict=False)
    if cfg.eval_max is not None and cfg.eval_max < 1:
        raise ConfigError("--eval-max", "must be >= 1")
    if not 0 < cfg.decay <= 1:
        raise ConfigError("--decay", f"must lie in (0, 1], got {cfg.decay}")
    if cfg.variant not in model.VARIANTS:
        raise ConfigError("--variant", f"must be one of {', '.join(model.VARIANTS)}")
    if cfg.matching not in model.MATCHINGS:
        raise ConfigError("--matching", f"must be one of {', '.join(model.MATCHINGS)}")
    if cfg.variant == "no-hopf" and cfg.heads != 1:
        raise ConfigError("--heads", "heads > 1 needs the fibred variant (--variant hopfe)")
    if cfg.semantics and not cfg.vectors:
        raise ConfigError("--vectors", "required with --semantics")
    if cfg.semantics and cfg.heads > len(data.KINDS):
        raise ConfigError("--heads", f"at most {len(data.KINDS)} heads with --semantics")
    for name in need:
        if getattr(cfg, name) is None:
            raise ConfigError(_flag(name), "is required")
    for name in ("data",):
        path = getattr(cfg, name)
        if path is not None and not os.path.isdir(path):
            raise ConfigError(_flag(name), f"directory not found: {path}")
    for name in ("checkpoint", "semantics", "vectors"):
        path = getattr(cfg, name)
        if path is not None and name in need + ("semantics", "vectors") and not os.path.isfile(path):
            raise ConfigError(_flag(name), f"file not found: {path}")
    return cfg


def parse_config(args=None, config_path=None):
    """Defaults, then the JSON file, then explicitly given flags."""
    values = asdict(RunConfig())
    if getattr(args, "profile", None) == "paper":
        values.update(PAPER_PROFILE)
    path = config_path or getattr(args, "config", None)
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("--config", str(exc)) from None
        if not isinstance(loaded, dict):
            raise ConfigError("--config", "must hold a JSON object")
        unknown = set(loaded) - CONFIG_KEYS
        if unknown:
            raise ConfigError("--config", f"unknown keys {sorted(unknown)}")
        values.update(loaded)
    if args is not None:
        for key in CONFIG_KEYS:
            v = getattr(args, key, None)
            if v is not None:
                values[key] = v
    return RunConfig(**values)


# ---------------------------------------------------------------- argument parser

def _add_model_flags(p):
    g = p.add_argument_group("model and training")
    g.add_argument("--dim", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--neg", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--decay", type=float)
    g.add_argument("--steps", type=int)
    g.add_argument("--valid-every", dest="valid_every", type=int)
    g.add_argument("--variant", choices=model.VARIANTS)
    g.add_argument("--matching", choices=model.MATCHINGS)
    g.add_argument("--epsilon", type=float, help="Sinkhorn regularization")
    g.add_argument("--eval-max", dest="eval_max", type=int,
                   help="evaluate a seeded subset of this many triples")
    g.add_argument("--grad-check-interval", dest="grad_check_interval", type=int)
    g.add_argument("--semantics", help="attribute file (entity<TAB>kind<TAB>text)")
    g.add_argument("--vectors", help="token vector file (token v1 ... vW)")
    g.add_argument("--config", help="JSON file with any of the flag names as keys")
    g.add_argument("--profile", choices=("paper",),
                   help="full-benchmark settings; needs downloaded data and hours of compute")


def _common(p, data_required=False):
    p.add_argument("--data", required=data_required)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="hopfe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + log")
    _common(p, data_required=True)
    _add_model_flags(p)
    p.add_argument("--checkpoint", help="initialize from this checkpoint")

    p = sub.add_parser("eval", help="filtered ranking report for a checkpoint")
    _common(p, data_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--eval-max", dest="eval_max", type=int)

    p = sub.add_parser("analyze", help="relation angle and norm histograms")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--inverse", action="append", default=[], metavar="R1,R2")
    p.add_argument("--composition", action="append", default=[], metavar="R1,R2,R3")
    p.add_argument("--bins", type=int, default=64)

    p = sub.add_parser("generate", help="write an Erdős–Rényi dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--avg-degree", dest="avg_degree", type=float, required=True)
    p.add_argument("--relations", type=int, default=1)
    p.add_argument("--inverse-of", dest="inverse_of", action="append", default=[],
                   help="add a relation holding the reversed triples of this one")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("project", help="stereographic fiber CSVs for entities")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--entities", nargs="+", required=True)
    p.add_argument("--samples", type=int, default=64)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite on a tiny model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("stats", help="relation category fractions")
    _common(p, data_required=True)
    p.add_argument("--split", default="train", choices=data.SPLITS)
    return parser


# ---------------------------------------------------------------- subcommands

def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(path, default):
    path = path or default
    os.makedirs(path, exist_ok=True)
    return path


def _attach_semantics(params, store, cfg):
    with open(cfg.vectors, encoding="utf-8") as fh:
        first = fh.readline().split()
    width = len(first) - 1
    table = data.load_attributes(cfg.semantics, cfg.vectors, width)
    vectors, mask = table.to_arrays(store.entities, cfg.heads)
    log.info("attributes for %d entities (%d all-OOV texts)", int(mask.sum()),
             table.report["oov_count"])
    return model.attach_semantics(params, vectors, mask, seed=cfg.seed)


def cmd_train(args):
    cfg = validate(parse_config(args), need=("data",))
    mcfg, tcfg = cfg.model_config(), cfg.train_config()
    mcfg.validate()
    tcfg.validate()
    store = data.load_dataset(cfg.data)
    out = _out_dir(cfg.out, "hopfe_out")
    if cfg.checkpoint:
        params = model.load_checkpoint(cfg.checkpoint)
    else:
        params = model.init_model(store.num_entities, store.num_relations, mcfg, seed=cfg.seed)
        if cfg.semantics:
            _attach_semantics(params, store, cfg)
    _write_json(os.path.join(out, CONFIG_NAME), asdict(cfg))
    params, records = training.train(store, tcfg, mcfg, params=params,
                                     log_path=os.path.join(out, LOG_NAME))
    model.save_checkpoint(os.path.join(out, CHECKPOINT_NAME), params)
    last = records[-1]
    print(f"step {last['step']} loss {last['loss']:.4f} mrr {last['mrr']:.4f}")
    print(f"wrote {os.path.join(out, CHECKPOINT_NAME)}")
    return 0


def _load_model_and_store(cfg):
    params = model.load_checkpoint(cfg.checkpoint)
    store = data.load_dataset(cfg.data) if cfg.data else None
    if store is not None and (store.num_entities != params.num_entities
                              or store.num_relations != params.num_relations):
        raise ConfigError("--data", "entity/relation counts do not match the checkpoint")
    return params, store


def cmd_eval(args):
    cfg = validate(parse_config(args), need=("data", "checkpoint"))
    params, store = _load_model_and_store(cfg)
    report = evaluation.evaluate_split(args.split, params, store, threads=cfg.threads,
                                       max_triples=cfg.eval_max, seed=cfg.seed)
    out = _out_dir(cfg.out, "hopfe_out")
    path = os.path.join(out, f"eval_{args.split}.json")
    report.write_json(path)
    print(f"{args.split}: MR {report.mr:.2f} MRR {report.mrr:.4f} "
          f"H@1 {report.hits1:.4f} H@3 {report.hits3:.4f} H@10 {report.hits10:.4f} "
          f"({report.query_count} queries)")
    print(f"wrote {path}")
    return 0


def _split_names(values, size, flag):
    out = []
    for v in values:
        parts = [p.strip() for p in v.split(",")]
        if len(parts) != size or not all(parts):
            raise ConfigError(flag, f"expected {size} comma-separated relations, got {v!r}")
        out.append([int(p) if p.isdigit() else p for p in parts])
    return out


def cmd_analyze(args):
    cfg = validate(parse_config(args), need=("checkpoint",))
    if args.bins < 1:
        raise ConfigError("--bins", "must be >= 1")
    pairs = _split_names(args.inverse, 2, "--inverse")
    comps = _split_names(args.composition, 3, "--composition")
    if not pairs and not comps:
        raise ConfigError("--inverse", "give at least one --inverse or --composition")
    params, store = _load_model_and_store(cfg)
    names = store.relations if store is not None else None
    tables = evaluation.angle_histograms(params, pairs, comps, bins=args.bins,
                                         relation_names=names)
    out = _out_dir(cfg.out, "hopfe_out")
    path = os.path.join(out, "angle_histograms.csv")
    evaluation.write_histograms_csv(path, tables)
    for h in tables:
        if h.dim_agg == "pooled" and not h.relation_set.startswith("norm"):
            centre = np.abs(0.5 * (h.edges[:-1] + h.edges[1:])) < 0.3
            print(f"{h.relation_set}: mass within 0.3 rad of 0 = {h.mass[centre].sum():.3f}")
    print(f"wrote {path}")
    return 0


def cmd_generate(args):
    if args.n < 2:
        raise ConfigError("--n", "must be >= 2")
    if not 0 < args.avg_degree < args.n:
        raise ConfigError("--avg-degree", "must lie in (0, n)")
    if args.relations < 1:
        raise ConfigError("--relations", "must be >= 1")
    store = data.generate_er_graph(args.n, args.avg_degree, args.relations, seed=args.seed)
    for rel in args.inverse_of:
        key = int(rel) if rel.isdigit() else rel
        if key not in store.relation_dict and not (isinstance(key, int) and key < store.num_relations):
            raise ConfigError("--inverse-of", f"unknown relation {rel!r}")
        store = data.add_inverse_relation(store, key)
    data.save_dataset(store, args.out)
    print(f"wrote {len(store.triples)} triples over {store.num_entities} entities to {args.out}")
    return 0


def cmd_project(args):
    cfg = validate(parse_config(args), need=("checkpoint",))
    if args.samples < 1:
        raise ConfigError("--samples", "must be >= 1")
    params, store = _load_model_and_store(cfg)
    lookup = store.entity_dict if store is not None else {}
    out = _out_dir(cfg.out, "hopfe_out")
    for name in args.entities:
        if name in lookup:
            e = lookup[name]
        elif name.isdigit() and int(name) < params.num_entities:
            e = int(name)
        else:
            raise ConfigError("--entities", f"unknown entity {name!r}")
        ent = params.entity(e)
        path = os.path.join(out, f"fiber_{name}.csv")
        hopf.write_fiber_csv(path, ent.points, samples=args.samples, marked_phases=ent.phases)
        print(f"wrote {path}")
    return 0


def gradcheck(seed=0):
    """Worst relative error over every variant/matching on a k=2, H=2 model."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for variant, matching in (("hopfe", "min"), ("hopfe", "sinkhorn"), ("no-hopf", "min"),
                              ("no-hopf", "sinkhorn")):
        heads = 1 if variant == "no-hopf" else 2
        cfg = model.ModelConfig(dim=2, heads=heads, variant=variant, matching=matching, gamma=1.0)
        params = model.init_model(4, 2, cfg, seed=seed)
        pos = np.stack([rng.integers(0, 4, 3), rng.integers(0, 2, 3), rng.integers(0, 4, 3)], axis=1)
        neg = np.stack([rng.integers(0, 4, (3, 4)), np.repeat(pos[:, 1:2], 4, axis=1),
                        rng.integers(0, 4, (3, 4))], axis=2)
        err, _ = training.finite_difference_check(params, pos, neg)
        log.info("%s/%s: %.3g", variant, matching, err)
        worst = max(worst, err)
    return worst


def cmd_gradcheck(args):
    if args.seed < 0:
        raise ConfigError("--seed", "must be >= 0")
    err = gradcheck(args.seed)
    ok = err < args.tolerance
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {args.tolerance:g})")
    return 0 if ok else 1


def cmd_stats(args):
    cfg = validate(parse_config(args), need=("data",))
    store = data.load_dataset(cfg.data)
    stats = data.relation_category_stats(store, args.split)
    out = _out_dir(cfg.out, "hopfe_out")
    path = os.path.join(out, "relation_stats.json")
    _write_json(path, stats)
    for c, f in stats["fractions"].items():
        print(f"{c}: {100 * f:.1f}%")
    print(f"wrote {path}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze,
            "generate": cmd_generate, "project": cmd_project, "gradcheck": cmd_gradcheck,
            "stats": cmd_stats}


def _setup_logging():
    level = os.environ.get("HOPFE_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise ConfigError("HOPFE_LOG", f"must be one of {', '.join(LOG_LEVELS)}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging()
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"hopfe {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (HopfEError, OSError, ValueError, KeyError) as exc:
        print(f"hopfe {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())
