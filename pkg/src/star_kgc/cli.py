"""Command-line entry point: ``star-kgc <subcommand> [options]``.

Every run resolves its configuration from built-in defaults, then an
optional JSON config file (``--config``), then explicit flags, and writes
``manifest.json`` with the resolved config under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import io as kio
from .encoder import EncoderConfig, TextBank, precompute_entity_reps
from .ensemble import EnsembleConfig, EnsembleInputError, SelfAdaptiveEnsemble, prepare_queries, train_ensemble
from .evaluation import (
    CostCounter,
    CrossEncoderScorer,
    StarScorer,
    evaluate,
    predicted_cost,
    predicted_speedup,
)
from .geo import GeoConfig, GeoScorer, align_to_graph, inductive_complete, train_geo
from .kg import EmptyProbeError, GraphFormatError, ProbeSpec, build_probe, load_graph, probe2_removed, make_synthetic_graph
from .training import TrainConfig, TrainingDiverged, gradient_check, sample_negatives, train_star

logger = logging.getLogger("star_kgc")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_CONFIG = 4
EXIT_DATA = 5
EXIT_DIVERGED = 6
EXIT_CHECK_FAILED = 7
EXIT_EMPTY_PROBE = 8

EXIT_CODES = """exit codes:
  0  success
  1  unexpected internal error
  2  usage error (unknown flag or subcommand, bad value)
  3  missing input file
  4  configuration conflict (e.g. ensemble without both score matrices)
  5  malformed data or checkpoint file
  6  training diverged (non-finite loss)
  7  gradient check failed the 1e-4 tolerance
  8  probe produced an empty test set
"""

SEED_ENV = "STAR_KGC_SEED"


class ConfigConflict(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


# flag, group, key, type, extra argparse kwargs
_DATA = [
    ("--data", "data", "dir", str, {"help": "directory with train/valid/test.tsv and optional text files"}),
    ("--train-file", "data", "train", str, {}),
    ("--dev-file", "data", "dev", str, {}),
    ("--test-file", "data", "test", str, {}),
    ("--entity-text", "data", "entity_text", str, {}),
    ("--relation-text", "data", "relation_text", str, {}),
    ("--synthetic", "data", "synthetic", int, {"metavar": "N", "help": "use a generated N-entity graph instead of files"}),
]
_ENCODER = [
    ("--d-h", "encoder", "d_h", int, {}),
    ("--layers", "encoder", "n_layers", int, {}),
    ("--heads", "encoder", "n_heads", int, {}),
    ("--d-ff", "encoder", "d_ff", int, {}),
    ("--max-len-hr", "encoder", "max_len_hr", int, {}),
    ("--max-len-t", "encoder", "max_len_t", int, {}),
]
_TRAIN = [
    ("--epochs", "train", "epochs", int, {}),
    ("--batch-size", "train", "batch_size", int, {}),
    ("--lr", "train", "learning_rate", float, {}),
    ("--negatives", "train", "n_negatives", int, {}),
    ("--margin", "train", "margin", float, {}),
    ("--gamma", "train", "gamma", float, {}),
    ("--dropout", "train", "dropout", float, {}),
    ("--distance", "train", "distance", str, {"choices": ["negl2", "bilinear", "cosine"]}),
    ("--eval-every", "train", "eval_every", int, {}),
    ("--dev-limit", "train", "dev_limit", int, {}),
]
_GEO = [
    ("--geo-model", "geo", "kind", str, {"choices": ["transe", "rotate"]}),
    ("--dim", "geo", "dim", int, {}),
    ("--geo-margin", "geo", "margin", float, {}),
    ("--geo-lr", "geo", "learning_rate", float, {}),
    ("--geo-epochs", "geo", "epochs", int, {}),
    ("--geo-batch-size", "geo", "batch_size", int, {}),
    ("--geo-negatives", "geo", "n_negatives", int, {}),
    ("--p", "geo", "p", int, {"choices": [1, 2]}),
]
_ENSEMBLE = [
    ("--k", "ensemble", "k", int, {}),
    ("--mode", "ensemble", "mode", str, {"choices": ["self_adaptive", "fixed"]}),
    ("--alpha", "ensemble", "alpha", float, {}),
    ("--ens-margin", "ensemble", "margin", float, {}),
    ("--ens-lr", "ensemble", "learning_rate", float, {}),
    ("--ens-epochs", "ensemble", "epochs", int, {}),
    ("--ens-batch-size", "ensemble", "batch_size", int, {}),
    ("--ens-negatives", "ensemble", "n_negatives", int, {}),
    ("--m-sim", "ensemble", "m_sim", int, {}),
    ("--ens-hidden", "ensemble", "hidden", int, {}),
]
_EVAL = [
    ("--split", "eval", "split", str, {"choices": ["train", "dev", "valid", "test"]}),
    ("--ranking-basis", "eval", "ranking_basis", str, {"choices": ["sc", "sd", "sum", "prod"]}),
    ("--self-loop-filter", "eval", "self_loop_filter", bool, {}),
    ("--top-k", "eval", "top_k", int, {}),
]

_GROUP_DEFAULTS = {
    "data": {"dir": None, "train": None, "dev": None, "test": None, "entity_text": None, "relation_text": None, "synthetic": None},
    "encoder": {k: v for k, v in EncoderConfig().to_dict().items() if k not in ("vocab_size", "seed", "dropout", "max_len_triple")},
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
    "geo": {k: v for k, v in GeoConfig().to_dict().items() if k != "seed"},
    "ensemble": {k: v for k, v in EnsembleConfig().to_dict().items() if k != "seed"},
    "eval": {"split": "test", "ranking_basis": "sc", "self_loop_filter": False, "top_k": 10},
}


def _add_options(p, table):
    for flag, _group, key, typ, extra in table:
        if typ is bool:
            p.add_argument(flag, dest=f"opt_{_group}_{key}", action="store_true", default=None, **extra)
        else:
            p.add_argument(flag, dest=f"opt_{_group}_{key}", type=typ, default=None, **extra)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="star-kgc",
        description="Knowledge graph completion with a Siamese text encoder, graph-embedding baselines and their ensemble.",
        epilog=EXIT_CODES,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option groups: data, encoder, train, geo, ensemble, eval, seed")
    common.add_argument("--seed", type=int, default=None, help=f"global seed (overrides ${SEED_ENV})")
    common.add_argument("--out", default="runs/latest", help="output directory (default: %(default)s)")
    common.add_argument("--workers", type=int, default=None, help="CPU threads (default: all cores for eval, 1 for training)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", required=True)

    def add(name, help_, groups, fn):
        p = sub.add_parser(name, parents=[common], help=help_, epilog=EXIT_CODES, formatter_class=argparse.RawDescriptionHelpFormatter)
        for g in groups:
            _add_options(p, g)
        p.set_defaults(func=fn, groups=[t[0][1] for t in groups])
        return p

    add("train", "train the Siamese StAR model", [_DATA, _ENCODER, _TRAIN], cmd_train)
    p = add("eval", "filtered link-prediction evaluation of a checkpoint", [_DATA, _EVAL], cmd_eval)
    p.add_argument("--model", required=True, help="star, cross or geo checkpoint")
    p.add_argument("--entity-cache", help="precomputed entity representations for a star model")
    p.add_argument("--records", action="store_true", help="write per-query rank records (records.jsonl)")
    p.add_argument("--scores", action="store_true", help="write the score matrix (scores.bin)")
    p.add_argument("--support", help="support triples (probe2 support.tsv) for inductive completion of unseen entities")
    add("train-geo", "train a TransE / RotatE baseline", [_DATA, _GEO], cmd_train_geo)
    p = add("precompute", "encode every entity once and store the cache", [_DATA], cmd_precompute)
    p.add_argument("--model", required=True)
    p = add("ensemble-train", "fit the per-query blending weight on dev score matrices", [_DATA, _ENSEMBLE, _EVAL], cmd_ensemble_train)
    _ensemble_inputs(p)
    p = add("ensemble-eval", "evaluate the ensemble from two score matrices", [_DATA, _ENSEMBLE, _EVAL], cmd_ensemble_eval)
    _ensemble_inputs(p)
    p.add_argument("--ensemble", help="ensemble checkpoint (omit with --mode fixed)")
    p.add_argument("--dump-alphas", action="store_true", help="write alphas.jsonl")
    p = add("probe", "derive a probing graph (probe1 / probe2 / probe3)", [_DATA], cmd_probe)
    p.add_argument("--kind", required=True, choices=["probe1", "probe2", "probe3"])
    p.add_argument("--n-removed", type=int, default=0, help="entities removed for probe2")
    p = add("cost-report", "predicted encoder cost, cross-encoder vs Siamese", [], cmd_cost_report)
    p.add_argument("--L", type=float, required=True, help="cross-encoder input length")
    p.add_argument("--entities", type=int, required=True)
    p.add_argument("--relations", type=int, default=1)
    p = add("gradcheck", "finite-difference check of the three objectives at float64", [_DATA], cmd_gradcheck)
    p.add_argument("--d-h", type=int, default=16)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--negatives", type=int, default=2)
    p.add_argument("--coords", type=int, default=256)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _ensemble_inputs(p):
    p.add_argument("--star-scores", help="score matrix from `eval --scores` on a star model")
    p.add_argument("--geo-scores", help="score matrix from `eval --scores` on a geo model")
    p.add_argument("--entity-cache", help="entity representations for the ambiguity features")
    p.add_argument("--model", help="star checkpoint (used when no entity cache is given)")


def resolve_seed(args, file_cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigConflict(f"${SEED_ENV} must be an integer, got {env!r}") from None
    return int(file_cfg.get("seed", 0))


def resolve_config(args) -> dict:
    """Defaults < config file < flags, for every option group of the subcommand."""
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingInput(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigConflict(f"{path}: invalid JSON ({e})") from None
        unknown = set(file_cfg) - set(_GROUP_DEFAULTS) - {"seed"}
        if unknown:
            raise ConfigConflict(f"{path}: unknown config sections {sorted(unknown)}")
    cfg = {"command": args.command, "seed": resolve_seed(args, file_cfg)}
    for group in args.groups:
        vals = dict(_GROUP_DEFAULTS[group])
        extra = set(file_cfg.get(group, {})) - set(vals)
        if extra:
            raise ConfigConflict(f"unknown keys in config section {group!r}: {sorted(extra)}")
        vals.update(file_cfg.get(group, {}))
        for key in vals:
            flag = getattr(args, f"opt_{group}_{key}", None)
            if flag is not None:
                vals[key] = flag
        cfg[group] = vals
    return cfg


def load_data(d: dict):
    if d.get("synthetic"):
        if d.get("dir") or d.get("train"):
            raise ConfigConflict("--synthetic cannot be combined with dataset files")
        return make_synthetic_graph(n_entities=d["synthetic"], seed=0)
    base = Path(d["dir"]) if d.get("dir") else None
    if base is None and not d.get("train"):
        raise ConfigConflict("no dataset given: use --data DIR, --train-file/--dev-file/--test-file or --synthetic N")

    def pick(key, name, required=True):
        if d.get(key):
            p = Path(d[key])
        elif base is not None:
            p = base / name
            if not required and not p.exists():
                return None
        else:
            if required:
                raise ConfigConflict(f"dataset file for {key!r} not given")
            return None
        if not p.exists():
            raise MissingInput(f"dataset file not found: {p}")
        return p

    extra = base / "extra.tsv" if base is not None and (base / "extra.tsv").exists() else None
    return load_graph(
        pick("train", "train.tsv"),
        pick("dev", "valid.tsv"),
        pick("test", "test.tsv"),
        pick("entity_text", "entity2text.tsv", required=False),
        pick("relation_text", "relation2text.tsv", required=False),
        extra,
    )


def load_support(path, kg):
    """Support triples by surface key, mapped onto ``kg``'s ids."""
    e_id = {k: i for i, k in enumerate(kg.entities)}
    r_id = {k: i for i, k in enumerate(kg.relations)}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise GraphFormatError(f"{path}:{lineno}: expected head<TAB>relation<TAB>tail")
            h, r, t = parts
            if h not in e_id or t not in e_id or r not in r_id:
                raise GraphFormatError(f"{path}:{lineno}: support triple uses an element outside the graph")
            rows.append((e_id[h], r_id[r], e_id[t]))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def _need(path, what):
    if not path:
        raise ConfigConflict(f"{what} is required")
    if not Path(path).exists():
        raise MissingInput(f"{what} not found: {path}")
    return path


def dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _split_name(s):
    return "dev" if s == "valid" else s


# ---------------------------------------------------------------- subcommands


def cmd_train(args, cfg, out: Path, artifacts: list):
    kg = load_data(cfg["data"])
    seed = cfg["seed"]
    enc = EncoderConfig(**cfg["encoder"], seed=seed, dropout=cfg["train"]["dropout"])
    tc = TrainConfig(**cfg["train"], seed=seed)
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    log_path = out / "metrics.jsonl"
    log_path.write_text("")

    def on_epoch(rec, model):
        path = ckdir / f"epoch-{rec['epoch']:03d}.ckpt"
        kio.save_star(path, model)
        artifacts.append(str(path))
        row = {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in rec.items()}
        with open(log_path, "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        logger.info("epoch %s: %s", rec["epoch"], row)

    model, history = train_star(kg, enc, tc, on_epoch=on_epoch)
    kio.save_star(out / "model.ckpt", model)
    artifacts += [str(log_path), str(out / "model.ckpt")]
    final = {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in history[-1].items()} if history else {}
    print(json.dumps(final, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, cfg, out: Path, artifacts: list):
    kg = load_data(cfg["data"])
    ev = cfg["eval"]
    kind, model = kio.load_any(_need(args.model, "--model"))
    result_extra = {}
    if args.support and kind != "geo":
        raise ConfigConflict("--support (inductive completion) applies to geo checkpoints only")
    if kind == "star":
        cache = None
        if args.entity_cache:
            cache = kio.load_entity_cache(_need(args.entity_cache, "--entity-cache"))
            if cache.reps.shape != (kg.n_entities, model.cfg.d_h):
                raise ConfigConflict(f"entity cache shape {tuple(cache.reps.shape)} does not match graph/model")
        scorer = StarScorer(model, TextBank(kg, model.vocab, model.cfg), basis=ev["ranking_basis"], cache=cache)
    elif kind == "cross":
        scorer = CrossEncoderScorer(model, TextBank(kg, model.vocab, model.cfg))
    elif kind == "geo":
        try:
            emb = align_to_graph(model, kg)
        except (KeyError, ValueError) as e:
            raise ConfigConflict(f"geo checkpoint does not fit the graph: {e}") from None
        if args.support:
            support = load_support(_need(args.support, "--support"), kg)
            unseen = [e for e in range(kg.n_entities) if not kg.entity_seen(e)]
            emb, unsupported = inductive_complete(emb, support, unseen)
            result_extra["inductive"] = {"unseen": len(unseen), "unsupported": len(unsupported)}
        scorer = GeoScorer(emb)
    else:
        raise ConfigConflict(f"cannot evaluate a {kind!r} checkpoint; use ensemble-eval")
    split = _split_name(ev["split"])
    report = evaluate(
        scorer, kg, split=split, self_loop_filter=ev["self_loop_filter"], seed=cfg["seed"],
        top_k=ev["top_k"], keep_records=args.records, keep_scores=args.scores,
    )
    result = report.to_dict()
    result.update(result_extra)
    result["model_kind"] = kind
    result["split"] = split
    if kind == "star":
        result["ranking_basis"] = ev["ranking_basis"]
    dump_json(out / "metrics.json", result)
    artifacts.append(str(out / "metrics.json"))
    if args.records:
        with open(out / "records.jsonl", "w") as fh:
            for rec in report.records:
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        artifacts.append(str(out / "records.jsonl"))
    if args.scores:
        meta = {"split": split, "model_kind": kind, "n_entities": kg.n_entities, "ranking_basis": result.get("ranking_basis")}
        kio.write_score_matrix(out / "scores.bin", report.score_blocks, meta)
        artifacts.append(str(out / "scores.bin"))
    print(json.dumps({k: result[k] for k in ("count", "mr", "mrr", "hits")}, sort_keys=True))
    return EXIT_OK


def cmd_train_geo(args, cfg, out: Path, artifacts: list):
    kg = load_data(cfg["data"])
    gc = GeoConfig(**cfg["geo"], seed=cfg["seed"])
    emb, history = train_geo(kg, gc)
    kio.save_geo(out / "geo.ckpt", emb, gc.to_dict())
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    artifacts += [str(out / "geo.ckpt"), str(out / "metrics.jsonl")]
    print(json.dumps(history[-1] if history else {}, sort_keys=True))
    return EXIT_OK


def cmd_precompute(args, cfg, out: Path, artifacts: list):
    kg = load_data(cfg["data"])
    kind, model = kio.load_any(_need(args.model, "--model"))
    if kind != "star":
        raise ConfigConflict(f"precompute needs a star checkpoint, got {kind!r}")
    counter = CostCounter()
    cache = precompute_entity_reps(model, TextBank(kg, model.vocab, model.cfg), counter)
    kio.save_entity_cache(out / "entity_cache.ckpt", cache)
    artifacts.append(str(out / "entity_cache.ckpt"))
    print(json.dumps({"entities": int(cache.reps.shape[0]), "cost": counter.to_dict()}, sort_keys=True))
    return EXIT_OK


def _ensemble_prepare(args, cfg, kg, split):
    if not args.star_scores or not args.geo_scores:
        raise ConfigConflict("the ensemble needs both --star-scores and --geo-scores")
    smeta, star = kio.read_score_matrix(_need(args.star_scores, "--star-scores"))
    gmeta, geo = kio.read_score_matrix(_need(args.geo_scores, "--geo-scores"))
    for name, meta in (("star", smeta), ("geo", gmeta)):
        if meta.get("split") not in (None, split):
            raise ConfigConflict(f"{name} score matrix is for split {meta.get('split')!r}, not {split!r}")
    if args.entity_cache:
        reps = kio.load_entity_cache(_need(args.entity_cache, "--entity-cache")).reps.numpy()
    elif args.model:
        kind, model = kio.load_any(_need(args.model, "--model"))
        if kind != "star":
            raise ConfigConflict("--model must be a star checkpoint")
        reps = precompute_entity_reps(model, TextBank(kg, model.vocab, model.cfg)).reps.numpy()
    else:
        raise ConfigConflict("the ensemble needs --entity-cache or --model for its features")
    if reps.shape[0] != kg.n_entities:
        raise ConfigConflict("entity representations do not match the graph")
    ec = EnsembleConfig(**cfg["ensemble"], seed=cfg["seed"])
    prepared = prepare_queries(kg, kg.split(split), star, geo, reps, ec, cfg["eval"]["self_loop_filter"])
    return ec, prepared


def cmd_ensemble_train(args, cfg, out: Path, artifacts: list):
    kg = load_data(cfg["data"])
    split = _split_name(cfg["eval"]["split"]) if args.opt_eval_split else "dev"
    cfg["eval"]["split"] = split
    ec, prepared = _ensemble_prepare(args, cfg, kg, split)
    model, stats = train_ensemble(prepared, ec)
    kio.save_ensemble(out / "ensemble.ckpt", model)
    report = model.evaluate(prepared, seed=cfg["seed"])
    result = {"train_stats": stats, "metrics": report.to_dict()}
    dump_json(out / "metrics.json", result)
    artifacts += [str(out / "ensemble.ckpt"), str(out / "metrics.json")]
    print(json.dumps({k: result["metrics"][k] for k in ("count", "mr", "mrr", "hits")}, sort_keys=True))
    return EXIT_OK


def cmd_ensemble_eval(args, cfg, out: Path, artifacts: list):
    kg = load_data(cfg["data"])
    split = _split_name(cfg["eval"]["split"])
    ec, prepared = _ensemble_prepare(args, cfg, kg, split)
    if args.ensemble:
        model = kio.load_ensemble(_need(args.ensemble, "--ensemble"))
    elif ec.mode == "fixed":
        model = SelfAdaptiveEnsemble(ec)
    else:
        raise ConfigConflict("self-adaptive ensemble-eval needs --ensemble (or use --mode fixed)")
    report = model.evaluate(prepared, seed=cfg["seed"])
    result = report.to_dict()
    result["split"] = split
    dump_json(out / "metrics.json", result)
    artifacts.append(str(out / "metrics.json"))
    if args.dump_alphas:
        with open(out / "alphas.jsonl", "w") as fh:
            for qid, a in report.alphas:
                fh.write(json.dumps({"query_id": int(qid), "alpha": float(a)}) + "\n")
        artifacts.append(str(out / "alphas.jsonl"))
    print(json.dumps({k: result[k] for k in ("count", "mr", "mrr", "hits")}, sort_keys=True))
    return EXIT_OK


def _write_triples(path, triples, kg):
    with open(path, "w") as fh:
        for h, r, t in np.asarray(triples).reshape(-1, 3).tolist():
            fh.write(f"{kg.entities[h]}\t{kg.relations[r]}\t{kg.entities[t]}\n")


def cmd_probe(args, cfg, out: Path, artifacts: list):
    kg = load_data(cfg["data"])
    probe_cfg = ProbeSpec(args.kind, seed=cfg["seed"], n_removed=args.n_removed)
    probe, support = build_probe(kg, probe_cfg)
    gdir = out / "graph"
    gdir.mkdir(exist_ok=True)
    for name, arr in (("train", probe.train), ("valid", probe.dev), ("test", probe.test), ("extra", probe.extra)):
        _write_triples(gdir / f"{name}.tsv", arr, probe)
    if support is not None:
        _write_triples(gdir / "support.tsv", support, probe)
    with open(gdir / "entity2text.tsv", "w") as fh:
        fh.writelines(f"{k}\t{t}\n" for k, t in zip(probe.entities, probe.entity_text))
    with open(gdir / "relation2text.tsv", "w") as fh:
        fh.writelines(f"{k}\t{t}\n" for k, t in zip(probe.relations, probe.relation_text))
    summary = probe.summary()
    summary["kind"] = args.kind
    summary["support"] = 0 if support is None else int(len(support))
    if args.kind == "probe2":
        summary["removed"] = [kg.entities[e] for e in probe2_removed(kg, probe_cfg)]
    dump_json(out / "probe.json", summary)
    artifacts += [str(gdir), str(out / "probe.json")]
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_cost_report(args, cfg, out: Path, artifacts: list):
    L, E, R = args.L, args.entities, args.relations
    if L <= 0 or E <= 0 or R <= 0:
        raise ConfigConflict("--L, --entities and --relations must be positive")
    rep = {
        "L": L,
        "entities": E,
        "relations": R,
        "cross_triple": predicted_cost("cross", L, E, R, "triple"),
        "siamese_triple": predicted_cost("siamese", L, E, R, "triple"),
        "cross_graph": predicted_cost("cross", L, E, R, "graph"),
        "siamese_graph": predicted_cost("siamese", L, E, R, "graph"),
        "speedup_triple": predicted_speedup(L, E, R, "triple"),
        "speedup_graph": predicted_speedup(L, E, R, "graph"),
    }
    dump_json(out / "cost.json", rep)
    artifacts.append(str(out / "cost.json"))
    print(f"per-triple speedup {rep['speedup_triple']:.1f}")
    print(f"whole-graph speedup {rep['speedup_graph']:.1f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg, out: Path, artifacts: list):
    from .scoring import StarModel
    from .encoder import Vocabulary

    d = cfg["data"]
    kg = load_data(d) if (d.get("dir") or d.get("train") or d.get("synthetic")) else make_synthetic_graph(n_entities=40, n_relations=4)
    seed = cfg["seed"]
    enc = EncoderConfig(d_h=args.d_h, n_layers=args.layers, n_heads=2, d_ff=2 * args.d_h, max_len_hr=12, max_len_t=8, dropout=0.0, seed=seed)
    model = StarModel(enc, Vocabulary.from_graph(kg))
    bank = TextBank(kg, model.vocab, model.cfg)
    rng = np.random.default_rng(seed)
    pos = kg.train[rng.choice(len(kg.train), size=args.batch, replace=False)]
    neg = np.stack([sample_negatives(kg, tp, args.negatives, rng) for tp in pos])
    results = {}
    for which in ("classification", "contrastive", "total"):
        results[which] = gradient_check(model, bank, pos, neg, which=which, n_coords=args.coords, seed=seed)
    ok = all(v < args.tolerance for v in results.values())
    for which, err in results.items():
        print(f"{which:15s} max relative error {err:.3e}  {'PASS' if err < args.tolerance else 'FAIL'}")
    dump_json(out / "gradcheck.json", {"max_relative_error": results, "tolerance": args.tolerance, "pass": ok})
    artifacts.append(str(out / "gradcheck.json"))
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# ---------------------------------------------------------------- driver


def _manifest(args, cfg, artifacts, status, started, argv):
    return {
        "argv": list(argv),
        "command": args.command,
        "config": cfg,
        "version": __version__,
        "status": status,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "artifacts": sorted(set(artifacts)),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    try:
        cfg = resolve_config(args)
    except MissingInput as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (ConfigConflict, TypeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    training = args.command in ("train", "train-geo", "ensemble-train")
    workers = args.workers or (1 if training else (os.cpu_count() or 1))
    cfg["workers"] = workers
    torch.set_num_threads(workers)
    torch.manual_seed(cfg["seed"])
    np.random.seed(cfg["seed"] % 2**32)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: list = []
    status, code = "ok", EXIT_OK
    try:
        code = args.func(args, cfg, out, artifacts)
        status = "ok" if code == EXIT_OK else "failed"
    except MissingInput as e:
        status, code = f"missing file: {e}", EXIT_MISSING_FILE
    except FileNotFoundError as e:
        status, code = f"missing file: {e}", EXIT_MISSING_FILE
    except (ConfigConflict, EnsembleInputError) as e:
        status, code = f"config conflict: {e}", EXIT_CONFIG
    except (GraphFormatError, kio.FormatError) as e:
        status, code = f"bad input: {e}", EXIT_DATA
    except TrainingDiverged as e:
        status, code = f"diverged: {e}", EXIT_DIVERGED
    except EmptyProbeError as e:
        status, code = f"empty probe: {e}", EXIT_EMPTY_PROBE
    except (TypeError, ValueError) as e:
        status, code = f"invalid configuration: {e}", EXIT_CONFIG
    if code not in (EXIT_OK, EXIT_CHECK_FAILED):
        print(f"error: {status}", file=sys.stderr)
    dump_json(out / "manifest.json", _manifest(args, cfg, artifacts, status, started, argv))
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
