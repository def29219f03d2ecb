"""Command-line surface tying the pipeline together.

Every command reads an optional JSON config file plus flags (flags win),
prints its resolved config and seed as one JSON line, and exits nonzero with
a diagnostic on any error.  Serialized artifacts embed the vocabulary hash,
seed, and tool version; commands that combine artifacts verify the hashes.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import core, evaluate, knowledge, model, rank, stats, synth
from .distill import DistillConfig

DEFAULTS = {
    "seed": 0,
    "k": 100,
    "ks": "50,100",
    "mode": "none",
    "task": "predcls",
    "one_per_pair": False,
    "distill": "off",
    "lam": 6.0,
    "tau": 10.0,
    "alpha": 0.1,
    "learning_rate": 0.5,
    "epochs": 10,
    "batch_size": 64,
    "hidden": 32,
    "negative_ratio": 3.0,
    "aggregate": "image",
    "distill_iters": None,
}


def _load_config(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return doc


def _resolve(args, keys) -> dict:
    """Flag value if given, else config-file value, else the default."""
    config = _load_config(args)
    resolved = {}
    for key in keys:
        value = getattr(args, key, None)
        if value is None:
            value = config.get(key, DEFAULTS.get(key))
        resolved[key] = value
    return resolved


def _announce(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, "seed": resolved.get("seed"),
                      "config": resolved}, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    keys = ("seed", "images", "test_images", "n_object_classes", "n_heads",
            "n_predicates", "n_clusters", "regions_per_image", "feature_dim")
    resolved = _resolve(args, keys)
    config = _load_config(args)
    spec_fields = {k: v for k, v in config.items() if k != "relevance_table"}
    spec_fields.update({k: v for k, v in resolved.items() if v is not None})
    if "relevance_table" in config:
        spec_fields["relevance_table"] = {
            tuple(name.split("|")): p
            for name, p in config["relevance_table"].items()}
    spec = synth.SynthSpec(**spec_fields)
    _announce("synth", resolved)
    result = synth.generate(spec)
    paths = synth.write_files(result, args.out)
    for name, path in sorted(paths.items()):
        print(f"wrote {name}: {path}")
    return 0


def _cmd_stats_build(args) -> int:
    resolved = _resolve(args, ("seed",))
    _announce("stats build", resolved)
    dataset = core.load_dataset(args.dataset)
    pair_stats = stats.build_pair_stats(dataset)
    stats.save_stats(pair_stats, args.out, resolved["seed"])
    print(f"wrote stats: {args.out} ({len(pair_stats.cooc)} head pairs)")
    return 0


def _cmd_knowledge_semantic(args) -> int:
    resolved = _resolve(args, ("seed", "tau"))
    _announce("knowledge semantic", resolved)
    dataset = core.load_dataset(args.dataset)
    _, pred_vecs = core.load_embeddings(args.embeddings, dataset.vocab)
    matrix = knowledge.build_semantic_matrix(pred_vecs, resolved["tau"],
                                             dataset.vocab.vocab_hash)
    knowledge.save_semantic(matrix, args.out, resolved["seed"])
    print(f"wrote semantic knowledge: {args.out}")
    return 0


def _cmd_knowledge_internal(args) -> int:
    resolved = _resolve(args, ("seed", "alpha"))
    _announce("knowledge internal", resolved)
    pair_stats = stats.load_stats(args.stats)
    ik = knowledge.InternalKnowledge(pair_stats, resolved["alpha"])
    knowledge.save_internal(ik, args.out, resolved["seed"])
    print(f"wrote internal knowledge: {args.out}")
    return 0


def _cmd_knowledge_export(args) -> int:
    resolved = _resolve(args, ("seed",))
    _announce("knowledge export", resolved)
    loaded = knowledge.load_knowledge(args.knowledge)
    if not isinstance(loaded, knowledge.SemanticMatrix):
        raise ValueError("knowledge export requires a semantic (sk) artifact")
    knowledge.export_matrix(loaded, args.out)
    print(f"wrote matrix: {args.out}")
    return 0


def _train_config(resolved) -> model.TrainConfig:
    dcfg = DistillConfig(lam=resolved.get("lam", DEFAULTS["lam"]),
                         total_iters=resolved.get("distill_iters"))
    return model.TrainConfig(learning_rate=resolved["learning_rate"],
                             epochs=resolved["epochs"],
                             batch_size=resolved["batch_size"],
                             seed=resolved["seed"],
                             hidden=resolved["hidden"],
                             negative_ratio=resolved["negative_ratio"],
                             distill=resolved.get("distill", "off"),
                             distill_config=dcfg)


_TRAIN_KEYS = ("seed", "learning_rate", "epochs", "batch_size", "hidden",
               "negative_ratio")


def _cmd_train(args) -> int:
    branch = args.branch
    keys = _TRAIN_KEYS + (("distill", "lam", "distill_iters")
                          if branch == "predicate" else ())
    resolved = _resolve(args, keys)
    _announce(f"train {branch}", resolved)
    dataset = core.load_dataset(args.dataset)
    vocab_hash = dataset.vocab.vocab_hash
    config = _train_config(resolved)
    if branch == "relevance":
        head, trace = model.train_relevance(dataset, config)
    elif branch == "object":
        head, trace = model.train_object(dataset, config)
    else:
        sk = ik = None
        if config.distill in ("sk", "both"):
            if not args.sk:
                raise ValueError("--distill sk requires --sk ARTIFACT")
            sk = knowledge.load_knowledge(args.sk, vocab_hash)
        if config.distill in ("ik", "both"):
            if not args.ik:
                raise ValueError("--distill ik requires --ik ARTIFACT")
            ik = knowledge.load_knowledge(args.ik, vocab_hash)
        head, trace = model.train_predicate(dataset, config, sk=sk, ik=ik)
    model.save_head(head, args.out, vocab_hash, config.seed)
    final = round(trace[-1], 6) if trace else None
    print(f"wrote head: {args.out} (final loss {final})")
    return 0


def _load_bundle(args, dataset, mode: rank.RankMode, task: str) -> rank.ModelBundle:
    vocab_hash = dataset.vocab.vocab_hash
    pred_head, _ = _load_checked_head(args.predicate_head, vocab_hash)
    object_head = relevance_head = pair_stats = None
    if task == "sgcls":
        if not args.object_head:
            raise ValueError("--task sgcls requires --object-head")
        object_head, _ = _load_checked_head(args.object_head, vocab_hash)
    if mode.relevance in ("rp", "rpre"):
        if not args.relevance_head:
            raise ValueError(f"--mode {mode.relevance} requires --relevance-head")
        relevance_head, _ = _load_checked_head(args.relevance_head, vocab_hash)
    if getattr(args, "stats", None):
        pair_stats = stats.load_stats(args.stats, vocab_hash)
    elif mode.relevance in ("re", "rpre"):
        raise ValueError(f"--mode {mode.relevance} requires --stats")
    return rank.ModelBundle(pred_head, object_head, relevance_head, pair_stats)


def _load_checked_head(path, vocab_hash: str):
    head, meta = model.load_head(path)
    if meta["vocab_hash"] != vocab_hash:
        raise core.ArtifactMismatchError(
            f"vocabulary hash mismatch: {path} has {meta['vocab_hash']}, "
            f"expected {vocab_hash}")
    return head, meta


def _rank_mode(resolved) -> rank.RankMode:
    return rank.RankMode(resolved["mode"], bool(resolved["one_per_pair"]))


def _cmd_rank(args) -> int:
    resolved = _resolve(args, ("seed", "mode", "task", "k", "one_per_pair"))
    _announce("rank", resolved)
    dataset = core.load_dataset(args.dataset)
    mode = _rank_mode(resolved)
    bundle = _load_bundle(args, dataset, mode, resolved["task"])
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in dataset.records:
            for prop in rank.rank_image(rec, bundle, mode, resolved["task"],
                                        resolved["k"]):
                fh.write(core._json_line(
                    {"image_id": prop.image_id, "sub": prop.subject_region,
                     "obj": prop.object_region, "s": prop.subject_class,
                     "v": prop.predicate, "o": prop.object_class,
                     "score": round(prop.score, 9)}))
    print(f"wrote proposals: {args.out}")
    return 0


def _cmd_eval(args) -> int:
    resolved = _resolve(args, ("seed", "mode", "task", "ks", "one_per_pair",
                               "aggregate"))
    _announce("eval", resolved)
    dataset = core.load_dataset(args.dataset)
    mode = _rank_mode(resolved)
    bundle = _load_bundle(args, dataset, mode, resolved["task"])
    ks = [int(v) for v in str(resolved["ks"]).split(",") if v]
    report = evaluate.dataset_recall(dataset, bundle, mode, resolved["task"],
                                     ks=ks, aggregate=resolved["aggregate"])
    train_counts = (stats.predicate_totals(bundle.stats)
                    if bundle.stats is not None else None)
    doc = evaluate.report_to_doc(report, dataset.vocab.vocab_hash,
                                 resolved["seed"], train_counts)
    evaluate.save_report(doc, args.out)
    for name in sorted(doc["metrics"]):
        print(f"{name}: {doc['metrics'][name]}")
    print(f"wrote report: {args.out}")
    return 0


def _cmd_compare(args) -> int:
    resolved = _resolve(args, ("seed",))
    _announce("compare", resolved)
    baseline = evaluate.load_report(args.baseline)
    other = evaluate.load_report(args.other, baseline["vocab_hash"])
    rows = evaluate.compare_reports(baseline, other)
    gains = {}
    for name, base, value, gain in rows:
        gains[name] = round(gain, 6)
        print(f"{name}: {base} -> {value} ({gain:+.2f}%)")
    if args.out:
        doc = {"format": "relrank-compare", "version": core.TOOL_VERSION,
               "baseline": str(args.baseline), "other": str(args.other),
               "gains": gains}
        core.dump_json_artifact(doc, args.out)
        print(f"wrote comparison: {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int, default=None)


def _add_bundle_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--predicate-head", required=True)
    p.add_argument("--object-head", default=None)
    p.add_argument("--relevance-head", default=None)
    p.add_argument("--stats", default=None)
    p.add_argument("--mode", choices=rank.RELEVANCE_MODES, default=None)
    p.add_argument("--task", choices=rank.TASKS, default=None)
    p.add_argument("--one-per-pair", action=argparse.BooleanOptionalAction,
                   default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relrank",
        description="Relationship proposal ranking with knowledge distillation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--images", type=int, default=None)
    p.add_argument("--test-images", dest="test_images", type=int, default=None)
    p.add_argument("--object-classes", dest="n_object_classes", type=int,
                   default=None)
    p.add_argument("--heads", dest="n_heads", type=int, default=None)
    p.add_argument("--predicates", dest="n_predicates", type=int, default=None)
    p.add_argument("--clusters", dest="n_clusters", type=int, default=None)
    p.add_argument("--regions", dest="regions_per_image", type=int, default=None)
    p.add_argument("--feature-dim", dest="feature_dim", type=int, default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("stats", help="pair statistics commands")
    stats_sub = p.add_subparsers(dest="subcommand", required=True)
    pb = stats_sub.add_parser("build", help="count co-occurrences and relations")
    _add_common(pb)
    pb.add_argument("--dataset", required=True)
    pb.add_argument("--out", required=True)
    pb.set_defaults(func=_cmd_stats_build)

    p = sub.add_parser("knowledge", help="constraint knowledge commands")
    know_sub = p.add_subparsers(dest="subcommand", required=True)
    pk = know_sub.add_parser("semantic", help="embedding-similarity knowledge")
    _add_common(pk)
    pk.add_argument("--dataset", required=True)
    pk.add_argument("--embeddings", required=True)
    pk.add_argument("--tau", type=float, default=None)
    pk.add_argument("--out", required=True)
    pk.set_defaults(func=_cmd_knowledge_semantic)
    pk = know_sub.add_parser("internal", help="pair-statistics knowledge")
    _add_common(pk)
    pk.add_argument("--stats", required=True)
    pk.add_argument("--alpha", type=float, default=None)
    pk.add_argument("--out", required=True)
    pk.set_defaults(func=_cmd_knowledge_internal)
    pk = know_sub.add_parser("export", help="dump a semantic matrix as text")
    _add_common(pk)
    pk.add_argument("--knowledge", required=True)
    pk.add_argument("--out", required=True)
    pk.set_defaults(func=_cmd_knowledge_export)

    p = sub.add_parser("train", help="train a head")
    train_sub = p.add_subparsers(dest="branch", required=True)
    for branch in ("relevance", "predicate", "object"):
        pt = train_sub.add_parser(branch)
        _add_common(pt)
        pt.add_argument("--dataset", required=True)
        pt.add_argument("--out", required=True)
        pt.add_argument("--lr", dest="learning_rate", type=float, default=None)
        pt.add_argument("--epochs", type=int, default=None)
        pt.add_argument("--batch-size", dest="batch_size", type=int, default=None)
        pt.add_argument("--hidden", type=int, default=None)
        if branch == "relevance":
            pt.add_argument("--neg-ratio", dest="negative_ratio", type=float,
                            default=None)
        if branch == "predicate":
            pt.add_argument("--distill", choices=model.DISTILL_MODES,
                            default=None)
            pt.add_argument("--lambda", dest="lam", type=float, default=None)
            pt.add_argument("--distill-iters", dest="distill_iters", type=int,
                            default=None)
            pt.add_argument("--sk", default=None,
                            help="semantic knowledge artifact")
            pt.add_argument("--ik", default=None,
                            help="internal knowledge artifact")
        pt.set_defaults(func=_cmd_train, branch=branch)

    p = sub.add_parser("rank", help="emit top-k proposals per image")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    _add_bundle_flags(p)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_rank)

    p = sub.add_parser("eval", help="recall@k evaluation report")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    _add_bundle_flags(p)
    p.add_argument("--k", dest="ks", default=None,
                   help="comma-separated list, default 50,100")
    p.add_argument("--aggregate", choices=("image", "annotation"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("compare", help="relative gains between two reports")
    _add_common(p)
    p.add_argument("baseline")
    p.add_argument("other")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
