"""Command-line pipeline: corpus generation, dataset building, training,
evaluation, and prediction.

Every run resolves its options (explicit flag > --config JSON > default),
echoes them to ``run.json`` in the output directory, and writes outputs
only under that directory. Failures exit nonzero with one tab-separated
line on stderr: ``error<TAB>kind<TAB>message``.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, evaluation
from .baseline import svm_decision, svm_train, svm_train_multilabel, tfidf_fit
from .corpus import (
    COMMERCIAL,
    INTENTS,
    CorpusConfig,
    generate_corpus,
    read_corpus,
    read_queries,
    read_taxonomy,
    write_corpus,
)
from .datasets import (
    LabeledDataset,
    Record,
    build_seed_records,
    label_categories_from_clicks,
    oversample_minority,
    read_dataset,
    run_active_labeling,
    split_dataset,
    write_dataset,
    write_provenance,
)
from .errors import ConfigError, JointMapError
from .model import (
    JointMap,
    ModelConfig,
    Vocabulary,
    evaluate_model,
    load_pretrained_embeddings,
    train_model,
)

_REQUIRED = object()


@dataclass(frozen=True)
class Opt:
    flag: str
    type: object
    default: object
    help: str

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


def _bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {value!r}")


_COMMON = [
    Opt("--out", str, _REQUIRED, "output directory"),
    Opt("--seed", int, 0, "rng seed for this run"),
    Opt("--threads", int, 1, "worker cap (runs single-threaded regardless, kept for interface stability)"),
]

_OPTIONS = {
    "generate-corpus": _COMMON + [
        Opt("--queries", int, CorpusConfig.num_queries, "number of queries"),
        Opt("--categories", int, CorpusConfig.num_categories, "number of taxonomy categories"),
        Opt("--vocab-size", int, CorpusConfig.vocab_size, "approximate token budget"),
        Opt("--noncommercial-fraction", float, CorpusConfig.noncommercial_fraction,
            "share of service-intent queries"),
        Opt("--skew", float, CorpusConfig.skew, "category power-law exponent"),
        Opt("--ambiguity-rate", float, CorpusConfig.ambiguity_rate,
            "share of near-boundary queries"),
        Opt("--click-noise", float, CorpusConfig.click_noise,
            "share of clicks landing on unrelated products"),
        Opt("--products-per-category", int, CorpusConfig.products_per_category,
            "products generated per category"),
    ],
    "build-datasets": _COMMON + [
        Opt("--corpus", str, _REQUIRED, "directory with taxonomy/queries/clicks TSVs"),
        Opt("--intent-source", str, "active",
            "intent labels from 'active' (labeling loop) or 'gold' (oracle)"),
        Opt("--rate-threshold", float, 0.1, "click-rate cutoff for category labels"),
        Opt("--seed-size", int, 50, "seed queries per intent class"),
        Opt("--knn-k", int, 5, "neighbors for label expansion"),
        Opt("--agreement", float, 0.8, "neighbor label agreement fraction"),
        Opt("--margin-band", float, 0.25, "uncertainty band as a fraction of mean |margin|"),
        Opt("--stop-threshold", float, 0.95, "held-out accuracy stop condition"),
        Opt("--max-iters", int, 10, "labeling loop iteration cap"),
        Opt("--test-fraction", float, 0.2, "pool share held out for the loop's accuracy check"),
        Opt("--oversample-target", float, 0.5, "non-commercial share after train oversampling"),
        Opt("--svm-epochs", int, 20, "scorer training epochs"),
        Opt("--svm-lambda", float, 1e-4, "scorer L2 regularization"),
    ],
    "train": _COMMON + [
        Opt("--corpus", str, _REQUIRED, "corpus directory (query text and taxonomy)"),
        Opt("--dataset", str, _REQUIRED, "dataset.tsv from build-datasets"),
        Opt("--epochs", int, 30, "training epochs"),
        Opt("--batch-size", int, 64, "minibatch size"),
        Opt("--lr", float, 0.001, "Adam learning rate"),
        Opt("--embed-dim", int, 300, "embedding width"),
        Opt("--query-len", int, 10, "fixed query length (pad/truncate)"),
        Opt("--heads", int, 0, "attention heads (0 = one per query position)"),
        Opt("--gamma", float, 1.5, "focal loss exponent"),
        Opt("--beta-category", float, 0.5, "category loss weight"),
        Opt("--beta-intent", float, 0.5, "intent loss weight"),
        Opt("--dropout", float, 0.5, "dropout rate at relu and pooled layers"),
        Opt("--threshold", float, 0.5, "sigmoid cutoff for category prediction"),
        Opt("--alpha-mode", str, "uniform",
            "focal class weights: 'uniform' or 'inverse-frequency'"),
        Opt("--vectors", str, "", "optional external word-vector text file"),
    ],
    "eval": _COMMON + [
        Opt("--corpus", str, _REQUIRED, "corpus directory"),
        Opt("--dataset", str, _REQUIRED, "dataset.tsv"),
        Opt("--checkpoint", str, _REQUIRED, "trained model checkpoint"),
        Opt("--split", str, "test", "dataset split to score"),
        Opt("--with-baseline", _bool, True, "also train and score the tf*idf SVM baseline"),
        Opt("--svm-epochs", int, 20, "baseline training epochs"),
        Opt("--svm-lambda", float, 1e-4, "baseline L2 regularization"),
    ],
    "predict": _COMMON + [
        Opt("--checkpoint", str, _REQUIRED, "trained model checkpoint"),
        Opt("--input", str, "", "queries.tsv to score"),
        Opt("--query", str, "", "single query text to score"),
        Opt("--threshold", float, -1.0, "category cutoff (negative = checkpoint default)"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointmap",
        description="Joint commercial-intent and product-category query classification.",
    )
    parser.add_argument("--version", action="version", version=f"jointmap {__version__}")
    subparsers = parser.add_subparsers(dest="subcommand", required=True)
    for name, opts in _OPTIONS.items():
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", type=str, default=None,
                         help="JSON file overriding option defaults")
        for opt in opts:
            default_note = "required" if opt.default is _REQUIRED else f"default: {opt.default}"
            if opt.type is _bool:
                sub.add_argument(opt.flag, type=_bool, default=None,
                                 help=f"{opt.help} ({default_note})")
            else:
                sub.add_argument(opt.flag, type=opt.type, default=None,
                                 help=f"{opt.help} ({default_note})")
    return parser


def _resolve(args: argparse.Namespace) -> dict:
    payload = {}
    if args.config:
        raw = Path(args.config).read_text(encoding="utf-8")
        payload = json.loads(raw)
        if not isinstance(payload, dict):
            raise ConfigError("--config must contain a JSON object")
    resolved = {}
    for opt in _OPTIONS[args.subcommand]:
        value = getattr(args, opt.dest)
        if value is None:
            value = payload.get(opt.dest, opt.default)
        if value is _REQUIRED:
            raise ConfigError(f"missing required option {opt.flag}")
        resolved[opt.dest] = value
    return resolved


def _write_run_config(out_dir: Path, subcommand: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"subcommand": subcommand, "config": resolved, "version": __version__}
    (out_dir / "run.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _log(message: str) -> None:
    print(message, file=sys.stderr)


# ------------------------------------------------------------- subcommands


def cmd_generate_corpus(cfg: dict) -> None:
    out = Path(cfg["out"])
    _write_run_config(out, "generate-corpus", cfg)
    corpus_cfg = CorpusConfig(
        num_categories=cfg["categories"],
        vocab_size=cfg["vocab_size"],
        num_queries=cfg["queries"],
        noncommercial_fraction=cfg["noncommercial_fraction"],
        skew=cfg["skew"],
        seed=cfg["seed"],
        ambiguity_rate=cfg["ambiguity_rate"],
        click_noise=cfg["click_noise"],
        products_per_category=cfg["products_per_category"],
    )
    corpus = generate_corpus(corpus_cfg)
    write_corpus(corpus, out)
    nc = sum(1 for q in corpus.queries if q.intent != COMMERCIAL)
    _log(f"generated {len(corpus.queries)} queries ({nc} non-commercial), "
         f"{len(corpus.taxonomy.products)} products, {len(corpus.clicks.records)} click rows")


def cmd_build_datasets(cfg: dict) -> None:
    out = Path(cfg["out"])
    _write_run_config(out, "build-datasets", cfg)
    corpus = read_corpus(cfg["corpus"])
    oracle = corpus.oracle()
    provenance = {"intent_source": cfg["intent_source"]}

    if cfg["intent_source"] == "active":
        seed_records, pool = build_seed_records(corpus.queries, cfg["seed_size"], cfg["seed"])
        result = run_active_labeling(
            seed_records,
            pool,
            oracle,
            stop_threshold=cfg["stop_threshold"],
            max_iters=cfg["max_iters"],
            k=cfg["knn_k"],
            agreement=cfg["agreement"],
            margin_band=cfg["margin_band"],
            test_fraction=cfg["test_fraction"],
            svm_lambda=cfg["svm_lambda"],
            svm_epochs=cfg["svm_epochs"],
            seed=cfg["seed"],
        )
        intent_records = result.dataset
        provenance["labeling"] = {
            "iterations": result.state.iterations,
            "accuracy_history": result.state.accuracy_history,
            "converged": result.converged,
            "labeled_sizes": result.state.labeled_sizes,
            "unlabeled_left": len(result.unlabeled_ids),
            "provenance_counts": intent_records.provenance_counts(),
        }
        _log(f"labeling loop: {result.state.iterations} iterations, "
             f"accuracy {result.state.accuracy_history[-1]:.4f}, converged={result.converged}")
    elif cfg["intent_source"] == "gold":
        intent_records = LabeledDataset([
            Record(f"g{i}", q.query_id, q.tokens, q.intent, frozenset(), provenance="gold")
            for i, q in enumerate(corpus.queries)
        ])
        provenance["labeling"] = {"mode": "gold", "records": len(intent_records)}
    else:
        raise ConfigError(f"unknown intent source {cfg['intent_source']!r}")

    queries_by_id = corpus.query_by_id()
    commercial_queries = [
        queries_by_id[r.query_id] for r in intent_records if r.intent == COMMERCIAL
    ]
    category_ds, report = label_categories_from_clicks(
        commercial_queries, corpus.clicks, corpus.taxonomy, cfg["rate_threshold"]
    )
    categories_by_qid = {r.query_id: r.categories for r in category_ds}
    provenance["category_labeling"] = {
        "kept": report.kept,
        "dropped_zero_clicks": report.dropped_zero_clicks,
        "dropped_below_threshold": report.dropped_below_threshold,
    }

    joint = []
    dropped_uncategorized = 0
    for n, rec in enumerate(intent_records):
        if rec.intent == COMMERCIAL:
            cats = categories_by_qid.get(rec.query_id)
            if cats is None:
                dropped_uncategorized += 1
                continue
        else:
            cats = frozenset()
        joint.append(Record(f"d{n}", rec.query_id, rec.tokens, rec.intent, cats,
                            provenance=rec.provenance))
    provenance["joint"] = {"records": len(joint), "dropped_uncategorized": dropped_uncategorized}

    dataset = split_dataset(LabeledDataset(joint), cfg["seed"])
    before = dataset.intent_counts()
    dataset = oversample_minority(dataset, cfg["oversample_target"],
                                  np.random.default_rng(cfg["seed"]))
    provenance["oversample"] = {
        "target": cfg["oversample_target"],
        "before": before,
        "after": dataset.intent_counts(),
    }
    provenance["splits"] = {name: len(dataset.split(name)) for name in ("train", "val", "test")}

    write_dataset(dataset, out / "dataset.tsv")
    write_provenance(out / "provenance.json", provenance)
    _log(f"dataset: {len(dataset)} records "
         f"(train {provenance['splits']['train']}, val {provenance['splits']['val']}, "
         f"test {provenance['splits']['test']})")


def _inverse_frequency_alpha(records, num_categories: int) -> np.ndarray:
    counts = np.zeros(num_categories)
    for rec in records:
        for cid in rec.categories:
            counts[cid] += 1
    weights = 1.0 / np.maximum(counts, 1.0)
    return weights * (num_categories / weights.sum())


def cmd_train(cfg: dict) -> None:
    out = Path(cfg["out"])
    _write_run_config(out, "train", cfg)
    corpus_dir = Path(cfg["corpus"])
    queries = {q.query_id: q for q in read_queries(corpus_dir / "queries.tsv")}
    taxonomy = read_taxonomy(corpus_dir / "taxonomy.tsv")
    dataset = read_dataset(cfg["dataset"], queries)
    train_records = dataset.split("train")
    if not train_records:
        raise ConfigError("dataset has no train split")

    vocabulary = Vocabulary.from_token_lists(r.tokens for r in train_records)
    num_categories = len(taxonomy.categories)
    if cfg["alpha_mode"] == "inverse-frequency":
        alpha = _inverse_frequency_alpha(
            [r for r in train_records if r.intent == COMMERCIAL], num_categories
        )
    elif cfg["alpha_mode"] == "uniform":
        alpha = 1.0
    else:
        raise ConfigError(f"unknown alpha mode {cfg['alpha_mode']!r}")

    model_cfg = ModelConfig(
        vocab_size=len(vocabulary),
        num_categories=num_categories,
        embed_dim=cfg["embed_dim"],
        query_len=cfg["query_len"],
        heads=cfg["heads"] if cfg["heads"] else None,
        gamma=cfg["gamma"],
        alpha=alpha,
        beta_category=cfg["beta_category"],
        beta_intent=cfg["beta_intent"],
        dropout=cfg["dropout"],
        category_threshold=cfg["threshold"],
    )
    model = JointMap(model_cfg, vocabulary, seed=cfg["seed"])
    if cfg["vectors"]:
        loaded = load_pretrained_embeddings(model, cfg["vectors"])
        _log(f"loaded {loaded} external word vectors")

    lines = []

    def log_epoch(stat):
        lines.append(stat.as_json())
        _log(f"epoch {stat.epoch}: loss {stat.train_loss:.4f} "
             f"val intent F1 {stat.val_macro_f1_intent:.4f} "
             f"val category F1 {stat.val_macro_f1_category:.4f}")

    report = train_model(model, dataset, epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                         lr=cfg["lr"], seed=cfg["seed"], log=log_epoch)
    model.save(out / "checkpoint.jmap")
    (out / "report.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _log(f"best epoch {report.best_epoch}; checkpoint written")


def _baseline_metrics(dataset, eval_records, num_categories, epochs, lam, seed):
    train_records = dataset.split("train")
    vec = tfidf_fit([r.tokens for r in train_records])
    features = vec.transform_many([r.tokens for r in train_records])
    intent_model = svm_train(features, [r.intent for r in train_records],
                             lam=lam, epochs=epochs, rng=np.random.default_rng([seed, 0]))
    commercial = [r for r in train_records if r.intent == COMMERCIAL]
    category_model = svm_train_multilabel(
        vec.transform_many([r.tokens for r in commercial]),
        [r.categories for r in commercial],
        classes=tuple(range(num_categories)),
        lam=lam,
        epochs=epochs,
        rng=np.random.default_rng([seed, 1]),
    )

    eval_features = vec.transform_many([r.tokens for r in eval_records])
    intent_margins = svm_decision(intent_model, eval_features)
    intent_preds = [intent_model.classes[i] for i in intent_margins.argmax(axis=1)]
    category_margins = svm_decision(category_model, eval_features)

    intent_counts = evaluation.count_predictions(
        intent_preds, [r.intent for r in eval_records], INTENTS
    )
    cat_preds, cat_gold = [], []
    for row, rec in enumerate(eval_records):
        if rec.intent == COMMERCIAL:
            cat_preds.append(frozenset(
                int(c) for c in range(num_categories) if category_margins[row, c] > 0
            ))
            cat_gold.append(rec.categories)
    cat_counts = evaluation.count_predictions(cat_preds, cat_gold,
                                              tuple(range(num_categories)))
    return evaluation.MethodMetrics(
        "tfidf_svm",
        evaluation.f1_macro(intent_counts),
        evaluation.f1_micro(intent_counts),
        evaluation.f1_macro(cat_counts),
        evaluation.f1_micro(cat_counts),
    )


def cmd_eval(cfg: dict) -> None:
    out = Path(cfg["out"])
    _write_run_config(out, "eval", cfg)
    corpus_dir = Path(cfg["corpus"])
    queries = {q.query_id: q for q in read_queries(corpus_dir / "queries.tsv")}
    taxonomy = read_taxonomy(corpus_dir / "taxonomy.tsv")
    dataset = read_dataset(cfg["dataset"], queries)
    records = dataset.split(cfg["split"])
    if not records:
        raise ConfigError(f"dataset split {cfg['split']!r} is empty")

    model = JointMap.load(cfg["checkpoint"])
    scores = evaluate_model(model, records)
    rows = [evaluation.MethodMetrics(
        "jointmap",
        scores["intent_macro"], scores["intent_micro"],
        scores["category_macro"], scores["category_micro"],
    )]
    if cfg["with_baseline"]:
        rows.append(_baseline_metrics(dataset, records, len(taxonomy.categories),
                                      cfg["svm_epochs"], cfg["svm_lambda"], cfg["seed"]))
    evaluation.write_metrics_table(out / "metrics.tsv", rows)
    for row in rows:
        _log(f"{row.method}: intent {row.intent_macro_f1:.4f}/{row.intent_micro_f1:.4f} "
             f"category {row.category_macro_f1:.4f}/{row.category_micro_f1:.4f}")


def cmd_predict(cfg: dict) -> None:
    out = Path(cfg["out"])
    _write_run_config(out, "predict", cfg)
    model = JointMap.load(cfg["checkpoint"])
    if cfg["query"]:
        from .corpus import tokenize

        items = [("q0", cfg["query"], tokenize(cfg["query"]))]
    elif cfg["input"]:
        items = [(q.query_id, q.text, q.tokens) for q in read_queries(cfg["input"])]
    else:
        raise ConfigError("predict needs --query or --input")

    threshold = None if cfg["threshold"] < 0 else cfg["threshold"]
    lines = ["query_id\ttext\tintent\tcategory_ids\tintent_prob\tcategory_probs"]
    for qid, text, tokens in items:
        pred = model.predict(tokens, threshold=threshold)
        cats = ",".join(str(c) for c in sorted(pred.categories))
        intent_prob = float(pred.intent_probabilities[INTENTS.index(pred.intent)])
        probs = ",".join(f"{p:.6f}" for p in pred.category_probabilities)
        lines.append(f"{qid}\t{text}\t{pred.intent}\t{cats}\t{intent_prob:.6f}\t{probs}")
    (out / "predictions.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8",
                                         newline="\n")
    _log(f"scored {len(items)} queries")


_DISPATCH = {
    "generate-corpus": cmd_generate_corpus,
    "build-datasets": cmd_build_datasets,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def _error_kind(exc: Exception) -> str:
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, PermissionError)):
        return "file-error"
    name = type(exc).__name__
    return re.sub(r"(?<!^)(?=[A-Z])", "-", name).lower()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        resolved = _resolve(args)
        _DISPATCH[args.subcommand](resolved)
    except (JointMapError, OSError, json.JSONDecodeError) as exc:
        message = str(exc).replace("\t", " ").replace("\n", " ")
        print(f"error\t{_error_kind(exc)}\t{message}", file=sys.stderr)
        return 1
    return 0


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
