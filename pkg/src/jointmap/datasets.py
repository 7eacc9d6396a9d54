"""Dataset construction: distant-supervision intent labeling with active
learning, click-rate category labeling, minority oversampling, and the
stratified 70/10/20 split.

The active-learning loop grows a labeled set from a small seed: expand by
KNN label voting over tf*idf vectors, train the linear-SVM scorer, pick the
lowest-confidence pool queries, send them to the oracle, merge, and check
held-out accuracy against the stop threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baseline import TfIdfVectorizer, binary_margin, svm_train
from .corpus import COMMERCIAL, INTENTS, NONCOMMERCIAL, service_vocabulary
from .errors import ConfigError, DataError, ParseError

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
UNASSIGNED = "unassigned"


@dataclass(frozen=True)
class Record:
    """One labeled query; oversampling clones share query_id, not record_id."""

    record_id: str
    query_id: str
    tokens: tuple
    intent: str
    categories: frozenset
    split: str = UNASSIGNED
    provenance: str = "seed"

    def __post_init__(self):
        if self.intent not in INTENTS:
            raise DataError(f"unknown intent {self.intent!r}")
        if not self.tokens:
            raise DataError(f"record {self.record_id} has no tokens")


@dataclass
class LabeledDataset:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def intent_counts(self) -> dict:
        counts = {}
        for r in self.records:
            counts[r.intent] = counts.get(r.intent, 0) + 1
        return counts

    def provenance_counts(self) -> dict:
        counts = {}
        for r in self.records:
            counts[r.provenance] = counts.get(r.provenance, 0) + 1
        return counts


def _quota(fractions, total: int):
    raw = np.asarray(fractions) * total
    base = np.floor(raw).astype(int)
    leftover = total - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:leftover]] += 1
    return base


def split_dataset(ds: LabeledDataset, seed: int) -> LabeledDataset:
    """Assign 70/10/20 split tags, stratified by intent label.

    Within each intent stratum the split sizes are exact to within one
    record; assignment is deterministic under the seed.
    """
    if len(ds) < 10:
        raise ConfigError(f"need at least 10 records to split, got {len(ds)}")
    if any(r.split != UNASSIGNED for r in ds):
        raise DataError("split_dataset expects unassigned records")
    rng = np.random.default_rng(seed)
    out = list(ds.records)
    by_intent = {}
    for pos, rec in enumerate(out):
        by_intent.setdefault(rec.intent, []).append(pos)
    for intent in sorted(by_intent):
        positions = by_intent[intent]
        order = rng.permutation(len(positions))
        counts = _quota(SPLIT_FRACTIONS, len(positions))
        cursor = 0
        for split_name, count in zip(SPLITS, counts):
            for j in order[cursor : cursor + count]:
                pos = positions[int(j)]
                out[pos] = replace(out[pos], split=split_name)
            cursor += count
    return LabeledDataset(out)


def oversample_minority(ds: LabeledDataset, target_ratio: float, rng) -> LabeledDataset:
    """Duplicate non-commercial train records until they reach target_ratio.

    Only the train split changes; duplicates get fresh record ids but keep
    their query id. Sampling is uniform with replacement.
    """
    if not 0.0 <= target_ratio < 1.0:
        raise ConfigError(f"oversample target must be in [0, 1), got {target_ratio}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    train = ds.split("train")
    minority = [r for r in train if r.intent == NONCOMMERCIAL]
    majority_n = len(train) - len(minority)
    if not minority or majority_n == 0:
        raise ConfigError("oversampling needs both intents in the train split")
    if len(minority) / len(train) >= target_ratio:
        return LabeledDataset(list(ds.records))
    needed = int(np.ceil(target_ratio * majority_n / (1.0 - target_ratio))) - len(minority)
    picks = rng.integers(0, len(minority), size=needed)
    clones = [
        replace(minority[int(i)], record_id=f"{minority[int(i)].record_id}-os{n}",
                provenance="oversample")
        for n, i in enumerate(picks)
    ]
    return LabeledDataset(list(ds.records) + clones)


# ----------------------------------------------------- category labeling


@dataclass
class CategoryLabelReport:
    kept: int = 0
    dropped_zero_clicks: int = 0
    dropped_below_threshold: int = 0


def label_categories_from_clicks(queries, clicks, taxonomy, rate_threshold: float):
    """Attach every category whose share of a query's clicks exceeds the
    threshold.

    A click on a product counts toward each of the product's categories;
    the denominator is the query's total click count, so the threshold is
    comparable across queries of different popularity. The comparison is
    exact (integer cross-multiplication), strictly greater-than. Queries
    with no clicks, or whose every category rate falls at or below the
    threshold, are dropped and counted in the report.
    """
    if not 0.0 <= rate_threshold <= 1.0:
        raise ConfigError(f"rate threshold must be in [0, 1], got {rate_threshold}")
    r_num, r_den = float(rate_threshold).as_integer_ratio()
    grouped = clicks.by_query()
    report = CategoryLabelReport()
    records = []
    for idx, query in enumerate(queries):
        rows = grouped.get(query.query_id, ())
        total = sum(rec.count for rec in rows)
        if total == 0:
            report.dropped_zero_clicks += 1
            continue
        per_category = {}
        for rec in rows:
            product = taxonomy.by_pid.get(rec.pid)
            if product is None:
                raise DataError(f"click log references unknown product {rec.pid!r}")
            for cid in product.categories:
                per_category[cid] = per_category.get(cid, 0) + rec.count
        chosen = frozenset(
            cid for cid, clicked in per_category.items() if clicked * r_den > r_num * total
        )
        if not chosen:
            report.dropped_below_threshold += 1
            continue
        report.kept += 1
        records.append(
            Record(f"c{idx}", query.query_id, query.tokens, COMMERCIAL, chosen,
                   provenance="clicks")
        )
    return LabeledDataset(records), report


# ------------------------------------------------------------- knn expand


def expand_by_knn(labeled: LabeledDataset, pool, k: int, agreement: float,
                  vectorizer: TfIdfVectorizer | None = None):
    """Label pool queries whose k nearest labeled neighbors agree enough.

    Neighbors are found by cosine distance over tf*idf vectors. A pool
    query is adopted (provenance "knn") when the most common neighbor label
    reaches the agreement fraction; everything else stays unlabeled.
    Neighbors with zero similarity (no shared terms) abstain rather than
    vote, which keeps arbitrary distance-1 ties from certifying a label.
    Returns the grown dataset and the list of newly added records.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if not labeled.records:
        raise ConfigError("expand_by_knn needs a non-empty labeled set")
    pool = list(pool)
    if not pool:
        return LabeledDataset(list(labeled.records)), []
    if vectorizer is None:
        vectorizer = TfIdfVectorizer().fit(
            [r.tokens for r in labeled.records] + [q.tokens for q in pool]
        )
    labeled_matrix = vectorizer.transform_many([r.tokens for r in labeled.records])
    labels = [r.intent for r in labeled.records]
    k_eff = min(k, len(labels))

    added = []
    chunk_size = 512
    next_id = len(labeled.records)
    for start in range(0, len(pool), chunk_size):
        chunk = pool[start : start + chunk_size]
        q_matrix = vectorizer.transform_many([q.tokens for q in chunk])
        sims = np.asarray((q_matrix @ labeled_matrix.T).todense())
        dists = 1.0 - sims
        if k_eff < len(labels):
            part = np.argpartition(dists, k_eff - 1, axis=1)[:, :k_eff]
        else:
            part = np.tile(np.arange(len(labels)), (len(chunk), 1))
        for row, query in enumerate(chunk):
            neighbor_ids = part[row]
            votes = {}
            for i in neighbor_ids:
                if sims[row, int(i)] <= 0.0:
                    continue
                lab = labels[int(i)]
                votes[lab] = votes.get(lab, 0) + 1
            if not votes:
                continue
            best_label, best_count = max(votes.items(), key=lambda kv: (kv[1], kv[0]))
            if best_count / k_eff >= agreement:
                added.append(
                    Record(f"k{next_id}", query.query_id, query.tokens, best_label,
                           frozenset(), provenance="knn")
                )
                next_id += 1
    return LabeledDataset(list(labeled.records) + added), added


def find_uncertain_samples(margins, threshold: float) -> list:
    """Query ids whose |margin| is strictly inside the threshold band,
    sorted by ascending |margin| (ties by id)."""
    items = margins.items() if hasattr(margins, "items") else margins
    picked = [(abs(m), qid) for qid, m in items if abs(m) < threshold]
    picked.sort()
    return [qid for _, qid in picked]


def build_seed_records(queries, per_class: int, seed: int = 0):
    """Curate a small oracle-labeled seed set covering service intent types.

    The labeling loop assumes its seed covers the expected non-commercial
    intents, so non-commercial picks are spread across distinct service-word
    signatures before filling the quota at random; commercial picks are a
    plain random sample. Returns (seed_records, remaining_pool).
    """
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    service_words = service_vocabulary()
    order = rng.permutation(len(queries))
    noncommercial = [queries[int(i)] for i in order
                     if queries[int(i)].intent == NONCOMMERCIAL]
    commercial = [queries[int(i)] for i in order if queries[int(i)].intent == COMMERCIAL]
    if not noncommercial or not commercial:
        raise ConfigError("seed construction needs both intents in the query pool")

    by_signature = {}
    for q in noncommercial:
        signature = frozenset(q.tokens) & service_words
        by_signature.setdefault(signature, []).append(q)
    picked = []
    buckets = [by_signature[sig] for sig in sorted(by_signature, key=sorted)]
    depth = 0
    while len(picked) < per_class and any(depth < len(b) for b in buckets):
        for bucket in buckets:
            if depth < len(bucket) and len(picked) < per_class:
                picked.append(bucket[depth])
        depth += 1
    picked.extend(commercial[:per_class])

    chosen_ids = {q.query_id for q in picked}
    records = [
        Record(f"s{n}", q.query_id, q.tokens, q.intent, q.categories, provenance="seed")
        for n, q in enumerate(picked)
    ]
    pool = [q for q in queries if q.query_id not in chosen_ids]
    return records, pool


# --------------------------------------------------------- active learning


@dataclass
class ActiveLearningState:
    """Progress of the labeling loop; history length equals iterations."""

    stop_threshold: float
    margin_band: float
    iterations: int = 0
    accuracy_history: list = field(default_factory=list)
    labeled_sizes: list = field(default_factory=list)
    uncertain_history: list = field(default_factory=list)
    test_size: int = 0


@dataclass
class ActiveLabelingResult:
    dataset: LabeledDataset
    state: ActiveLearningState
    converged: bool
    unlabeled_ids: list


def run_active_labeling(
    seed_records,
    pool,
    oracle,
    stop_threshold: float = 0.95,
    max_iters: int = 10,
    k: int = 5,
    agreement: float = 0.8,
    margin_band: float = 0.25,
    test_fraction: float = 0.2,
    svm_lambda: float = 1e-4,
    svm_epochs: int = 20,
    seed: int = 0,
    include_holdout: bool = True,
) -> ActiveLabelingResult:
    """Grow an intent-labeled dataset from a seed until the scorer is good.

    A held-out test set is carved from the pool (oracle-labeled) before the
    first iteration and stays fixed. Each iteration expands the labeled set
    by KNN over the remaining pool, trains the tf*idf SVM scorer on it, and
    sends the lowest-confidence samples (|margin| below ``margin_band``
    times the mean |margin|) to the oracle. Uncertain pool queries join the
    labeled set; uncertain KNN-adopted records get their labels replaced in
    place, so bad distant-supervision labels can be corrected without ever
    shrinking the set. Held-out accuracy is then measured; the loop stops
    when it reaches ``stop_threshold``. Hitting ``max_iters`` first returns
    the best-accuracy snapshot with ``converged=False`` instead of raising.
    """
    seed_records = list(seed_records)
    seed_intents = {r.intent for r in seed_records}
    if len(seed_intents) < 2:
        raise ConfigError("seed set must contain both intent classes")
    rng = np.random.default_rng(seed)

    pool = list(pool)
    order = rng.permutation(len(pool))
    test_n = int(round(len(pool) * test_fraction))
    test_queries = [pool[int(i)] for i in order[:test_n]]
    work_pool = {pool[int(i)].query_id: pool[int(i)] for i in order[test_n:]}

    holdout_records = []
    test_gold = []
    for n, q in enumerate(test_queries):
        intent, cats = oracle.label(q.query_id)
        test_gold.append(intent)
        holdout_records.append(
            Record(f"h{n}", q.query_id, q.tokens, intent, cats, provenance="holdout")
        )

    all_tokens = [r.tokens for r in seed_records]
    all_tokens.extend(q.tokens for q in pool)
    vectorizer = TfIdfVectorizer().fit(all_tokens)
    test_matrix = vectorizer.transform_many([q.tokens for q in test_queries])

    labeled = LabeledDataset(list(seed_records))
    state = ActiveLearningState(stop_threshold=stop_threshold, margin_band=margin_band,
                                test_size=test_n)
    converged = False
    best_accuracy = -1.0
    best_records = list(labeled.records)
    oracle_no = 0
    for iteration in range(1, max_iters + 1):
        labeled, _added = expand_by_knn(labeled, list(work_pool.values()), k, agreement,
                                        vectorizer)
        for rec in labeled.records:
            work_pool.pop(rec.query_id, None)

        features = vectorizer.transform_many([r.tokens for r in labeled.records])
        scorer = svm_train(features, [r.intent for r in labeled.records],
                           lam=svm_lambda, epochs=svm_epochs,
                           rng=np.random.default_rng([seed, iteration]))

        uncertain_ids = []
        knn_positions = {
            rec.query_id: pos
            for pos, rec in enumerate(labeled.records)
            if rec.provenance == "knn"
        }
        candidate_tokens = [q.tokens for q in work_pool.values()]
        candidate_ids = list(work_pool)
        for qid, pos in knn_positions.items():
            candidate_ids.append(qid)
            candidate_tokens.append(labeled.records[pos].tokens)
        if candidate_ids:
            margins = binary_margin(scorer, vectorizer.transform_many(candidate_tokens))
            band = margin_band * float(np.mean(np.abs(margins)))
            uncertain_ids = find_uncertain_samples(dict(zip(candidate_ids, margins)), band)
            # Audit adopted records the scorer itself disputes: a KNN label
            # on the wrong side of the margin is suspect even when confident.
            picked = set(uncertain_ids)
            n_pool = len(work_pool)
            for offset, qid in enumerate(candidate_ids[n_pool:]):
                rec = labeled.records[knn_positions[qid]]
                margin = margins[n_pool + offset]
                predicted = scorer.classes[1] if margin > 0 else scorer.classes[0]
                if predicted != rec.intent and qid not in picked:
                    picked.add(qid)
                    uncertain_ids.append(qid)
            for qid in uncertain_ids:
                intent, cats = oracle.label(qid)
                if qid in work_pool:
                    query = work_pool.pop(qid)
                    labeled.records.append(
                        Record(f"o{oracle_no}", qid, query.tokens, intent, cats,
                               provenance="oracle")
                    )
                    oracle_no += 1
                else:
                    pos = knn_positions[qid]
                    labeled.records[pos] = replace(
                        labeled.records[pos], intent=intent, categories=cats,
                        provenance="oracle"
                    )

        if test_n:
            test_margins = binary_margin(scorer, test_matrix)
            preds = [scorer.classes[1] if m > 0 else scorer.classes[0] for m in test_margins]
            accuracy = float(np.mean([p == g for p, g in zip(preds, test_gold)]))
        else:
            accuracy = 1.0
        state.iterations = iteration
        state.accuracy_history.append(accuracy)
        state.labeled_sizes.append(len(labeled))
        state.uncertain_history.append(uncertain_ids)
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_records = list(labeled.records)
        if accuracy >= stop_threshold:
            converged = True
            break

    final = list(labeled.records) if converged else best_records
    if include_holdout:
        final = final + holdout_records
    return ActiveLabelingResult(
        dataset=LabeledDataset(final),
        state=state,
        converged=converged,
        unlabeled_ids=sorted(work_pool),
    )


# ------------------------------------------------------------------ file io

DATASET_FILE = "dataset.tsv"
_DATASET_HEADER = "record_id\tquery_id\tsplit\tintent\tcategory_ids"


def write_dataset(ds: LabeledDataset, path) -> None:
    lines = [_DATASET_HEADER]
    for r in ds.records:
        cats = ",".join(str(c) for c in sorted(r.categories))
        lines.append(f"{r.record_id}\t{r.query_id}\t{r.split}\t{r.intent}\t{cats}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_dataset(path, queries_by_id) -> LabeledDataset:
    """Load dataset rows, joining token lists from the corpus queries."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").split("\n")
    except FileNotFoundError:
        raise ParseError(path, 0, "file not found") from None
    if not lines or lines[0] != _DATASET_HEADER:
        raise ParseError(path, 1, f"expected header {_DATASET_HEADER!r}")
    records = []
    for no, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ParseError(path, no, f"expected 5 columns, got {len(parts)}")
        record_id, query_id, split, intent, cats_raw = parts
        if split not in SPLITS + (UNASSIGNED,):
            raise ParseError(path, no, f"unknown split {split!r}")
        query = queries_by_id.get(query_id)
        if query is None:
            raise ParseError(path, no, f"query id {query_id!r} not in corpus")
        try:
            cats = frozenset(int(c) for c in cats_raw.split(",") if c)
        except ValueError:
            raise ParseError(path, no, f"bad category ids {cats_raw!r}") from None
        records.append(Record(record_id, query_id, query.tokens, intent, cats, split))
    return LabeledDataset(records)


def write_provenance(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
