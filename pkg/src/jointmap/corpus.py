"""Synthetic e-commerce query corpus with embedded gold labels.

Generates a product taxonomy, search queries with known intent and
category sets, and a simulated click log. Commercial query text is built
from brand/noun/attribute templates over the taxonomy; non-commercial
text comes from service templates (store hours, installation help,
discounts). A configurable slice of queries is deliberately near the
intent boundary: a commercial query and a non-commercial one that differ
only in a trailing token, e.g. "... repair kit" vs "... repair".

Everything is deterministic under the config seed, and the generator
retains the gold labels so it can act as a perfect labeling oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError

COMMERCIAL = "commercial"
NONCOMMERCIAL = "non-commercial"
INTENTS = (COMMERCIAL, NONCOMMERCIAL)

_CATEGORY_NAMES = [
    "tools", "electrical", "lighting", "appliances", "outdoors", "plumbing",
    "paint", "flooring", "hardware", "garden", "kitchen", "bath", "storage",
    "decor", "heating", "cooling", "windows", "doors", "lumber", "cleaning",
    "safety", "automotive", "roofing", "masonry", "fencing", "millwork",
    "blinds", "rugs", "closet", "laundry", "patio", "grills",
]

_NOUN_BANK = [
    "drill", "saw", "sander", "router", "wrench", "hammer", "screwdriver",
    "pliers", "toolbox", "ladder", "generator", "compressor", "grinder",
    "chisel", "level", "stapler", "clamp", "jigsaw", "refrigerator",
    "dishwasher", "microwave", "oven", "freezer", "washer", "dryer", "range",
    "cooktop", "blender", "mixer", "toaster", "mower", "trimmer", "blower",
    "chainsaw", "tiller", "spreader", "sprinkler", "hose", "wheelbarrow",
    "pruner", "shovel", "rake", "edger", "cultivator", "bulb", "lamp",
    "chandelier", "sconce", "lantern", "dimmer", "floodlight", "spotlight",
    "fixture", "ballast", "outlet", "breaker", "conduit", "wire", "switch",
    "fuse", "charger", "battery", "inverter", "transformer", "faucet",
    "toilet", "sink", "bathtub", "showerhead", "valve", "pipe", "fitting",
    "heater", "pump", "vanity", "primer", "stain", "roller", "brush",
    "sprayer", "caulk", "sealant", "varnish", "lacquer", "tile", "plank",
    "laminate", "carpet", "underlayment", "grout", "mortar", "vinyl",
    "hardwood", "baseboard", "door", "window", "shutter", "awning", "screen",
    "frame", "hinge", "knob", "lockset", "deadbolt", "shelf", "cabinet",
    "rack", "bin", "organizer", "drawer", "hook", "pegboard", "tote",
    "workbench", "fan", "thermostat", "humidifier", "purifier", "filter",
    "duct", "vent", "furnace", "grill", "smoker", "firepit", "heatlamp",
    "mailbox", "gutter", "downspout", "trellis", "planter", "birdbath",
    "gazebo", "pergola", "hammock", "cooler", "tarp", "rope", "chain",
    "padlock", "sawhorse", "dolly", "winch", "jack", "ratchet", "socket",
    "multimeter", "soldering", "vacuum", "polisher", "buffer", "nailer",
    "stapler2", "glue", "epoxy", "putty", "spackle", "insulation", "drywall",
]

_ATTRIBUTE_BANK = [
    "cordless", "compact", "heavy duty", "stainless", "portable", "digital",
    "adjustable", "quiet", "premium", "classic", "smart", "industrial",
    "rechargeable", "foldable", "ergonomic", "waterproof", "wireless",
    "variable speed", "brushless", "dual fuel",
]

_ATTRIBUTE_UNITS = ["volt", "in.", "watt", "gal", "piece", "pack", "amp", "ft"]
_ATTRIBUTE_NUMBERS = [5, 6, 8, 10, 12, 16, 18, 20, 24, 30, 36, 40, 48, 60, 72, 100]

_BRAND_PREFIXES = [
    "vol", "dur", "max", "pro", "tru", "ever", "prime", "forge", "apex",
    "iron", "north", "summit", "delta", "titan", "nova", "atlas", "cedar",
    "granite", "rapid", "solid",
]
_BRAND_SUFFIXES = [
    "tek", "craft", "works", "line", "core", "tool", "ware", "built", "land",
    "point", "gear", "mark", "flow", "grip", "way", "tech", "co", "trade",
    "bond", "haus",
]

# Service-style templates for non-commercial queries; {noun} and {brand}
# slots are filled from the taxonomy vocabulary.
_SERVICE_TEMPLATES = [
    "where is my shipped order",
    "how to install my {noun}",
    "how to install {noun} yourself",
    "cost to rent a {noun}",
    "{noun} rental near me",
    "{noun} store hours",
    "store hours near me",
    "military discount",
    "{brand} military discount",
    "return policy for {noun}",
    "how to fix my {noun}",
    "track my order status",
    "{brand} warranty registration",
    "{noun} installation guide",
    "schedule {noun} installation",
    "gift card balance",
    "how to replace a {noun}",
    "{noun} repair service",
]

# Trailing-token pairs that straddle the intent boundary: the first suffix
# makes a service query, the second a product query.
_BOUNDARY_SUFFIXES = [("installation", "installation kit"), ("repair", "repair kit")]


def service_vocabulary() -> frozenset:
    """Tokens that mark service intent (fixed template words and boundary
    suffixes), useful for grouping non-commercial queries by intent type."""
    words = set()
    for template in _SERVICE_TEMPLATES:
        for token in template.split():
            if not (token.startswith("{") and token.endswith("}")):
                words.add(token)
    for service_suffix, product_suffix in _BOUNDARY_SUFFIXES:
        words.update(service_suffix.split())
        words.update(product_suffix.split())
    return frozenset(words)


def tokenize(text: str) -> tuple:
    """Lowercase whitespace tokenization; query text is already clean."""
    return tuple(text.lower().split())


@dataclass(frozen=True)
class Category:
    category_id: int
    name: str


@dataclass(frozen=True)
class Product:
    pid: str
    tokens: tuple
    categories: tuple


@dataclass
class Taxonomy:
    categories: list
    products: list

    def __post_init__(self):
        self.by_pid = {p.pid: p for p in self.products}
        ids = {c.category_id for c in self.categories}
        if len(ids) != len(self.categories):
            raise DataError("duplicate category ids in taxonomy")
        for p in self.products:
            if not p.categories:
                raise DataError(f"product {p.pid} maps to no category")
            for cid in p.categories:
                if cid not in ids:
                    raise DataError(f"product {p.pid} references unknown category {cid}")

    def category_ids(self):
        return [c.category_id for c in self.categories]


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str
    tokens: tuple
    intent: str
    categories: frozenset
    ambiguous: bool = False
    primary_category: int | None = None

    def __post_init__(self):
        if not self.tokens:
            raise DataError(f"query {self.query_id} has no tokens")
        if self.intent == NONCOMMERCIAL and self.categories:
            raise DataError(f"non-commercial query {self.query_id} carries categories")


@dataclass(frozen=True)
class ClickRecord:
    query_id: str
    pid: str
    count: int


@dataclass
class ClickLog:
    records: list

    def by_query(self):
        grouped = {}
        for rec in self.records:
            grouped.setdefault(rec.query_id, []).append(rec)
        return grouped


@dataclass
class CorpusConfig:
    """Knobs for the synthetic corpus.

    Defaults mirror the full production scale; tests and the desk pipeline
    pass smaller explicit values (8 categories, 5k queries).

    Secondary categories are compositional: every brand belongs to one of
    ``brand_groups`` product lines, and a (primary category, brand group)
    table decides which extra categories a product carries. The mapping is
    deterministic but genuinely interactive, so it cannot be read off
    single tokens, and most query templates keep brand and noun apart.
    """

    num_categories: int = 32
    vocab_size: int = 2000
    num_queries: int = 195_000
    noncommercial_fraction: float = 0.015
    skew: float = 1.0
    seed: int = 0
    ambiguity_rate: float = 0.05
    click_noise: float = 0.0
    products_per_category: int = 6
    min_clicks: int = 8
    max_clicks: int = 40
    multi_category_rate: float = 0.45
    brand_groups: int = 3

    def validate(self):
        if self.num_categories < 1 or self.num_queries < 1:
            raise ConfigError("category and query counts must be >= 1")
        if self.products_per_category < 1:
            raise ConfigError("need at least one product per category")
        for name in ("noncommercial_fraction", "ambiguity_rate", "click_noise", "multi_category_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.min_clicks < 1 or self.max_clicks < self.min_clicks:
            raise ConfigError("click count range is invalid")
        if self.brand_groups < 1:
            raise ConfigError("brand_groups must be >= 1")
        if self.vocab_size < 60:
            raise ConfigError(
                f"vocabulary size {self.vocab_size} is too small for template instantiation"
            )


@dataclass
class Corpus:
    taxonomy: Taxonomy
    queries: list
    clicks: ClickLog

    def oracle(self) -> "CorpusOracle":
        return CorpusOracle(self.queries)

    def query_by_id(self):
        return {q.query_id: q for q in self.queries}


class CorpusOracle:
    """Perfect labeler backed by the generator's gold labels.

    Stands in for human annotation: every lookup returns the gold intent
    and gold category set for a generated query.
    """

    def __init__(self, queries):
        self._gold = {q.query_id: (q.intent, q.categories) for q in queries}

    def label(self, query_id: str):
        try:
            return self._gold[query_id]
        except KeyError:
            raise DataError(f"unknown query id {query_id!r}") from None

    def __contains__(self, query_id):
        return query_id in self._gold

    def __len__(self):
        return len(self._gold)


def _quota_counts(weights, total: int) -> np.ndarray:
    """Integer allocation of `total` proportional to weights.

    Largest-remainder rounding; for strictly decreasing weights the counts
    are non-increasing.
    """
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    raw = w * total
    base = np.floor(raw).astype(int)
    leftover = total - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:leftover]] += 1
    return base


def _build_pools(cfg: CorpusConfig, rng: np.random.Generator):
    budget = cfg.vocab_size
    # Few brands, each spanning many products, and small per-category noun
    # pools that get reused across products: single tokens then never key a
    # product on their own.
    n_brands = max(8, min(16, budget // 25))
    n_attrs = max(12, budget // 6)
    per_cat = max(2, -(-cfg.products_per_category // 8))
    n_nouns = per_cat * cfg.num_categories
    if n_brands + n_attrs + n_nouns > 2 * budget:
        raise ConfigError(
            f"vocabulary size {cfg.vocab_size} too small for {cfg.num_categories} "
            f"categories with {cfg.products_per_category} products each"
        )

    brands = []
    for pre in _BRAND_PREFIXES:
        for suf in _BRAND_SUFFIXES:
            brands.append(pre + suf)
    extra = 0
    while len(brands) < n_brands:
        brands.append(f"brandco{extra}")
        extra += 1
    brands = [brands[i] for i in rng.permutation(len(brands))[:n_brands]]

    attrs = list(_ATTRIBUTE_BANK)
    for unit in _ATTRIBUTE_UNITS:
        for num in _ATTRIBUTE_NUMBERS:
            attrs.append(f"{num} {unit}")
    attrs = [attrs[i] for i in rng.permutation(len(attrs))[:n_attrs]]

    nouns = list(_NOUN_BANK)
    extra = 0
    while len(nouns) < n_nouns:
        nouns.append(f"item{extra}")
        extra += 1
    nouns = [nouns[i] for i in rng.permutation(len(nouns))[:n_nouns]]
    noun_pools = [nouns[i * per_cat : (i + 1) * per_cat] for i in range(cfg.num_categories)]

    names = list(_CATEGORY_NAMES)
    while len(names) < cfg.num_categories:
        names.append(f"category{len(names)}")
    return brands, attrs, noun_pools, names[: cfg.num_categories]


def _extras_table(cfg, rng):
    """Extra categories per (primary category, brand group) cell.

    Extras are drawn with the same power-law bias as primaries, so rare
    categories stay rare instead of picking up secondary support from
    frequent ones.
    """
    table = []
    for primary in range(cfg.num_categories):
        row = []
        others = [c for c in range(cfg.num_categories) if c != primary]
        weights = np.array([(c + 1.0) ** (-cfg.skew) for c in others])
        weights = weights / weights.sum() if others else weights
        for _group in range(cfg.brand_groups):
            extras = ()
            if others and rng.random() < cfg.multi_category_rate:
                count = 2 if (len(others) > 1 and rng.random() < 0.33) else 1
                picks = rng.choice(len(others), size=count, replace=False, p=weights)
                extras = tuple(sorted(others[int(i)] for i in np.atleast_1d(picks)))
            row.append(extras)
        table.append(row)
    return table


def _build_taxonomy(cfg, rng, brands, noun_pools, attrs, names):
    categories = [Category(i, names[i]) for i in range(cfg.num_categories)]
    brand_group = {brand: int(rng.integers(cfg.brand_groups)) for brand in brands}
    extras_table = _extras_table(cfg, rng)
    products = []
    structured = []
    used_keys = set()
    pid_no = 0
    for cid in range(cfg.num_categories):
        pool = noun_pools[cid]
        for _ in range(cfg.products_per_category):
            for _attempt in range(200):
                brand = brands[rng.integers(len(brands))]
                noun = pool[rng.integers(len(pool))]
                if (brand, noun) not in used_keys:
                    break
            else:
                raise ConfigError("vocabulary too small to build distinct products")
            used_keys.add((brand, noun))
            attr = attrs[rng.integers(len(attrs))]
            cats = (cid,) + extras_table[cid][brand_group[brand]]
            tokens = tokenize(f"{attr} {brand} {noun}")
            products.append(Product(f"p{pid_no}", tokens, cats))
            structured.append({"pid": f"p{pid_no}", "brand": brand, "noun": noun, "attr": attr, "primary": cid})
            pid_no += 1
    return Taxonomy(categories, products), structured


# Brand and noun stay non-adjacent in most templates, so category rules
# keyed on the (brand, noun) pair are not readable from word bigrams.
_COMMERCIAL_TEMPLATES = [
    "{brand} {attr} {noun}",
    "{brand} {attr} {noun}",
    "{noun} {attr} {brand}",
    "{attr} {brand} {noun}",
    "{brand} {noun}",
]


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Build taxonomy, labeled queries, and a click log from the config.

    Deterministic under ``cfg.seed``. Commercial query counts follow a
    power-law across categories (exponent ``cfg.skew``) realized with exact
    quota allocation, so category 0 is always the most frequent. The
    non-commercial share of the corpus equals
    ``round(num_queries * noncommercial_fraction)`` exactly.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    brands, attrs, noun_pools, names = _build_pools(cfg, rng)
    taxonomy, structured = _build_taxonomy(cfg, rng, brands, noun_pools, attrs, names)
    by_primary = {}
    for info in structured:
        by_primary.setdefault(info["primary"], []).append(info)

    total = cfg.num_queries
    nc_total = int(round(total * cfg.noncommercial_fraction))
    comm_total = total - nc_total
    amb_total = int(round(total * cfg.ambiguity_rate))
    amb_nc = min(int(round(amb_total * cfg.noncommercial_fraction)), nc_total)
    amb_comm = min(amb_total - amb_nc, comm_total)

    weights = [(i + 1.0) ** (-cfg.skew) for i in range(cfg.num_categories)]
    quotas = _quota_counts(weights, comm_total)

    drafts = []
    for cid, quota in enumerate(quotas):
        pool = by_primary[cid]
        for _ in range(int(quota)):
            info = pool[rng.integers(len(pool))]
            template = _COMMERCIAL_TEMPLATES[rng.integers(len(_COMMERCIAL_TEMPLATES))]
            # Qualifiers vary per query, not per product, so they carry no
            # category signal of their own.
            attr = attrs[rng.integers(len(attrs))]
            text = template.format(attr=attr, brand=info["brand"], noun=info["noun"])
            drafts.append({"kind": "commercial", "info": info, "text": text, "primary": cid, "ambiguous": False})

    if amb_comm:
        chosen = rng.choice(len(drafts), size=amb_comm, replace=False)
        for i in np.atleast_1d(chosen):
            draft = drafts[int(i)]
            info = draft["info"]
            pair = _BOUNDARY_SUFFIXES[rng.integers(len(_BOUNDARY_SUFFIXES))]
            draft["text"] = f"{info['brand']} {info['noun']} {pair[1]}"
            draft["ambiguous"] = True

    for _ in range(nc_total - amb_nc):
        template = _SERVICE_TEMPLATES[rng.integers(len(_SERVICE_TEMPLATES))]
        info = structured[rng.integers(len(structured))]
        text = template.format(noun=info["noun"], brand=info["brand"])
        drafts.append({"kind": "service", "text": text, "ambiguous": False})

    for _ in range(amb_nc):
        info = structured[rng.integers(len(structured))]
        pair = _BOUNDARY_SUFFIXES[rng.integers(len(_BOUNDARY_SUFFIXES))]
        text = f"{info['brand']} {info['noun']} {pair[0]}"
        drafts.append({"kind": "service", "text": text, "ambiguous": True})

    order = rng.permutation(len(drafts))
    queries = []
    click_counts = {}
    product_count = len(taxonomy.products)
    for qid_no, idx in enumerate(order):
        draft = drafts[int(idx)]
        qid = f"q{qid_no}"
        if draft["kind"] == "commercial":
            info = draft["info"]
            gold = frozenset(taxonomy.by_pid[info["pid"]].categories)
            queries.append(
                Query(qid, draft["text"], tokenize(draft["text"]), COMMERCIAL, gold,
                      ambiguous=draft["ambiguous"], primary_category=draft["primary"])
            )
            total_clicks = int(rng.integers(cfg.min_clicks, cfg.max_clicks + 1))
            noise_clicks = int(round(total_clicks * cfg.click_noise))
            target_clicks = total_clicks - noise_clicks
            if target_clicks == 0:
                target_clicks, noise_clicks = 1, total_clicks - 1
            click_counts[(qid, info["pid"])] = target_clicks
            remaining = noise_clicks
            while remaining > 0:
                other = taxonomy.products[int(rng.integers(product_count))]
                if other.pid == info["pid"]:
                    continue
                chunk = int(rng.integers(1, remaining + 1))
                key = (qid, other.pid)
                click_counts[key] = click_counts.get(key, 0) + chunk
                remaining -= chunk
        else:
            queries.append(
                Query(qid, draft["text"], tokenize(draft["text"]), NONCOMMERCIAL,
                      frozenset(), ambiguous=draft["ambiguous"])
            )

    records = [ClickRecord(qid, pid, count) for (qid, pid), count in click_counts.items()]
    return Corpus(taxonomy, queries, ClickLog(records))


# ------------------------------------------------------------------ file io

TAXONOMY_FILE = "taxonomy.tsv"
QUERIES_FILE = "queries.tsv"
CLICKS_FILE = "clicks.tsv"

_CATEGORY_HEADER = "category_id\tname"
_PRODUCT_HEADER = "pid\ttokens\tcategory_ids"
_QUERY_HEADER = "query_id\ttext\tintent\tcategory_ids"
_CLICK_HEADER = "query_id\tpid\tcount"


def write_corpus(corpus: Corpus, out_dir) -> None:
    """Persist the corpus as three UTF-8 TSV files with LF endings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    lines = [_CATEGORY_HEADER]
    for cat in corpus.taxonomy.categories:
        lines.append(f"{cat.category_id}\t{cat.name}")
    lines.append(_PRODUCT_HEADER)
    for prod in corpus.taxonomy.products:
        cats = ",".join(str(c) for c in prod.categories)
        lines.append(f"{prod.pid}\t{' '.join(prod.tokens)}\t{cats}")
    (out / TAXONOMY_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    lines = [_QUERY_HEADER]
    for q in corpus.queries:
        cats = ",".join(str(c) for c in sorted(q.categories))
        lines.append(f"{q.query_id}\t{q.text}\t{q.intent}\t{cats}")
    (out / QUERIES_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    lines = [_CLICK_HEADER]
    for rec in sorted(corpus.clicks.records, key=lambda r: (int(r.query_id[1:]), r.pid)):
        lines.append(f"{rec.query_id}\t{rec.pid}\t{rec.count}")
    (out / CLICKS_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _rows(path: Path, expected_header: str):
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ParseError(path, 0, "file not found") from None
    lines = text.split("\n")
    if not lines or lines[0] != expected_header:
        raise ParseError(path, 1, f"expected header {expected_header!r}")
    return lines


def read_taxonomy(path) -> Taxonomy:
    path = Path(path)
    lines = _rows(path, _CATEGORY_HEADER)
    categories, products = [], []
    in_products = False
    for no, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        if line == _PRODUCT_HEADER:
            in_products = True
            continue
        parts = line.split("\t")
        if not in_products:
            if len(parts) != 2:
                raise ParseError(path, no, f"expected 2 columns, got {len(parts)}")
            try:
                categories.append(Category(int(parts[0]), parts[1]))
            except ValueError:
                raise ParseError(path, no, f"bad category id {parts[0]!r}") from None
        else:
            if len(parts) != 3:
                raise ParseError(path, no, f"expected 3 columns, got {len(parts)}")
            try:
                cats = tuple(int(c) for c in parts[2].split(",") if c)
            except ValueError:
                raise ParseError(path, no, f"bad category ids {parts[2]!r}") from None
            products.append(Product(parts[0], tokenize(parts[1]), cats))
    if not in_products:
        raise ParseError(path, len(lines), "missing product section")
    return Taxonomy(categories, products)


def read_queries(path) -> list:
    path = Path(path)
    lines = _rows(path, _QUERY_HEADER)
    queries = []
    for no, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(path, no, f"expected 4 columns, got {len(parts)}")
        qid, text, intent, cats_raw = parts
        if intent not in INTENTS:
            raise ParseError(path, no, f"unknown intent {intent!r}")
        try:
            cats = frozenset(int(c) for c in cats_raw.split(",") if c)
        except ValueError:
            raise ParseError(path, no, f"bad category ids {cats_raw!r}") from None
        queries.append(Query(qid, text, tokenize(text), intent, cats))
    return queries


def read_clicks(path) -> ClickLog:
    path = Path(path)
    lines = _rows(path, _CLICK_HEADER)
    records = []
    for no, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(path, no, f"expected 3 columns, got {len(parts)}")
        try:
            count = int(parts[2])
        except ValueError:
            raise ParseError(path, no, f"bad click count {parts[2]!r}") from None
        if count < 0:
            raise ParseError(path, no, "negative click count")
        records.append(ClickRecord(parts[0], parts[1], count))
    return ClickLog(records)


def read_corpus(in_dir) -> Corpus:
    base = Path(in_dir)
    return Corpus(
        taxonomy=read_taxonomy(base / TAXONOMY_FILE),
        queries=read_queries(base / QUERIES_FILE),
        clicks=read_clicks(base / CLICKS_FILE),
    )
