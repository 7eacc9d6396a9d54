"""Word n-gram tf*idf features, a linear one-vs-rest SVM, and exact
cosine KNN.

The SVM is trained with projected stochastic subgradient descent on the
L2-regularized hinge loss (lazy weight scaling, bias handled through a
constant augmented feature). Training is deterministic under the supplied
seed. Models persist to a little-endian binary format with magic
``JMSVM1``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import ConfigError, DataError, ParseError, ShapeError

SVM_MAGIC = b"JMSVM1"


def ngram_terms(tokens, max_n: int = 2):
    """Unigram and bigram terms for a token sequence."""
    terms = list(tokens)
    for n in range(2, max_n + 1):
        terms.extend(" ".join(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
    return terms


class TfIdfVectorizer:
    """tf*idf over word n-grams (default 1-2) with smoothed idf.

    idf = ln((1 + N) / (1 + df)) + 1 and each transformed query is
    L2-normalized, so outputs are either unit vectors or the zero vector
    (all terms out of vocabulary). Vocabulary order is lexicographic.
    """

    def __init__(self, max_ngram: int = 2):
        self.max_ngram = max_ngram
        self.vocabulary_ = {}
        self.idf_ = np.zeros(0)
        self.num_documents_ = 0

    def fit(self, token_lists):
        token_lists = list(token_lists)
        if not token_lists:
            raise ConfigError("cannot fit tf*idf on an empty corpus")
        df = {}
        for tokens in token_lists:
            for term in set(ngram_terms(tuple(tokens), self.max_ngram)):
                df[term] = df.get(term, 0) + 1
        vocab = sorted(df)
        self.vocabulary_ = {term: i for i, term in enumerate(vocab)}
        n = len(token_lists)
        self.num_documents_ = n
        self.idf_ = np.array(
            [np.log((1.0 + n) / (1.0 + df[term])) + 1.0 for term in vocab], dtype=np.float64
        )
        return self

    @property
    def dim(self) -> int:
        return len(self.vocabulary_)

    def _term_weights(self, tokens):
        counts = {}
        for term in ngram_terms(tuple(tokens), self.max_ngram):
            idx = self.vocabulary_.get(term)
            if idx is not None:
                counts[idx] = counts.get(idx, 0) + 1
        if not counts:
            return [], []
        idxs = sorted(counts)
        weights = np.array([counts[i] * self.idf_[i] for i in idxs], dtype=np.float64)
        norm = np.linalg.norm(weights)
        if norm > 0:
            weights = weights / norm
        return idxs, weights

    def transform(self, tokens) -> sparse.csr_matrix:
        """Single query to a 1 x dim sparse row; all-OOV gives a zero row."""
        idxs, weights = self._term_weights(tokens)
        indptr = np.array([0, len(idxs)])
        return sparse.csr_matrix((weights, idxs, indptr), shape=(1, self.dim))

    def transform_many(self, token_lists) -> sparse.csr_matrix:
        data, indices, indptr = [], [], [0]
        for tokens in token_lists:
            idxs, weights = self._term_weights(tokens)
            indices.extend(idxs)
            data.extend(weights)
            indptr.append(len(indices))
        return sparse.csr_matrix(
            (np.array(data), np.array(indices, dtype=np.int64), np.array(indptr)),
            shape=(len(indptr) - 1, self.dim),
        )


def tfidf_fit(token_lists, max_ngram: int = 2) -> TfIdfVectorizer:
    return TfIdfVectorizer(max_ngram).fit(token_lists)


def tfidf_transform(vectorizer: TfIdfVectorizer, tokens) -> sparse.csr_matrix:
    return vectorizer.transform(tokens)


@dataclass
class LinearSvm:
    """One binary hinge-loss classifier per class (one-vs-rest)."""

    classes: tuple
    weights: np.ndarray  # (num_classes, dim)
    biases: np.ndarray  # (num_classes,)
    lam: float
    epochs: int
    objective_history: list = field(default_factory=list)  # per-epoch mean across classes

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def _as_csr(features) -> sparse.csr_matrix:
    if sparse.issparse(features):
        return features.tocsr()
    return sparse.csr_matrix(np.atleast_2d(np.asarray(features, dtype=np.float64)))


def _train_binary(x: sparse.csr_matrix, y: np.ndarray, lam: float, epochs: int, rng):
    """Projected SGD on the hinge objective; returns weights and history.

    The weight vector is kept as scale * direction so the per-step decay is
    O(1); the last feature column is the constant bias slot.
    """
    n, dim = x.shape
    indptr, indices, data = x.indptr, x.indices, x.data
    v = np.zeros(dim)
    scale = 1.0
    sq_norm = 0.0
    cap = 1.0 / np.sqrt(lam)
    # Offset the schedule so eta starts near 1 instead of 1/lam, which keeps
    # the first epochs from oscillating wildly at small lam.
    t = int(1.0 / lam)
    history = []
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            lo, hi = indptr[i], indptr[i + 1]
            cols = indices[lo:hi]
            vals = data[lo:hi]
            margin = y[i] * scale * float(vals @ v[cols])
            scale *= 1.0 - eta * lam
            if scale == 0.0:  # first step wipes the vector entirely
                v[:] = 0.0
                sq_norm = 0.0
                scale = 1.0
            if margin < 1.0:
                old = v[cols]
                step = (eta * y[i] / scale) * vals
                v[cols] = old + step
                sq_norm += float(step @ (2.0 * old + step))
            norm = scale * np.sqrt(max(sq_norm, 0.0))
            if norm > cap:
                scale *= cap / norm
        w = scale * v
        margins = y * (x @ w)
        hinge = np.maximum(0.0, 1.0 - margins).mean()
        history.append(0.5 * lam * float(w @ w) + float(hinge))
        sq_norm = float(v @ v)  # refresh against drift once per epoch
    return scale * v, history


def svm_train(features, labels, lam: float = 1e-4, epochs: int = 20, rng=None) -> LinearSvm:
    """Train one-vs-rest linear SVMs; deterministic under the given rng/seed."""
    x = _as_csr(features)
    labels = list(labels)
    if x.shape[0] != len(labels):
        raise ShapeError(f"{x.shape[0]} feature rows vs {len(labels)} labels")
    classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise ConfigError("svm_train needs at least two distinct labels")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    ones = sparse.csr_matrix(np.ones((x.shape[0], 1)))
    x_aug = sparse.hstack([x, ones], format="csr")

    weights = np.zeros((len(classes), x.shape[1]))
    biases = np.zeros(len(classes))
    histories = []
    for row, cls in enumerate(classes):
        y = np.array([1.0 if lab == cls else -1.0 for lab in labels])
        if not np.any(y > 0):
            raise ConfigError(f"class {cls!r} has no positive examples")
        w_aug, history = _train_binary(x_aug, y, lam, epochs, rng)
        weights[row] = w_aug[:-1]
        biases[row] = w_aug[-1]
        histories.append(history)
    combined = [float(np.mean([h[e] for h in histories])) for e in range(epochs)]
    return LinearSvm(classes, weights, biases, lam, epochs, combined)


def svm_train_multilabel(features, label_sets, classes, lam: float = 1e-4,
                         epochs: int = 20, rng=None) -> LinearSvm:
    """Independent binary SVM per class where gold labels are sets.

    Class c's positives are the rows whose label set contains c. Classes
    with no positive examples keep a zero weight vector and a large
    negative bias so they are never predicted.
    """
    x = _as_csr(features)
    label_sets = [set(s) for s in label_sets]
    if x.shape[0] != len(label_sets):
        raise ShapeError(f"{x.shape[0]} feature rows vs {len(label_sets)} label sets")
    classes = tuple(classes)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    ones = sparse.csr_matrix(np.ones((x.shape[0], 1)))
    x_aug = sparse.hstack([x, ones], format="csr")

    weights = np.zeros((len(classes), x.shape[1]))
    biases = np.zeros(len(classes))
    histories = []
    for row, cls in enumerate(classes):
        y = np.array([1.0 if cls in s else -1.0 for s in label_sets])
        if not np.any(y > 0):
            biases[row] = -1.0
            histories.append([0.0] * epochs)
            continue
        w_aug, history = _train_binary(x_aug, y, lam, epochs, rng)
        weights[row] = w_aug[:-1]
        biases[row] = w_aug[-1]
        histories.append(history)
    combined = [float(np.mean([h[e] for h in histories])) for e in range(epochs)]
    return LinearSvm(classes, weights, biases, lam, epochs, combined)


def svm_predict_sets(model: LinearSvm, features):
    """Multi-label prediction: every class with positive margin."""
    margins = svm_decision(model, features)
    return [
        frozenset(model.classes[c] for c in range(len(model.classes)) if row[c] > 0)
        for row in margins
    ]


def svm_decision(model: LinearSvm, features) -> np.ndarray:
    """Raw affine margins, one column per class (rows align with inputs)."""
    x = _as_csr(features)
    if x.shape[1] != model.dim:
        raise ShapeError(f"feature dim {x.shape[1]} does not match model dim {model.dim}")
    return np.asarray(x @ model.weights.T) + model.biases


def svm_predict(model: LinearSvm, features):
    margins = svm_decision(model, features)
    return [model.classes[i] for i in margins.argmax(axis=1)]


def binary_margin(model: LinearSvm, features) -> np.ndarray:
    """Signed margin toward classes[1] for a two-class model."""
    if len(model.classes) != 2:
        raise ConfigError("binary_margin needs a two-class model")
    margins = svm_decision(model, features)
    return margins[:, 1] - margins[:, 0]


# --------------------------------------------------------------------- knn


@dataclass
class KnnResult:
    neighbors: list  # (id, cosine distance) pairs, nearest first
    truncated: bool = False


class KnnIndex:
    """Exact cosine-distance index over fixed vectors."""

    def __init__(self, vectors, ids):
        self.vectors = _as_csr(vectors)
        self.ids = list(ids)
        if self.vectors.shape[0] != len(self.ids):
            raise ShapeError("vector count does not match id count")
        if not self.ids:
            raise DataError("cannot build a KNN index over zero vectors")
        sq = self.vectors.multiply(self.vectors).sum(axis=1)
        self.norms = np.sqrt(np.asarray(sq).ravel())

    def __len__(self):
        return len(self.ids)

    def similarities(self, query) -> np.ndarray:
        q = _as_csr(query)
        if q.shape[1] != self.vectors.shape[1]:
            raise ShapeError(f"query dim {q.shape[1]} vs index dim {self.vectors.shape[1]}")
        qnorm = float(np.sqrt(q.multiply(q).sum()))
        dots = np.asarray((self.vectors @ q.T).todense()).ravel()
        denom = self.norms * qnorm
        sims = np.zeros_like(dots)
        np.divide(dots, denom, out=sims, where=denom > 0)
        return sims


def knn_query(index: KnnIndex, query, k: int) -> KnnResult:
    """Exact k nearest neighbors by cosine distance, ties by ascending id.

    Asking for more neighbors than the index holds returns everything with
    the truncated flag set.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    truncated = k > len(index)
    dists = 1.0 - index.similarities(query)
    order = sorted(range(len(index)), key=lambda i: (dists[i], index.ids[i]))
    take = min(k, len(index))
    return KnnResult([(index.ids[i], float(dists[i])) for i in order[:take]], truncated)


# ------------------------------------------------------------- persistence


def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _read_str(buf: memoryview, offset: int):
    (length,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    value = bytes(buf[offset : offset + length]).decode("utf-8")
    return value, offset + length


def save_svm(path, model: LinearSvm, vectorizer: TfIdfVectorizer) -> None:
    """Write vectorizer vocabulary, idf array, and per-class weights."""
    vocab = sorted(vectorizer.vocabulary_, key=vectorizer.vocabulary_.get)
    parts = [SVM_MAGIC]
    parts.append(struct.pack("<IIdI", len(vocab), vectorizer.max_ngram, model.lam, model.epochs))
    for term in vocab:
        parts.append(_pack_str(term))
    parts.append(vectorizer.idf_.astype("<f8").tobytes())
    parts.append(struct.pack("<II", len(model.classes), model.dim))
    for cls in model.classes:
        parts.append(_pack_str(str(cls)))
    for row in range(len(model.classes)):
        parts.append(model.weights[row].astype("<f8").tobytes())
        parts.append(struct.pack("<d", float(model.biases[row])))
    Path(path).write_bytes(b"".join(parts))


def load_svm(path):
    """Read a model saved by ``save_svm``; returns (model, vectorizer)."""
    raw = Path(path).read_bytes()
    if raw[: len(SVM_MAGIC)] != SVM_MAGIC:
        raise ParseError(path, 0, "bad magic bytes for SVM model file")
    buf = memoryview(raw)
    offset = len(SVM_MAGIC)
    vocab_len, max_ngram, lam, epochs = struct.unpack_from("<IIdI", buf, offset)
    offset += struct.calcsize("<IIdI")
    terms = []
    for _ in range(vocab_len):
        term, offset = _read_str(buf, offset)
        terms.append(term)
    idf = np.frombuffer(buf, dtype="<f8", count=vocab_len, offset=offset).copy()
    offset += 8 * vocab_len
    num_classes, dim = struct.unpack_from("<II", buf, offset)
    offset += 8
    classes = []
    for _ in range(num_classes):
        cls, offset = _read_str(buf, offset)
        classes.append(cls)
    weights = np.zeros((num_classes, dim))
    biases = np.zeros(num_classes)
    for row in range(num_classes):
        weights[row] = np.frombuffer(buf, dtype="<f8", count=dim, offset=offset)
        offset += 8 * dim
        (biases[row],) = struct.unpack_from("<d", buf, offset)
        offset += 8

    vectorizer = TfIdfVectorizer(max_ngram)
    vectorizer.vocabulary_ = {term: i for i, term in enumerate(terms)}
    vectorizer.idf_ = idf
    model = LinearSvm(tuple(classes), weights, biases, lam, epochs)
    return model, vectorizer
