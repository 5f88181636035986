"""Rating ingestion, review features, splits, batching and a synthetic benchmark.

Ratings files are UTF-8 TSV: ``user_id<TAB>item_id<TAB>rating[<TAB>review]``
with ``#`` comment lines.  Review embedding containers use the ``CFAE``
binary layout handled by :func:`write_embeddings` / :func:`read_embeddings`.
"""
from __future__ import annotations

import hashlib
import logging
import math
import re
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VALID: "valid", TEST: "test"}


class RatingsFormatError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class RatingDataset:
    """Binarised interactions of one domain with dense user/item indices."""

    domain: str
    user_ids: list
    item_ids: list
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    split: np.ndarray = None
    # target only: observed negatives kept out of training, usable as eval candidates
    negatives: np.ndarray = None
    user_texts: list = None
    item_texts: list = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.split is None:
            self.split = np.full(len(self.users), TRAIN, dtype=np.int8)
        if self.negatives is None:
            self.negatives = np.zeros((0, 2), dtype=np.int64)

    def __len__(self):
        return len(self.users)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def mask(self, split: int) -> np.ndarray:
        return self.split == split

    def check(self) -> None:
        """Raise if a structural invariant is violated."""
        if len(self):
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise ValueError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise ValueError("item index out of range")
        pairs = self.users * max(self.n_items, 1) + self.items
        if len(np.unique(pairs)) != len(pairs):
            raise ValueError("duplicate (user, item) pairs")
        if self.domain == "target" and (self.labels[self.mask(TRAIN)] != 1).any():
            raise ValueError("target training interactions must all be positive")


@dataclass
class RawRatings:
    """Parsed ratings before binarisation and filtering."""

    users: list
    items: list
    ratings: np.ndarray
    texts: list


# --------------------------------------------------------------------------
# loading


def parse_ratings(path) -> RawRatings:
    path = Path(path)
    users, items, ratings, texts = [], [], [], []
    seen = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 3:
                raise RatingsFormatError(f"{path}:{lineno}: expected at least 3 tab-separated fields")
            try:
                r = float(cols[2])
            except ValueError:
                raise RatingsFormatError(f"{path}:{lineno}: non-numeric rating {cols[2]!r}") from None
            if not math.isfinite(r):
                raise RatingsFormatError(f"{path}:{lineno}: non-finite rating {cols[2]!r}")
            key = (cols[0], cols[1])
            text = cols[3] if len(cols) > 3 else ""
            if key in seen:
                # later rows for the same pair win; review text accumulates
                i = seen[key]
                ratings[i] = r
                texts[i] = (texts[i] + " " + text).strip()
                continue
            seen[key] = len(users)
            users.append(cols[0])
            items.append(cols[1])
            ratings.append(r)
            texts.append(text)
    return RawRatings(users, items, np.asarray(ratings, dtype=np.float64), texts)


def write_ratings(path, raw: RawRatings) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("# user_id\titem_id\trating\treview\n")
        for u, i, r, t in zip(raw.users, raw.items, raw.ratings, raw.texts):
            rs = repr(float(r)) if not float(r).is_integer() else str(int(r))
            fh.write(f"{u}\t{i}\t{rs}\t{t}\n" if t else f"{u}\t{i}\t{rs}\n")


def filter_min_records(users, items, min_records: int) -> np.ndarray:
    """Keep-mask after iteratively dropping sparse users and items."""
    users = np.asarray(users)
    items = np.asarray(items)
    keep = np.ones(len(users), dtype=bool)
    while True:
        uc = Counter(users[keep].tolist())
        ic = Counter(items[keep].tolist())
        drop = keep & (np.array([uc[u] < min_records for u in users.tolist()])
                       | np.array([ic[i] < min_records for i in items.tolist()]))
        if not drop.any():
            return keep
        keep &= ~drop


def prepare(raw: RawRatings, domain: str, threshold: float = 4, min_records: int = 30,
            target_keep_fraction: float = 1.0, seed: int = 0) -> RatingDataset:
    """Binarise at ``threshold`` and apply the per-domain preprocessing.

    Source: users and items with fewer than ``min_records`` interactions are
    removed until none remain.  Target: only positives are kept as
    interactions (a random ``target_keep_fraction`` of them); negatives are
    retained separately for evaluation.
    """
    if domain not in ("source", "target"):
        raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
    users = np.asarray(raw.users, dtype=object)
    items = np.asarray(raw.items, dtype=object)
    labels = (raw.ratings >= threshold).astype(np.int8)
    texts = list(raw.texts)
    keep = np.ones(len(users), dtype=bool)
    if domain == "source" and min_records > 0:
        keep = filter_min_records(users, items, min_records)
    user_ids = sorted(set(users[keep].tolist()))
    item_ids = sorted(set(items[keep].tolist()))
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}
    rows = np.flatnonzero(keep)
    u = np.array([uidx[x] for x in users[rows]], dtype=np.int64)
    it = np.array([iidx[x] for x in items[rows]], dtype=np.int64)
    lab = labels[rows]
    utexts = [[] for _ in user_ids]
    itexts = [[] for _ in item_ids]
    for r, a, b in zip(rows, u, it):
        if texts[r]:
            utexts[a].append(texts[r])
            itexts[b].append(texts[r])
    negatives = None
    if domain == "target":
        pos = lab == 1
        negatives = np.stack([u[~pos], it[~pos]], axis=1) if (~pos).any() else None
        u, it, lab = u[pos], it[pos], lab[pos]
        if target_keep_fraction < 1.0:
            rng = np.random.default_rng([seed, 17])
            sel = np.sort(rng.permutation(len(u))[: int(round(target_keep_fraction * len(u)))])
            u, it, lab = u[sel], it[sel], lab[sel]
    ds = RatingDataset(domain, user_ids, item_ids, u, it, lab, negatives=negatives,
                       user_texts=utexts, item_texts=itexts)
    ds.check()
    return ds


def load_ratings(path, domain: str = "source", threshold: float = 4, min_records: int = 30,
                 target_keep_fraction: float = 1.0, seed: int = 0) -> RatingDataset:
    """Parse a ratings TSV and apply :func:`prepare`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"ratings file not found: {path}")
    return prepare(parse_ratings(path), domain, threshold, min_records,
                   target_keep_fraction, seed)


def split_dataset(ds: RatingDataset, ratios=(8, 1, 1), seed: int = 0) -> RatingDataset:
    """Uniform random train/valid/test assignment in the given proportions."""
    n = len(ds)
    if n < 10:
        raise ValueError(f"need at least 10 interactions to split, got {n}")
    total = float(sum(ratios))
    n_valid = int(round(n * ratios[1] / total))
    n_test = int(round(n * ratios[2] / total))
    perm = np.random.default_rng([seed, 23]).permutation(n)
    split = np.full(n, TRAIN, dtype=np.int8)
    split[perm[:n_valid]] = VALID
    split[perm[n_valid:n_valid + n_test]] = TEST
    return replace(ds, split=split)


# --------------------------------------------------------------------------
# review features


@dataclass
class ReviewFeatures:
    """Per-entity review vectors for one domain, aligned to dataset indices."""

    users: np.ndarray
    items: np.ndarray

    @property
    def dim(self) -> int:
        return self.users.shape[1]


_SENTENCE = re.compile(r"[^.!?]+")
_TOKEN = re.compile(r"\w+", re.UNICODE)


def split_sentences(text: str) -> list:
    out = []
    for s in _SENTENCE.findall(text):
        if _TOKEN.search(s):
            out.append(s.strip())
    return out


def _bucket(token: str, d_rev: int, seed: int):
    h = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                        key=str(seed).encode("utf-8")).digest()
    v = int.from_bytes(h, "little")
    return (v >> 1) % d_rev, 1.0 if v & 1 else -1.0


class HashedTfidf:
    """Signed feature hashing of unigrams with corpus-level IDF weights."""

    def __init__(self, d_rev: int, seed: int = 0):
        if d_rev < 1:
            raise ValueError("d_rev must be >= 1")
        self.d_rev = d_rev
        self.seed = seed
        self.idf = {}
        self.n_sentences = 0

    def fit(self, sentences) -> "HashedTfidf":
        df = Counter()
        n = 0
        for s in sentences:
            n += 1
            df.update(set(t.lower() for t in _TOKEN.findall(s)))
        self.n_sentences = n
        self.idf = {t: math.log((1 + n) / (1 + c)) + 1.0 for t, c in df.items()}
        return self

    def sentence_vector(self, sentence: str) -> np.ndarray:
        vec = np.zeros(self.d_rev)
        tf = Counter(t.lower() for t in _TOKEN.findall(sentence))
        default = math.log(1 + self.n_sentences) + 1.0
        for tok in sorted(tf):
            b, sign = _bucket(tok, self.d_rev, self.seed)
            vec[b] += sign * tf[tok] * self.idf.get(tok, default)
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def document_vector(self, texts) -> np.ndarray:
        sents = [s for t in texts for s in split_sentences(t)]
        if not sents:
            return np.zeros(self.d_rev)
        return np.mean([self.sentence_vector(s) for s in sents], axis=0)


def featurize_reviews(user_texts, item_texts, d_rev: int, seed: int = 0) -> ReviewFeatures:
    """Hashed TF-IDF review vectors; entities without text get zeros."""
    model = HashedTfidf(d_rev, seed).fit(
        s for group in (user_texts, item_texts) for texts in group for t in texts
        for s in split_sentences(t))
    U = np.array([model.document_vector(t) for t in user_texts]).reshape(len(user_texts), d_rev)
    V = np.array([model.document_vector(t) for t in item_texts]).reshape(len(item_texts), d_rev)
    return ReviewFeatures(U, V)


EMB_MAGIC = b"CFAE"
EMB_VERSION = 1


def write_embeddings(path, ids, vectors) -> None:
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise ValueError("need one vector row per id")
    with Path(path).open("wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<III", EMB_VERSION, len(ids), vectors.shape[1]))
        for ident, row in zip(ids, vectors):
            raw = str(ident).encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(row.tobytes())


def read_embeddings(path, dim: int | None = None):
    """Return ``(ids, float32 matrix)`` from a ``CFAE`` container."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != EMB_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic, not an embedding container")
    version, count, d = struct.unpack_from("<III", data, 4)
    if version != EMB_VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    if dim is not None and d != dim:
        raise EmbeddingFormatError(f"{path}: dimension {d} does not match expected {dim}")
    off = 16
    ids, rows = [], []
    for k in range(count):
        if off + 4 > len(data):
            raise EmbeddingFormatError(f"{path}: truncated at record {k}")
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        end = off + ln + 4 * d
        if end > len(data):
            raise EmbeddingFormatError(f"{path}: truncated at record {k}")
        ids.append(data[off:off + ln].decode("utf-8"))
        rows.append(np.frombuffer(data, dtype="<f4", count=d, offset=off + ln))
        off = end
    if off != len(data):
        raise EmbeddingFormatError(f"{path}: {len(data) - off} trailing bytes")
    return ids, (np.stack(rows) if rows else np.zeros((0, d), dtype="<f4"))


USER_PREFIX, ITEM_PREFIX = "user:", "item:"


def save_review_features(path, ds: RatingDataset, feats: ReviewFeatures) -> None:
    ids = [USER_PREFIX + u for u in ds.user_ids] + [ITEM_PREFIX + i for i in ds.item_ids]
    write_embeddings(path, ids, np.vstack([feats.users, feats.items]))


def load_review_embeddings(path, ds: RatingDataset | None = None, dim: int | None = None):
    """Load a container; with ``ds`` attach vectors to its users and items.

    Without ``ds`` a plain ``{id: vector}`` mapping is returned.  Entities
    of ``ds`` absent from the file get zero vectors; ids in the file that
    ``ds`` does not know raise.
    """
    ids, mat = read_embeddings(path, dim)
    if ds is None:
        return dict(zip(ids, mat))
    d = mat.shape[1]
    uidx = {USER_PREFIX + u: k for k, u in enumerate(ds.user_ids)}
    iidx = {ITEM_PREFIX + i: k for k, i in enumerate(ds.item_ids)}
    unknown = [x for x in ids if x not in uidx and x not in iidx]
    if unknown:
        raise KeyError(f"{path}: unknown entity ids {unknown[:10]}"
                       + (f" (+{len(unknown) - 10} more)" if len(unknown) > 10 else ""))
    U = np.zeros((ds.n_users, d))
    V = np.zeros((ds.n_items, d))
    for x, row in zip(ids, mat):
        if x in uidx:
            U[uidx[x]] = row
        else:
            V[iidx[x]] = row
    return ReviewFeatures(U, V)


# --------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class SyntheticSpec:
    n_users: int = 2000
    n_items: int = 500
    latent_dim: int = 8
    angle: float = math.pi / 3
    translation: float = 1.0
    threshold: float = 0.0         # on the standardised preference score
    source_density: float = 0.1    # fraction of user-item pairs observed
    target_density: float = 0.03
    review_dim: int = 16
    review_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_items", "latent_dim", "review_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.angle <= math.pi:
            raise ValueError("angle must lie in [0, pi]")


@dataclass
class SyntheticDomain:
    raw: RawRatings
    reviews: ReviewFeatures       # aligned to sorted user/item ids
    user_latent: np.ndarray
    item_latent: np.ndarray


def _rotation(dim: int, angle: float) -> np.ndarray:
    R = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    for a in range(0, dim - 1, 2):
        R[a:a + 2, a:a + 2] = [[c, -s], [s, c]]
    return R


def _ids(prefix, n):
    width = len(str(n - 1))
    return [f"{prefix}{k:0{width}d}" for k in range(n)]


def gen_synthetic(spec: SyntheticSpec):
    """Two non-overlapping domains sharing one preference model.

    Returns ``(source, target, truth)`` where each domain is a
    :class:`SyntheticDomain` and ``truth`` holds the rotation, translation
    and review projection.
    """
    rng = np.random.default_rng(spec.seed)
    d = spec.latent_dim
    mean = rng.normal(size=d)
    mean *= 0.8 / np.linalg.norm(mean)
    spread = np.linspace(1.3, 0.5, d)
    # review_dim x d with orthonormal columns (or rows when review_dim < d)
    width = max(d, spec.review_dim)
    proj = np.linalg.qr(rng.normal(size=(spec.review_dim, width)))[0][:, :d] \
        if spec.review_dim >= d else np.linalg.qr(rng.normal(size=(d, d)))[0][:spec.review_dim]
    shift = rng.normal(size=d)
    shift *= spec.translation / np.linalg.norm(shift)
    R = _rotation(d, spec.angle)

    def domain(tag, density, transform):
        nu, ni = spec.n_users, spec.n_items
        U = mean + rng.normal(size=(nu, d)) * spread
        V = mean + rng.normal(size=(ni, d)) * spread
        n_obs = int(round(density * nu * ni))
        cells = np.sort(rng.choice(nu * ni, size=n_obs, replace=False))
        uu, ii = cells // ni, cells % ni
        score = (U[uu] * V[ii]).sum(axis=1)
        z = (score - score.mean()) / score.std()
        ratings = np.clip(4 + np.floor((z - spec.threshold) / 0.5), 1, 5)
        uid, iid = _ids(f"{tag}u", nu), _ids(f"{tag}i", ni)
        raw = RawRatings([uid[k] for k in uu], [iid[k] for k in ii], ratings, [""] * n_obs)

        def emit(L):
            return transform(L) @ proj.T + spec.review_noise * rng.normal(size=(len(L), spec.review_dim))

        return SyntheticDomain(raw, ReviewFeatures(emit(U), emit(V)), U, V)

    src = domain("s", spec.source_density, lambda L: L)
    tgt = domain("t", spec.target_density, lambda L: L @ R.T + shift)
    return src, tgt, {"rotation": R, "translation": shift, "projection": proj}


def attach_reviews(ds: RatingDataset, dom: SyntheticDomain) -> ReviewFeatures:
    """Restrict synthetic review vectors to the entities that survived preprocessing."""
    uall = sorted(set(dom.raw.users))
    iall = sorted(set(dom.raw.items))
    upos = {u: k for k, u in enumerate(uall)}
    ipos = {i: k for k, i in enumerate(iall)}
    return ReviewFeatures(dom.reviews.users[[upos[u] for u in ds.user_ids]],
                          dom.reviews.items[[ipos[i] for i in ds.item_ids]])


# --------------------------------------------------------------------------
# batching


@dataclass
class EntityBatch:
    ids: np.ndarray
    histories: np.ndarray
    reviews: np.ndarray


@dataclass
class DomainBatch:
    rows: np.ndarray           # interaction indices into the dataset
    user: EntityBatch
    item: EntityBatch
    labels: np.ndarray


@dataclass
class Batch:
    source: DomainBatch
    target: DomainBatch


@dataclass
class DomainData:
    """A split dataset with its review features and training histories."""

    ds: RatingDataset
    reviews: ReviewFeatures
    user_hist: np.ndarray = field(init=False, repr=False)
    item_hist: np.ndarray = field(init=False, repr=False)
    train_rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ds = self.ds
        train = ds.mask(TRAIN)
        self.train_rows = np.flatnonzero(train)
        pos = train & (ds.labels == 1)
        H = np.zeros((ds.n_users, ds.n_items))
        H[ds.users[pos], ds.items[pos]] = 1.0
        self.user_hist = H
        self.item_hist = H.T.copy()

    def positive_train(self, users, items) -> np.ndarray:
        return self.user_hist[users, items] > 0


def sample_batch(data: DomainData, batch_size: int, seed: int, step: int,
                 stream: int = 0, drop_self: bool = True) -> DomainBatch:
    """Batch ``step`` of a seeded epoch-wise shuffle of the training rows.

    Histories come from training positives only.  With ``drop_self`` the
    sampled pair itself is removed from both history rows.
    """
    rows = data.train_rows
    n = len(rows)
    if batch_size > n:
        raise ValueError(f"batch size {batch_size} exceeds {n} training interactions")
    per_epoch = n // batch_size
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, stream, epoch]).permutation(n)
    sel = rows[perm[k * batch_size:(k + 1) * batch_size]]
    ds = data.ds
    u, i = ds.users[sel], ds.items[sel]
    uh = data.user_hist[u]
    ih = data.item_hist[i]
    if drop_self:
        idx = np.arange(len(sel))
        uh[idx, i] = 0.0
        ih[idx, u] = 0.0
    return DomainBatch(sel, EntityBatch(u, uh, data.reviews.users[u]),
                       EntityBatch(i, ih, data.reviews.items[i]),
                       ds.labels[sel].astype(np.float64))


def sample_pair(source: DomainData, target: DomainData, batch_size: int, seed: int,
                step: int) -> Batch:
    return Batch(sample_batch(source, batch_size, seed, step, stream=0),
                 sample_batch(target, batch_size, seed, step, stream=1))
