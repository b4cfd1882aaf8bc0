"""Prototype retrieval: distances, compatibility predicates, and index builders.

The per-datum functions (`neighborhood_1proto`, `neighborhood_longshort`,
`neighborhood_longlong`, `morph_neighborhood`) are direct implementations of
the defining predicates and enumerate candidates naively; `build_index` is
the production path, vectorizing the same predicates over count/set matrices
with banded edit-distance checks on the survivors. Both must agree exactly
(checked against brute force in the tests).

Identity prototypes are excluded by content: a candidate whose flat token
sequence equals the target's would make reconstruction trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Datum


# ---------------------------------------------------------------------------
# metrics


def lev(a, b) -> int:
    """Levenshtein distance between two token sequences."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ta in enumerate(a, 1):
        cur = [i]
        for j, tb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ta != tb)))
        prev = cur
    return prev[len(b)]


def lev_norm(a, b) -> float:
    """Edit distance normalized by the longer length; 0 for two empty seqs."""
    m = max(len(a), len(b))
    if m == 0:
        return 0.0
    return lev(a, b) / m


def _lev_bounded(a: list, b: list, bound: float) -> int | None:
    """Exact lev(a,b) when it is < bound, else None (early abort)."""
    la, lb = len(a), len(b)
    if abs(la - lb) >= bound:
        return None
    if la < lb:
        a, b, la, lb = b, a, lb, la
    prev = list(range(lb + 1))
    for i in range(1, la + 1):
        ta = a[i - 1]
        cur = [i]
        row_min = i
        for j in range(1, lb + 1):
            v = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ta != b[j - 1]))
            cur.append(v)
            if v < row_min:
                row_min = v
        if row_min >= bound:
            return None
        prev = cur
    return prev[lb] if prev[lb] < bound else None


def _norm_within(a: list, b: list, delta: float) -> bool:
    """lev_norm(a,b) < delta, matching `lev_norm` arithmetic exactly."""
    m = max(len(a), len(b))
    if m == 0:
        return 0.0 < delta
    d = _lev_bounded(a, b, delta * m + 1.0)
    return d is not None and d / m < delta


def _lev_to_many(a: list[int], b_mat: np.ndarray, b_lens: np.ndarray) -> np.ndarray:
    """Exact edit distances from one id sequence to every row of a padded id
    matrix: Wagner-Fischer with each DP row vectorized across candidates."""
    n, lmax = b_mat.shape
    if lmax == 0:
        return np.full(n, len(a), dtype=np.int64)
    idx = np.arange(lmax + 1)
    prev = np.broadcast_to(idx, (n, lmax + 1)).astype(np.int64).copy()
    for i, tok in enumerate(a, 1):
        cost = (b_mat != tok).astype(np.int64)
        nodep = np.minimum(prev[:, 1:] + 1, prev[:, :-1] + cost)
        ext = np.concatenate([np.full((n, 1), i, dtype=np.int64), nodep], axis=1)
        prev = np.minimum.accumulate(ext - idx, axis=1) + idx
    return prev[np.arange(n), b_lens]


class _PaddedIds:
    """Padded id matrix view over _Features for batched distance queries."""

    def __init__(self, feats: _Features):
        n = len(feats.ids)
        lmax = int(feats.lengths.max(initial=1))
        self.mat = np.zeros((n, max(lmax, 1)), dtype=np.int64)
        for i, row in enumerate(feats.ids):
            self.mat[i, :len(row)] = row
        self.lens = feats.lengths.astype(np.int64)

    def norm_ok(self, a: list[int], cand: np.ndarray, delta: float) -> np.ndarray:
        """Subset of `cand` whose normalized distance to `a` is < delta."""
        if cand.size == 0:
            return cand
        d = _lev_to_many(a, self.mat[cand], self.lens[cand])
        m = np.maximum(np.maximum(self.lens[cand], len(a)), 1)
        return cand[d / m < delta]


def token_set_ops(a, b) -> tuple[set, set]:
    """(a minus b, symmetric difference) over distinct tokens."""
    sa, sb = set(a), set(b)
    return sa - sb, sa ^ sb


def seq_remove(d, d1) -> list:
    """Order-preserving copy of d with every token occurring in d1 dropped."""
    drop = set(d1)
    return [t for t in d if t not in drop]


def jaccard(a, b) -> float:
    """Jaccard distance over distinct-token sets; 0 when both are empty."""
    sa, sb = set(a), set(b)
    union = sa | sb
    if not union:
        return 0.0
    return 1.0 - len(sa & sb) / len(union)


# ---------------------------------------------------------------------------
# per-datum neighborhood predicates (reference implementations)


def neighborhood_1proto(d: Datum, data, alpha: float, beta: float,
                        delta: float) -> list[Datum]:
    """Single-prototype neighborhood: alpha*|d Delta d1| + beta*lev(d,d1) < delta."""
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    out = []
    for d1 in data:
        if d1.flat == d.flat:
            continue
        _, delta_set = token_set_ops(d.flat, d1.flat)
        if alpha * len(delta_set) + beta * lev(d.flat, d1.flat) < delta:
            out.append(d1)
    return out


def _longshort_ok(d_flat, d1_flat, d2_flat, delta: float) -> bool:
    if lev_norm(d_flat, d1_flat) >= delta:
        return False
    diff = seq_remove(d_flat, d1_flat)
    if not diff:
        return False
    if lev_norm(diff, d2_flat) >= delta:
        return False
    return not (set(diff) - set(d2_flat))


def neighborhood_longshort(d: Datum, data, delta: float) -> list[tuple[Datum, Datum]]:
    """Pairs (similar example, short difference-covering example)."""
    out = []
    for d1 in data:
        if d1.flat == d.flat:
            continue
        for d2 in data:
            if d2.flat == d.flat or d2.flat == d1.flat:
                continue
            if _longshort_ok(d.flat, d1.flat, d2.flat, delta):
                out.append((d1, d2))
    return out


def _longlong_ok(d_flat, d1_flat, d2_flat, delta: float) -> bool:
    if len(set(d_flat) ^ set(d1_flat)) != 1:
        return False
    if len(set(d1_flat) ^ set(d2_flat)) != 1:  # prior support restriction
        return False
    if lev_norm(d_flat, d1_flat) >= delta or lev_norm(d_flat, d2_flat) >= delta:
        return False
    return not (set(d_flat) - set(d1_flat) - set(d2_flat))


def neighborhood_longlong(d: Datum, data, delta: float) -> list[tuple[Datum, Datum]]:
    """Pairs of near-duplicates of d that jointly cover its tokens."""
    out = []
    for d1 in data:
        if d1.flat == d.flat:
            continue
        for d2 in data:
            if d2.flat == d.flat or d2.flat == d1.flat:
                continue
            if _longlong_ok(d.flat, d1.flat, d2.flat, delta):
                out.append((d1, d2))
    return out


def _score1(d: Datum, d1: Datum) -> tuple[int, float]:
    return (len(set(d.tags) ^ set(d1.tags)), jaccard(d.lemma, d1.lemma))


def morph_neighborhood(d: Datum, data, n: int, k: int = 4) -> list[tuple[Datum, ...]]:
    """Morphology neighborhoods by lexicographic score sorts.

    n=1: the k candidates with smallest (tag symmetric difference,
    lemma Jaccard). n=2: for each such first prototype, the k smallest
    second prototypes by (target tags differ from d2's, tag distance
    between prototypes), restricted to pairs with distinct tag sets that
    jointly cover the target's tags. Ties break by original data order.
    """
    if d.task != "morph":
        raise ValueError("morph_neighborhood requires morphology data")
    cands = [(i, c) for i, c in enumerate(data) if c.flat != d.flat]
    firsts = sorted(cands, key=lambda ic: (_score1(d, ic[1]), ic[0]))[:k]
    if n == 1:
        return [(c,) for _, c in firsts]
    if n != 2:
        raise ValueError(f"n must be 1 or 2, got {n}")
    out = []
    d_tags = set(d.tags)
    for _, d1 in firsts:
        d1_tags = set(d1.tags)
        residual = d_tags - d1_tags
        eligible = []
        for j, d2 in cands:
            d2_tags = set(d2.tags)
            if d2.flat == d1.flat or d1_tags == d2_tags:
                continue
            if residual - d2_tags:
                continue
            score2 = (int(d_tags != d2_tags), len(d1_tags ^ d2_tags))
            eligible.append((score2, j, d2))
        eligible.sort(key=lambda t: (t[0], t[1]))
        out.extend((d1, d2) for _, _, d2 in eligible[:k])
    return out


# ---------------------------------------------------------------------------
# index


@dataclass
class NeighborhoodIndex:
    """Per-target prototype tuples over a fixed training list."""

    tuples: list[list[tuple[int, ...]]]
    kind: str
    params: dict = field(default_factory=dict)

    @property
    def n_prototypes(self) -> int:
        for row in self.tuples:
            if row:
                return len(row[0])
        return 0

    def instance_count(self) -> int:
        return sum(len(row) for row in self.tuples)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for tid, row in enumerate(self.tuples):
                cell = ";".join("(" + ",".join(str(p) for p in tup) + ")" for tup in row)
                f.write(f"{tid}\t{cell}\n")

    @classmethod
    def load(cls, path, kind: str = "", params: dict | None = None):
        tuples = []
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                _, _, cell = line.partition("\t")
                row = []
                if cell:
                    for part in cell.split(";"):
                        row.append(tuple(int(p) for p in part.strip("()").split(",")))
                tuples.append(row)
        return cls(tuples=tuples, kind=kind, params=params or {})


class _Features:
    """Count/set matrices over a dataset for vectorized predicate checks."""

    def __init__(self, seqs: list[tuple[str, ...]]):
        vocab: dict[str, int] = {}
        for s in seqs:
            for t in s:
                if t not in vocab:
                    vocab[t] = len(vocab)
        self.vocab = vocab
        self.ids = [[vocab[t] for t in s] for s in seqs]
        self.lengths = np.array([len(s) for s in seqs], dtype=np.int32)
        n, v = len(seqs), len(vocab)
        self.counts = np.zeros((n, v), dtype=np.int32)
        for i, row in enumerate(self.ids):
            np.add.at(self.counts[i], row, 1)
        self.sets = self.counts > 0
        self.set_keys = [frozenset(s) for s in seqs]
        groups: dict[tuple, int] = {}
        self.content_ids = np.array([groups.setdefault(tuple(row), len(groups))
                                     for row in self.ids], dtype=np.int64)

    def encode(self, seq) -> list[int]:
        return [self.vocab[t] for t in seq if t in self.vocab]

    def set_vec(self, seq) -> np.ndarray:
        v = np.zeros(len(self.vocab), dtype=bool)
        v[self.encode(seq)] = True
        return v

    def dup_mask(self, i: int) -> np.ndarray:
        """True where a candidate's content equals example i's."""
        return self.content_ids == self.content_ids[i]


def build_longshort_index(data: list[Datum], delta: float, cap: int | None,
                          seed: int = 0) -> NeighborhoodIndex:
    """Long-short pairs for every target, reservoir-sampled down to `cap`
    tuples per target when the full set is larger."""
    feats = _Features([d.flat for d in data])
    padded = _PaddedIds(feats)
    n = len(data)
    lengths = feats.lengths.astype(np.float64)
    # candidates sorted by length: the normalized threshold forces the
    # second prototype's length under |diff|/(1-delta), a small prefix
    by_len = np.argsort(feats.lengths, kind="stable").astype(np.int64)
    sorted_lens = feats.lengths[by_len]
    # bigram-count prune: one edit changes at most two bigrams per side,
    # so lev >= bigram bag distance / 2 (separates token reorderings the
    # unigram bag cannot)
    v = len(feats.vocab)
    bigrams = None
    if v * v <= 20000:
        bigrams = np.zeros((n, v * v), dtype=np.int16)
        for i, row in enumerate(feats.ids):
            for a, b in zip(row, row[1:]):
                bigrams[i, a * v + b] += 1
    rng = np.random.default_rng(seed)
    tuples: list[list[tuple[int, ...]]] = []
    for i in range(n):
        li = int(feats.lengths[i])
        limit1 = delta * np.maximum(lengths, li)
        # bag distance lower-bounds lev; cheap vectorized prune
        diff_c = feats.counts[i] - feats.counts
        bag = np.maximum(np.clip(diff_c, 0, None).sum(axis=1),
                         np.clip(-diff_c, 0, None).sum(axis=1))
        ok1 = (bag < limit1 + 1e-6) & ~feats.dup_mask(i)
        if bigrams is not None:
            pre = np.nonzero(ok1)[0]
            dg = bigrams[i].astype(np.int32) - bigrams[pre].astype(np.int32)
            bag2g = np.maximum(np.clip(dg, 0, None).sum(axis=1),
                               np.clip(-dg, 0, None).sum(axis=1))
            cand1 = pre[bag2g < 2.0 * limit1[pre] + 1e-6]
        else:
            cand1 = np.nonzero(ok1)[0]
        row_i = feats.ids[i]
        firsts = padded.norm_ok(row_i, cand1, delta)
        # distinct first prototypes often leave the same difference
        # sequence; scan second-prototype candidates once per distinct diff
        groups: dict[tuple, list[int]] = {}
        for j in firsts:
            drop = feats.sets[j]
            diff = tuple(t for t in row_i if not drop[t])
            if diff:
                groups.setdefault(diff, []).append(int(j))
        reservoir: list[tuple[int, int]] = []
        seen = 0
        cid = feats.content_ids
        for diff, js in groups.items():
            ld = len(diff)
            # lev(diff,k) >= |len(k)-ld| rules out lengths outside the band
            hi = np.searchsorted(sorted_lens, ld / max(1.0 - delta, 1e-9),
                                 side="right")
            band = by_len[:hi]
            diff_set = feats.set_vec([])  # zeros
            diff_set[list(diff)] = True
            covers = ~(diff_set & ~feats.sets[band]).any(axis=1)
            limit2 = delta * np.maximum(lengths[band], ld)
            diff_counts = np.zeros(len(feats.vocab), dtype=np.int32)
            np.add.at(diff_counts, list(diff), 1)
            dc = diff_counts - feats.counts[band]
            bag2 = np.maximum(np.clip(dc, 0, None).sum(axis=1),
                              np.clip(-dc, 0, None).sum(axis=1))
            ok = covers & (bag2 < limit2 + 1e-6) & ~feats.dup_mask(i)[band]
            k_base = padded.norm_ok(list(diff), np.sort(band[ok]), delta)
            k_cids = cid[k_base]
            for j in js:
                for k in k_base[k_cids != cid[j]]:
                    seen += 1
                    if cap is None:
                        reservoir.append((j, int(k)))
                    elif len(reservoir) < cap:
                        reservoir.append((j, int(k)))
                    else:
                        r = int(rng.integers(seen))
                        if r < cap:
                            reservoir[r] = (j, int(k))
        tuples.append(sorted(reservoir))
    return NeighborhoodIndex(tuples=tuples, kind="long_short",
                             params={"delta": delta, "cap": cap, "seed": seed})


def _set_adjacency(feats: _Features) -> list[list[int]]:
    """For each example, the examples whose token SET differs by exactly
    one element (the prior support for long-long recombination)."""
    groups: dict[frozenset, list[int]] = {}
    for i, key in enumerate(feats.set_keys):
        groups.setdefault(key, []).append(i)
    adj: list[set[int]] = [set() for _ in feats.set_keys]
    for key, members in groups.items():
        for tok in key:
            sub = groups.get(key - {tok})
            if sub:
                for a in members:
                    adj[a].update(sub)
                for b in sub:
                    adj[b].update(members)
    return [sorted(s) for s in adj]


def build_longlong_index(data: list[Datum], delta: float, cap_first: int = 10,
                         cap_second: int = 3, seed: int = 0) -> NeighborhoodIndex:
    """Long-long pairs: first prototype one token-set element away from the
    target, second prototype one away from the first and covering the rest.
    Randomly keeps `cap_first` firsts and `cap_second` seconds each."""
    feats = _Features([d.flat for d in data])
    padded = _PaddedIds(feats)
    n = len(data)
    rng = np.random.default_rng(seed)
    adj = _set_adjacency(feats)
    tuples: list[list[tuple[int, ...]]] = []
    for i in range(n):
        sym = (feats.sets != feats.sets[i]).sum(axis=1)
        cand1 = np.nonzero(sym == 1)[0]  # one set element away, never a dup
        row_i = feats.ids[i]
        firsts = [int(j) for j in padded.norm_ok(row_i, cand1, delta)]
        if cap_first is not None and len(firsts) > cap_first:
            firsts = sorted(rng.choice(firsts, size=cap_first, replace=False).tolist())
        row = []
        set_i = feats.sets[i]
        cid = feats.content_ids
        for j in firsts:
            residual = set_i & ~feats.sets[j]
            cand2 = np.array([k for k in adj[j]
                              if cid[k] != cid[i] and cid[k] != cid[j]
                              and not (residual & ~feats.sets[k]).any()],
                             dtype=np.int64)
            seconds = [int(k) for k in padded.norm_ok(row_i, cand2, delta)]
            if cap_second is not None and len(seconds) > cap_second:
                seconds = sorted(rng.choice(seconds, size=cap_second,
                                            replace=False).tolist())
            row.extend((j, int(k)) for k in seconds)
        tuples.append(sorted(row))
    return NeighborhoodIndex(tuples=tuples, kind="long_long",
                             params={"delta": delta, "cap_first": cap_first,
                                     "cap_second": cap_second, "seed": seed})


def omega_scan_aroundright(data: list[Datum], caps: tuple[int, int] = (10, 3),
                           seed: int = 0, delta: float = 0.5):
    """Stream of (target index, prototype pair) under the long-long
    construction with random per-target caps."""
    index = build_longlong_index(data, delta=delta, cap_first=caps[0],
                                 cap_second=caps[1], seed=seed)
    for tid, row in enumerate(index.tuples):
        for tup in row:
            yield tid, tup


def build_1proto_index(data: list[Datum], alpha: float, beta: float,
                       delta: float, cap: int | None = None,
                       seed: int = 0) -> NeighborhoodIndex:
    feats = _Features([d.flat for d in data])
    padded = _PaddedIds(feats)
    rng = np.random.default_rng(seed)
    tuples = []
    for i in range(len(data)):
        sym = (feats.sets != feats.sets[i]).sum(axis=1)
        # alpha*sym + beta*bag lower-bounds the true score
        diff_c = feats.counts[i] - feats.counts
        bag = np.maximum(np.clip(diff_c, 0, None).sum(axis=1),
                         np.clip(-diff_c, 0, None).sum(axis=1))
        cand = np.nonzero((alpha * sym + beta * bag < delta + 1e-6) & ~feats.dup_mask(i))[0]
        if beta == 0.0:
            keep = cand[alpha * sym[cand].astype(np.float64) < delta]
        else:
            d = _lev_to_many(feats.ids[i], padded.mat[cand], padded.lens[cand])
            keep = cand[alpha * sym[cand].astype(np.float64) + beta * d < delta]
        row = [(int(j),) for j in keep]
        if cap is not None and len(row) > cap:
            picked = rng.choice(len(row), size=cap, replace=False)
            row = [row[p] for p in sorted(picked)]
        tuples.append(row)
    return NeighborhoodIndex(tuples=tuples, kind="one_proto",
                             params={"alpha": alpha, "beta": beta,
                                     "delta": delta, "cap": cap, "seed": seed})


def build_morph_index(data: list[Datum], n: int, k: int = 4) -> NeighborhoodIndex:
    """Vectorized morphology neighborhoods (same scores as
    `morph_neighborhood`)."""
    tag_feats = _Features([d.tags for d in data])
    lemma_feats = _Features([d.lemma for d in data])
    flat_feats = _Features([d.flat for d in data])
    tags = tag_feats.sets
    lemmas = lemma_feats.sets
    N = len(data)
    tag_keys = [frozenset(d.tags) for d in data]
    tuples = []
    for i in range(N):
        dup = flat_feats.dup_mask(i)
        sym = (tags != tags[i]).sum(axis=1)
        inter = (lemmas & lemmas[i]).sum(axis=1)
        union = (lemmas | lemmas[i]).sum(axis=1)
        jac = np.where(union > 0, 1.0 - inter / np.maximum(union, 1), 0.0)
        order = np.lexsort((np.arange(N), jac, sym))
        firsts = [int(j) for j in order if not dup[j]][:k]
        if n == 1:
            tuples.append([(j,) for j in firsts])
            continue
        row = []
        tags_differ = np.array([tag_keys[m] != tag_keys[i] for m in range(N)],
                               dtype=np.int32)
        for j in firsts:
            residual = tags[i] & ~tags[j]
            ok = ~dup & ~flat_feats.dup_mask(j)
            ok &= np.array([tag_keys[m] != tag_keys[j] for m in range(N)])
            ok &= ~(residual & ~tags).any(axis=1)
            drift = (tags != tags[j]).sum(axis=1)
            cand = np.nonzero(ok)[0]
            ranked = sorted(cand, key=lambda m: (tags_differ[m], drift[m], m))
            row.extend((j, int(m)) for m in ranked[:k])
        tuples.append(row)
    return NeighborhoodIndex(tuples=tuples, kind=f"morph_{n}", params={"k": k})


def build_index(data: list[Datum], kind: str, seed: int = 0,
                **hyper) -> NeighborhoodIndex:
    """Dispatch on neighborhood kind; hyperparameters per kind."""
    if kind == "long_short":
        return build_longshort_index(data, delta=hyper.get("delta", 0.5),
                                     cap=hyper.get("cap", 12), seed=seed)
    if kind == "long_long":
        return build_longlong_index(data, delta=hyper.get("delta", 0.5),
                                    cap_first=hyper.get("cap_first", 10),
                                    cap_second=hyper.get("cap_second", 3),
                                    seed=seed)
    if kind == "one_proto":
        return build_1proto_index(data, alpha=hyper.get("alpha", 1.0),
                                  beta=hyper.get("beta", 1.0),
                                  delta=hyper.get("delta", 4.0),
                                  cap=hyper.get("cap"), seed=seed)
    if kind in ("morph_1", "morph_2"):
        return build_morph_index(data, n=1 if kind == "morph_1" else 2,
                                 k=hyper.get("k", 4))
    if kind == "none":
        return NeighborhoodIndex(tuples=[[()] for _ in data], kind="none")
    raise ValueError(f"unknown neighborhood kind {kind!r}")
