"""Candidate generation from a trained recombiner and rejection filtering.

Generation draws prototype tuples from the prior support, decodes candidates
(beam search, temperature sampling, or the mixed input-sampled/output-greedy
strategy), and keeps only candidates that contain a rare token (training-set
document frequency below epsilon), are novel (not in the training set), and
are unique among accepted samples. If a round of attempts fails to reach the
target count, the temperature escalates by 0.2 (capped at 1.5); beam search
escalates by switching to temperature sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import SEP, Datum
from .neighborhood import NeighborhoodIndex, _Features, _set_adjacency
from .recombiner import Recombiner, vmf_prior_sample


class GenerationError(RuntimeError):
    """Raised when no candidate survives filtering after all escalations."""

    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


@dataclass
class AugmentedSample:
    datum: Datum
    proto_ids: tuple[int, ...]
    strategy: str
    temperature: float | None
    rare_pass: bool
    novel: bool
    unique: bool

    @property
    def weight(self) -> int:
        return 1 if self.rare_pass else 0

    @property
    def accepted(self) -> bool:
        return self.rare_pass and self.novel and self.unique

    def provenance(self) -> dict:
        return {"protos": list(self.proto_ids), "strategy": self.strategy,
                "temperature": self.temperature}


@dataclass
class PrototypePrior:
    """Support and sampling strategy for generation-time prototype tuples."""

    omega: str                       # "pairs_all" | "pairs_delta1" | "tag_pairs" | "single" | "none"
    strategy: str                    # "uniform" | "length"
    slot_stats: list[tuple[float, float]]
    pools: list[np.ndarray]          # candidate datum ids per slot
    pairs: np.ndarray | None = None  # (P,2) explicit pair support, when finite
    tag_keys: list = field(default_factory=list)


def fit_prototype_prior(index: NeighborhoodIndex, data: list[Datum],
                        strategy: str = "uniform") -> PrototypePrior:
    """Per-slot length statistics over the tuples actually used in training
    (the empirical prior support), plus the sampling pools."""
    tuples = [tup for row in index.tuples for tup in row]
    if not tuples:
        raise ValueError("empty neighborhood index")
    n_slots = len(tuples[0])
    lengths = [[len(data[tup[k]].flat) for tup in tuples] for k in range(n_slots)]
    stats = [(float(np.mean(ls)), float(np.std(ls))) for ls in lengths]
    all_ids = np.arange(len(data))
    flat_lens = np.array([len(d.flat) for d in data])
    pools = []
    for k in range(n_slots):
        if strategy == "length":
            mean, std = stats[k]
            pool = all_ids[flat_lens <= mean + std]
        else:
            pool = all_ids
        if pool.size == 0:
            raise ValueError(f"slot {k}: no candidates satisfy the length bound")
        pools.append(pool)

    if index.kind == "long_long":
        feats = _Features([d.flat for d in data])
        adj = _set_adjacency(feats)
        pairs = np.array([(i, j) for i, js in enumerate(adj) for j in js],
                         dtype=np.int64)
        if strategy == "length":
            m0, s0 = stats[0]
            m1, s1 = stats[1]
            keep = ((flat_lens[pairs[:, 0]] <= m0 + s0)
                    & (flat_lens[pairs[:, 1]] <= m1 + s1))
            pairs = pairs[keep]
        if len(pairs) == 0:
            raise ValueError("no prototype pairs in the prior support")
        omega = "pairs_delta1"
    elif index.kind in ("morph_2",):
        pairs = None
        omega = "tag_pairs"
    elif n_slots == 2:
        pairs = None
        omega = "pairs_all"
    elif n_slots == 1:
        pairs = None
        omega = "single"
    else:
        pairs = None
        omega = "none"
    return PrototypePrior(omega=omega, strategy=strategy, slot_stats=stats,
                          pools=pools, pairs=pairs,
                          tag_keys=[frozenset(d.tags) if d.tags else None
                                    for d in data])


def sample_prototypes(prior: PrototypePrior, rng: np.random.Generator,
                      max_tries: int = 200) -> tuple[int, ...]:
    """Draw one prototype tuple from the prior support."""
    if prior.omega == "none":
        return ()
    if prior.omega == "pairs_delta1":
        return tuple(int(v) for v in prior.pairs[rng.integers(len(prior.pairs))])
    if prior.omega == "single":
        return (int(rng.choice(prior.pools[0])),)
    for _ in range(max_tries):
        i = int(rng.choice(prior.pools[0]))
        j = int(rng.choice(prior.pools[1]))
        if i == j:
            continue
        if prior.omega == "tag_pairs" and prior.tag_keys[i] == prior.tag_keys[j]:
            continue
        return (i, j)
    raise ValueError(f"could not draw a valid tuple from {prior.omega} "
                     f"after {max_tries} tries")


# ---------------------------------------------------------------------------
# decoding


def _gather_state(state, order: np.ndarray):
    from .recombiner import DecoderState
    return DecoderState(h=T.constant(state.h.data[order]),
                        c=T.constant(state.c.data[order]),
                        feed=T.constant(state.feed.data[order]),
                        history=[T.constant(h.data[order]) for h in state.history],
                        prefix=[p[order] for p in state.prefix],
                        z=None if state.z is None else T.constant(state.z.data[order]))


def decode_beam(model: Recombiner, proto_seqs: list[list[int]], width: int,
                max_len: int, rng: np.random.Generator | None = None,
                z: np.ndarray | None = None) -> list[tuple[list[int], float]]:
    """Beam search over one prototype tuple; returns candidates sorted by
    total log-probability (finished lanes only, best first). width=1 is
    greedy decoding."""
    if width < 1:
        raise ValueError("beam width must be >= 1")
    out = decode_beam_batch(model, [proto_seqs], width, max_len, rng, z=z)
    return out[0]

def decode_beam_batch(model: Recombiner, tuples_seqs: list[list[list[int]]],
                      width: int, max_len: int,
                      rng: np.random.Generator | None = None,
                      z: np.ndarray | None = None
                      ) -> list[list[tuple[list[int], float]]]:
    """Beam search over G prototype tuples at once (G*width decode lanes).
    Requires a variant without self-attention history."""
    if model.config.variant == "morph":
        raise ValueError("beam decoding supports the scan variant only")
    G = len(tuples_seqs)
    n = model.config.n_prototypes
    B = G * width
    vocab = model.vocab
    V = len(vocab)
    with T.no_grad():
        protos = [[tuples_seqs[g][k] for g in range(G) for _ in range(width)]
                  for k in range(n)]
        encs = model.encode_prototypes(protos, None)
        if model.config.latent:
            if z is None:
                raise ValueError("latent model requires a z sample")
            zt = T.constant(np.repeat(z, width, axis=0))
        else:
            zt = None
        state = model.init_state(encs, B, z=zt)
        scores = np.full((G, width), -1e30)
        scores[:, 0] = 0.0  # one live lane per group at the start
        alive = np.ones((G, width), dtype=bool)
        tokens = [[[] for _ in range(width)] for _ in range(G)]
        finished: list[list[tuple[list[int], float]]] = [[] for _ in range(G)]
        prev = np.full(B, vocab.bos, dtype=np.int64)
        for _ in range(max_len):
            p, state = model.step(encs, state, prev, rng)
            logp = np.log(np.maximum(p.data, 1e-30)).reshape(G, width, V)
            cand = scores[:, :, None] + np.where(alive[:, :, None], logp, -np.inf)
            flat = cand.reshape(G, width * V)
            top = np.argsort(-flat, axis=1, kind="stable")[:, :width]
            parent = top // V
            tok = top % V
            new_scores = np.take_along_axis(flat, top, axis=1)
            order = (np.arange(G)[:, None] * width + parent).reshape(-1)
            state = _gather_state(state, order)
            prev = tok.reshape(-1)
            new_tokens = [[tokens[g][parent[g, w]] + [int(tok[g, w])]
                           for w in range(width)] for g in range(G)]
            tokens = new_tokens
            scores = new_scores
            alive = np.ones((G, width), dtype=bool)
            for g in range(G):
                for w in range(width):
                    if scores[g, w] <= -1e29:
                        alive[g, w] = False
                    elif tok[g, w] == vocab.eos:
                        finished[g].append((tokens[g][w][:-1], float(scores[g, w])))
                        scores[g, w] = -1e30
                        alive[g, w] = False
            if not alive.any() and all(len(f) for f in finished):
                break
    return [sorted(f, key=lambda c: -c[1])[:width] for f in finished]


def decode_temperature_batch(model: Recombiner, tuples_seqs: list[list[list[int]]],
                             temperature: float, max_len: int,
                             rng: np.random.Generator,
                             z: np.ndarray | None = None,
                             mixed: bool = False,
                             return_partial: bool = False
                             ) -> list[list[int] | None]:
    """Sample one candidate per prototype tuple. With `mixed`, tokens before
    the separator are sampled at the given temperature and the rest decoded
    greedily; candidates that never emit the separator come back as None.
    Unterminated sequences are None unless `return_partial` (prediction
    wants the max-length cut, generation wants the rejection)."""
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    G = len(tuples_seqs)
    n = model.config.n_prototypes
    vocab = model.vocab
    sep = vocab.sep
    with T.no_grad():
        protos = [[tuples_seqs[g][k] for g in range(G)] for k in range(n)]
        encs = model.encode_prototypes(protos, None) if n else []
        zt = None
        if model.config.latent:
            if z is None:
                raise ValueError("latent model requires a z sample")
            zt = T.constant(z)
        state = model.init_state(encs, G, z=zt)
        prev = np.full(G, vocab.bos, dtype=np.int64)
        done = np.zeros(G, dtype=bool)
        saw_sep = np.zeros(G, dtype=bool)
        outs: list[list[int]] = [[] for _ in range(G)]
        for _ in range(max_len):
            p, state = model.step(encs, state, prev, rng)
            probs = p.data.astype(np.float64)
            powered = temperature_sharpen(probs, temperature)
            sampled = np.array([rng.choice(len(vocab), p=powered[g])
                                for g in range(G)], dtype=np.int64)
            greedy = probs.argmax(axis=1)
            nxt = np.where(saw_sep, greedy, sampled) if mixed else sampled
            nxt = np.where(done, vocab.pad, nxt)
            for g in range(G):
                if done[g]:
                    continue
                if nxt[g] == vocab.eos:
                    done[g] = True
                else:
                    outs[g].append(int(nxt[g]))
                    if nxt[g] == sep:
                        saw_sep[g] = True
            if done.all():
                break
            prev = np.where(done, vocab.bos, nxt)
        results: list[list[int] | None] = []
        for g in range(G):
            if mixed and not saw_sep[g]:
                results.append(None)  # no separator: malformed, reject
            elif done[g] or return_partial:
                results.append(outs[g])
            else:
                results.append(None)
    return results


def temperature_sharpen(probs: np.ndarray, temperature: float) -> np.ndarray:
    """Per-step sampling law: renormalized probs**(1/T), identical to
    applying the temperature to the logits of a plain softmax head."""
    logq = np.log(np.maximum(probs, 1e-300)) / temperature
    logq -= logq.max(axis=1, keepdims=True)
    powered = np.exp(logq)
    return powered / powered.sum(axis=1, keepdims=True)


def decode_temperature(model, proto_seqs, temperature, rng, max_len,
                       z=None) -> list[int] | None:
    (out,) = decode_temperature_batch(model, [proto_seqs], temperature,
                                      max_len, rng, z=z)
    return out


def decode_mixed(model, proto_seqs, temperature, rng, max_len,
                 z=None) -> list[int] | None:
    (out,) = decode_temperature_batch(model, [proto_seqs], temperature,
                                      max_len, rng, z=z, mixed=True)
    return out


# ---------------------------------------------------------------------------
# filtering


def min_marginal(tokens, marginals: dict[str, float],
                 scope: set[str] | None = None) -> float:
    """Smallest training-set document frequency among the datum's tokens
    (restricted to `scope` when given); unseen tokens count as 0."""
    vals = [marginals.get(t, 0.0) for t in tokens
            if scope is None or t in scope]
    return min(vals) if vals else 1.0

def rejection_filter(candidates: list[tuple[Datum, tuple, str, float | None]],
                     marginals: dict[str, float], eps: float,
                     train_flats: set, scope: set[str] | None = None,
                     already: set | None = None) -> list[AugmentedSample]:
    """Evaluate the rare/novel/unique acceptance rule on decoded candidates.
    `already` carries flats accepted in earlier rounds (mutated in place)."""
    seen = already if already is not None else set()
    out = []
    for datum, proto_ids, strategy, temp in candidates:
        flat = datum.flat
        rare = min_marginal(flat, marginals, scope) < eps
        novel = flat not in train_flats
        unique = flat not in seen
        sample = AugmentedSample(datum=datum, proto_ids=proto_ids,
                                 strategy=strategy, temperature=temp,
                                 rare_pass=rare, novel=novel, unique=unique)
        if sample.accepted:
            seen.add(flat)
        out.append(sample)
    return out


def _tokens_to_datum(tokens: list[str], task: str) -> Datum | None:
    if tokens.count(SEP) != 1:
        return None
    cut = tokens.index(SEP)
    x, y = tokens[:cut], tokens[cut + 1:]
    if not x or not y:
        return None
    return Datum(x=tuple(x), y=tuple(y), task=task)


@dataclass
class SamplerConfig:
    count: int = 400
    strategy: str = "beam"          # "beam" | "temperature" | "mixed"
    beam_width: int = 4
    temperature: float = 0.4
    epsilon: float = 0.1
    rare_scope: str = "all"          # "all" | "tags"
    max_len: int = 120
    batch_draws: int = 64
    round_budget: int = 4000         # candidate draws per temperature level
    t_step: float = 0.2
    t_cap: float = 1.5
    seed: int = 0


def generate_augmented(model: Recombiner, prior: PrototypePrior,
                       data: list[Datum], marginals: dict[str, float],
                       cfg: SamplerConfig, task: str = "scan",
                       log=None) -> tuple[list[AugmentedSample], dict]:
    """Generate `cfg.count` accepted samples, escalating temperature when a
    round's attempt budget is exhausted. Returns (accepted, report); raises
    GenerationError if nothing is ever accepted."""
    vocab = model.vocab
    rng = np.random.default_rng(cfg.seed)
    train_flats = {d.flat for d in data}
    scope = None
    if cfg.rare_scope == "tags":
        scope = {t for d in data if d.tags for t in d.tags}
    accepted: list[AugmentedSample] = []
    seen: set = set()
    report = {"attempted": 0, "accepted": 0, "rejected_not_rare": 0,
              "rejected_not_novel": 0, "rejected_duplicate": 0,
              "rejected_malformed": 0, "escalations": [],
              "strategy": cfg.strategy, "final_temperature": None}
    strategy, temp = cfg.strategy, cfg.temperature
    enc_cache = [vocab.encode(d.flat) for d in data]

    while len(accepted) < cfg.count:
        round_attempts = 0
        before = len(accepted)
        while round_attempts < cfg.round_budget and len(accepted) < cfg.count:
            draws = min(cfg.batch_draws, cfg.round_budget - round_attempts)
            tuples = [sample_prototypes(prior, rng) for _ in range(draws)]
            tuples_seqs = [[enc_cache[p] for p in tup] for tup in tuples]
            z = None
            if model.config.latent:
                z = vmf_prior_sample(model.config.latent, model.config.mu_max,
                                     rng, batch=draws)
            batch_out: list[tuple[tuple, list[list[int]] ]] = []
            if strategy == "beam":
                ranked = decode_beam_batch(model, tuples_seqs, cfg.beam_width,
                                           cfg.max_len, rng, z=z)
                for tup, cands in zip(tuples, ranked):
                    batch_out.append((tup, [c for c, _ in cands]))
            else:
                outs = decode_temperature_batch(model, tuples_seqs, temp,
                                                cfg.max_len, rng, z=z,
                                                mixed=(strategy == "mixed"))
                for tup, cand in zip(tuples, outs):
                    batch_out.append((tup, [] if cand is None else [cand]))
            round_attempts += draws
            report["attempted"] += draws
            cand_data = []
            for tup, cands in batch_out:
                for ids in cands:
                    datum = _tokens_to_datum(vocab.decode(ids), task)
                    if datum is None:
                        report["rejected_malformed"] += 1
                        continue
                    cand_data.append((datum, tup, strategy,
                                      temp if strategy != "beam" else None))
            for s in rejection_filter(cand_data, marginals, cfg.epsilon,
                                      train_flats, scope, already=seen):
                if s.accepted:
                    accepted.append(s)
                    if len(accepted) == cfg.count:
                        break
                elif not s.rare_pass:
                    report["rejected_not_rare"] += 1
                elif not s.novel:
                    report["rejected_not_novel"] += 1
                else:
                    report["rejected_duplicate"] += 1
        if len(accepted) >= cfg.count:
            break
        gained = len(accepted) - before
        # budget exhausted: escalate temperature (beam switches to sampling)
        if strategy == "beam":
            strategy = "temperature"
            temp = cfg.temperature + cfg.t_step
        elif temp + cfg.t_step <= cfg.t_cap + 1e-9:
            temp = round(temp + cfg.t_step, 10)
        else:
            if not accepted:
                raise GenerationError(
                    "all candidates rejected by resampling at every "
                    f"temperature up to {cfg.t_cap}", report)
            report["timeout"] = True
            break
        report["escalations"].append({"strategy": strategy, "temperature": temp,
                                      "accepted_so_far": len(accepted),
                                      "gained_last_round": gained})
        if log:
            log(f"escalating to {strategy} T={temp} "
                f"({len(accepted)}/{cfg.count} accepted)")
    report["accepted"] = len(accepted)
    report["final_temperature"] = temp if strategy != "beam" else None
    return accepted, report
