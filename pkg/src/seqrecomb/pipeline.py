"""End-to-end experiments: conditional-model distillation, evaluation
metrics, the direct-inference baseline, significance testing, and the staged
pipeline (split -> neighbors -> train-recomb -> sample -> train-cond -> eval
-> analyze) with on-disk artifacts at every stage.

Experiment configs are plain nested dicts (JSON on disk); `preset` supplies
the standard-scale defaults for the three named experiments and any field may
be overridden. Every stage derives its randomness from the run seed, so a
rerun with the same config and seed writes byte-identical reports.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import corpus as C
from . import neighborhood as N
from . import tensor as T
from .recombiner import ModelConfig, Recombiner, TrainConfig, train_recombiner
from .sampler import (AugmentedSample, GenerationError, SamplerConfig,
                      decode_beam_batch, decode_temperature_batch,
                      fit_prototype_prior, generate_augmented, min_marginal)

STAGES = ("split", "neighbors", "train-recomb", "sample", "train-cond",
          "eval", "analyze")
STAGE_EXIT_CODES = {name: i + 2 for i, name in enumerate(STAGES)}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.exit_code = STAGE_EXIT_CODES.get(stage, 1)


# ---------------------------------------------------------------------------
# metrics


def exact_match(preds: list, golds: list) -> float:
    """Fraction of predictions exactly equal to their gold sequence."""
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} vs {len(golds)}")
    if not preds:
        return 0.0
    return sum(1 for p, g in zip(preds, golds) if list(p) == list(g)) / len(preds)


def token_f1(preds: list, golds: list) -> float:
    """Micro token F1 over per-example multiset intersections."""
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} vs {len(golds)}")
    inter = pred_total = gold_total = 0
    for p, g in zip(preds, golds):
        cp, cg = Counter(p), Counter(g)
        inter += sum(min(cp[t], cg[t]) for t in cp)
        pred_total += len(p)
        gold_total += len(g)
    precision = inter / pred_total if pred_total else 0.0
    recall = inter / gold_total if gold_total else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def paired_ttest(a, b) -> float:
    """Two-sided paired t-test p-value; identical vectors give 1.0."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two equal-length score vectors with >= 2 runs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        return 1.0 if d.mean() == 0.0 else 0.0
    t = d.mean() / (sd / np.sqrt(len(d)))
    return float(2.0 * sps.t.sf(abs(t), len(d) - 1))


# ---------------------------------------------------------------------------
# conditional model


def conditional_config(model_cfg: dict) -> ModelConfig:
    """Conditional predictor: the same architecture family with the
    prototype copy streams removed and a single source encoder over x.
    Runs dropout-free so greedy prediction is deterministic."""
    cfg = dict(model_cfg)
    cfg.update(n_prototypes=1, copy="off", dropout_enc_in=0.0,
               dropout_dec_emb=0.0, dropout_h_out=0.0, dropout_copy_idx=0.0,
               latent=0)
    return ModelConfig.from_dict(cfg)


def predict_batch(model: Recombiner, xs: list[list[int]],
                  max_len: int) -> list[list[int]]:
    """Greedy y predictions for a batch of inputs."""
    if model.config.variant == "scan":
        out = decode_beam_batch(model, [[x] for x in xs], 1, max_len, rng=None)
        return [cands[0][0] if cands else [] for cands in out]
    res = decode_temperature_batch(model, [[x] for x in xs], 1e-6, max_len,
                                   np.random.default_rng(0),
                                   return_partial=True)
    return [[] if r is None else r for r in res]


def predict(model: Recombiner, x_tokens, max_len: int = 200) -> list[str]:
    """Greedy decode for one input; terminates at the end token or max_len."""
    ids = model.vocab.encode(x_tokens)
    (pred,) = predict_batch(model, [ids], max_len)
    return model.vocab.decode(pred)


def resample_existing(train: list[C.Datum], marginals: dict[str, float],
                      eps: float, factor: int,
                      scope: set[str] | None = None) -> list[C.Datum]:
    """Epoch stream that repeats rare examples (min marginal < eps) `factor`
    times instead of synthesizing new data."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    out = []
    for d in train:
        reps = factor if min_marginal(d.flat, marginals, scope) < eps else 1
        out.extend([d] * reps)
    return out


@dataclass
class CondTrainConfig:
    epochs: int = 150
    lr: float = 0.002
    clip_norm: float | None = 1.0
    batch_size: int = 32
    mode: str = "mix"                 # "mix" (p_aug batches) | "concat"
    p_aug: float = 0.01
    seed: int = 0
    max_len: int = 200
    early_stop: dict | None = None    # {"every","min_epochs","patience","threshold","dev_size"}
    resample_factor: int = 1          # upweight existing rare examples
    resample_eps: float | None = None
    rare_scope: set | None = None


def train_conditional(train: list[C.Datum], augmented: list[C.Datum],
                      model: Recombiner, ccfg: CondTrainConfig,
                      log=None) -> tuple[list[float], dict]:
    """Distill into the conditional model. `mix` mode draws each batch from
    the augmented pool with probability p_aug; `concat` shuffles augmented
    examples into the stream. Early stopping tracks exact match on a dev
    slice of the training stream (plus augmented examples when present)."""
    if not 0.0 <= ccfg.p_aug <= 1.0:
        raise ValueError(f"p_aug must be in [0,1], got {ccfg.p_aug}")
    vocab = model.vocab
    base = list(train)
    if ccfg.resample_factor > 1:
        marg = C.token_marginals(train)
        eps = ccfg.resample_eps
        if eps is None:
            raise ValueError("resampling requires an epsilon")
        base = resample_existing(train, marg, eps, ccfg.resample_factor,
                                 ccfg.rare_scope)
    if ccfg.mode == "concat":
        base = base + list(augmented)
        aug_pool: list[C.Datum] = []
    elif ccfg.mode == "mix":
        aug_pool = list(augmented)
    else:
        raise ValueError(f"unknown conditional mode {ccfg.mode!r}")

    enc_x = {id(d): vocab.encode(d.x) for d in base + aug_pool}
    enc_y = {id(d): vocab.encode(d.y) for d in base + aug_pool}
    master = np.random.SeedSequence(ccfg.seed)
    shuffle_rng, mix_rng, dev_rng = (np.random.default_rng(s)
                                     for s in master.spawn(3))
    opt = T.AdamState(model.params, lr=ccfg.lr, clip_norm=ccfg.clip_norm)

    es = ccfg.early_stop
    dev: list[C.Datum] = []
    if es:
        dev_size = es.get("dev_size", 256)
        pick = dev_rng.choice(len(base), size=min(dev_size, len(base)),
                              replace=False)
        dev = [base[i] for i in pick]
        if aug_pool:
            pick = dev_rng.choice(len(aug_pool),
                                  size=min(dev_size // 2, len(aug_pool)),
                                  replace=False)
            dev += [aug_pool[i] for i in pick]

    def dev_em() -> float:
        xs = [vocab.encode(d.x) for d in dev]
        preds = predict_batch(model, xs, ccfg.max_len)
        golds = [vocab.encode(d.y) for d in dev]
        return exact_match(preds, golds)

    trace = []
    info = {"aug_batches": 0, "total_batches": 0, "stopped_epoch": None}
    best_em, since_best = -1.0, 0
    for epoch in range(ccfg.epochs):
        order = np.arange(len(base))
        shuffle_rng.shuffle(order)
        total, count = 0.0, 0
        for start in range(0, len(base), ccfg.batch_size):
            take = order[start:start + ccfg.batch_size]
            info["total_batches"] += 1
            if aug_pool and mix_rng.random() < ccfg.p_aug:
                info["aug_batches"] += 1
                idx = mix_rng.choice(len(aug_pool),
                                     size=min(ccfg.batch_size, len(aug_pool)),
                                     replace=False)
                batch = [aug_pool[i] for i in idx]
            else:
                batch = [base[i] for i in take]
            targets = [enc_y[id(d)] for d in batch]
            xs = [[enc_x[id(d)] for d in batch]]
            opt.zero_grad()
            loss, per_nll = model.sequence_nll_batch(targets, xs, train=True)
            T.backward(loss)
            opt.step()
            total += float(per_nll.sum())
            count += len(batch)
        trace.append(total / max(count, 1))
        if log:
            log(f"conditional epoch {epoch + 1}/{ccfg.epochs}: "
                f"mean nll {trace[-1]:.4f}")
        if es and (epoch + 1) % es.get("every", 2) == 0 \
                and (epoch + 1) >= es.get("min_epochs", 4):
            em = dev_em()
            if log:
                log(f"  dev exact match {em:.4f}")
            if em >= es.get("threshold", 0.995):
                info["stopped_epoch"] = epoch + 1
                break
            if em > best_em + 1e-9:
                best_em, since_best = em, 0
            else:
                since_best += 1
                if since_best >= es.get("patience", 5):
                    info["stopped_epoch"] = epoch + 1
                    break
    return trace, info


# ---------------------------------------------------------------------------
# direct inference


class XRetriever:
    """Input-side prototype retrieval over a fixed training list; feature
    matrices are built once so per-query work is a couple of batched
    distance computations."""

    def __init__(self, train: list[C.Datum], kind: str, delta: float = 0.5):
        if kind not in ("long_short", "long_long"):
            raise ValueError(f"direct inference unsupported for kind {kind!r}")
        self.train = train
        self.kind = kind
        self.delta = delta
        self.feats = N._Features([d.x for d in train])
        self.padded = N._PaddedIds(self.feats)

    def pairs(self, x: tuple, cap: int, rng: np.random.Generator
              ) -> list[tuple[int, int]]:
        feats, padded, delta = self.feats, self.padded, self.delta
        n = len(self.train)
        if any(t not in feats.vocab for t in x):
            return []  # unseen token: nothing can cover it
        x_ids = feats.encode(x)
        x_set = feats.set_vec(x)
        all_ids = np.arange(n)
        not_self = np.array([self.train[i].x != x for i in range(n)])
        out: list[tuple[int, int]] = []
        if self.kind == "long_short":
            firsts = padded.norm_ok(x_ids, all_ids[not_self], delta)
            for j in firsts:
                drop = feats.sets[j]
                diff_ids = [tid for tid in x_ids if not drop[tid]]
                if not diff_ids:
                    continue
                diff_set = np.zeros(len(feats.vocab), dtype=bool)
                diff_set[diff_ids] = True
                covers = ~(diff_set & ~feats.sets).any(axis=1)
                cand = all_ids[covers & not_self
                               & (feats.content_ids != feats.content_ids[j])]
                for k in padded.norm_ok(diff_ids, cand, delta):
                    out.append((int(j), int(k)))
                if len(out) >= 4 * cap:
                    break
        else:
            sym = (feats.sets != x_set).sum(axis=1)
            firsts = padded.norm_ok(x_ids, all_ids[(sym == 1) & not_self], delta)
            seconds_ok = padded.norm_ok(x_ids, all_ids[not_self], delta)
            second_set = set(int(s) for s in seconds_ok)
            for j in firsts:
                residual = x_set & ~feats.sets[j]
                for k in second_set:
                    if k == j or feats.content_ids[k] == feats.content_ids[j]:
                        continue
                    if (feats.sets[j] != feats.sets[k]).sum() != 1:
                        continue
                    if (residual & ~feats.sets[k]).any():
                        continue
                    out.append((int(j), int(k)))
                if len(out) >= 4 * cap:
                    break
        if len(out) > cap:
            idx = rng.choice(len(out), size=cap, replace=False)
            out = [out[i] for i in sorted(idx)]
        return out


def _decode_continuations(model: Recombiner, tuples_seqs, prefix: list[int],
                          n_samples: int, temperature: float,
                          rng: np.random.Generator, max_len: int) -> list[list[int]]:
    """Free decode after teacher-forcing a prefix; greedy plus sampled
    continuations for each prototype tuple."""
    vocab = model.vocab
    G = len(tuples_seqs)
    lanes = G * (1 + n_samples)
    with T.no_grad():
        protos = [[tuples_seqs[g][k] for g in range(G)
                   for _ in range(1 + n_samples)]
                  for k in range(model.config.n_prototypes)]
        encs = model.encode_prototypes(protos, None)
        state = model.init_state(encs, lanes)
        seq = [vocab.bos] + prefix
        for t, tok in enumerate(seq):
            p, state = model.step(encs, state, np.full(lanes, tok), None)
        outs: list[list[int]] = [[] for _ in range(lanes)]
        done = np.zeros(lanes, dtype=bool)
        greedy_lane = np.array([i % (1 + n_samples) == 0 for i in range(lanes)])
        probs = p.data
        prev = None
        for _ in range(max_len):
            logq = np.log(np.maximum(probs.astype(np.float64), 1e-300))
            sharp = np.exp(logq / temperature
                           - (logq / temperature).max(axis=1, keepdims=True))
            sharp /= sharp.sum(axis=1, keepdims=True)
            nxt = np.empty(lanes, dtype=np.int64)
            for i in range(lanes):
                if greedy_lane[i]:
                    nxt[i] = probs[i].argmax()
                else:
                    nxt[i] = rng.choice(len(vocab), p=sharp[i])
            for i in range(lanes):
                if done[i]:
                    continue
                if nxt[i] == vocab.eos:
                    done[i] = True
                else:
                    outs[i].append(int(nxt[i]))
            if done.all():
                break
            prev = np.where(done, vocab.bos, nxt)
            p, state = model.step(encs, state, prev, None)
            probs = p.data
    return [outs[i] for i in range(lanes) if done[i]]


def direct_inference(model: Recombiner, train: list[C.Datum], x_tokens,
                     kind: str, delta: float = 0.5, tuple_cap: int = 4,
                     n_samples: int = 3, temperature: float = 0.4,
                     max_len: int = 120, seed: int = 0,
                     retriever: XRetriever | None = None
                     ) -> tuple[list[str], dict]:
    """Predict y for x by sampling candidate continuations conditioned on
    x-retrieved prototypes and reranking them by total recombiner
    log-likelihood over the retrieved tuples. Falls back to the nearest
    examples (flagged) when the neighborhood is empty."""
    vocab = model.vocab
    rng = np.random.default_rng(seed)
    x = tuple(x_tokens)
    info = {"fallback": False, "n_tuples": 0, "n_candidates": 0}
    if retriever is None:
        retriever = XRetriever(train, kind, delta)
    pairs = retriever.pairs(x, tuple_cap, rng)
    if not pairs:
        info["fallback"] = True
        dists = [(N.lev_norm(x, d.x), i) for i, d in enumerate(train)]
        dists.sort()
        nearest = [i for _, i in dists[:2]]
        pairs = [(nearest[0], nearest[-1])]
    info["n_tuples"] = len(pairs)
    enc = [vocab.encode(d.flat) for d in train]
    tuples_seqs = [[enc[j], enc[k]] for j, k in pairs]
    prefix = vocab.encode(list(x) + [C.SEP])
    conts = _decode_continuations(model, tuples_seqs, prefix, n_samples,
                                  temperature, rng, max_len)
    seen, candidates = set(), []
    for cont in conts:
        key = tuple(cont)
        if key not in seen and cont:
            seen.add(key)
            candidates.append(cont)
    if not candidates:
        return [], info
    info["n_candidates"] = len(candidates)
    full = [prefix[:-1] + [vocab.sep] + c for c in candidates]
    totals = np.zeros(len(candidates))
    for tup in tuples_seqs:
        _, per = model.sequence_nll_batch(full, [[tup[0]] * len(full),
                                                 [tup[1]] * len(full)])
        totals -= per
    best = int(np.argmax(totals))
    return vocab.decode(candidates[best]), info


# ---------------------------------------------------------------------------
# sample analysis


def analyze_samples(samples: list[C.Datum]) -> dict:
    """Oracle correctness of generated command/action pairs: exact fraction
    over well-formed inputs, with malformed inputs bucketed separately."""
    n = len(samples)
    invalid = correct = incorrect = 0
    for d in samples:
        actions = C.scan_interpret(d.x)
        if actions is None:
            invalid += 1
        elif tuple(actions) == d.y:
            correct += 1
        else:
            incorrect += 1
    valid = correct + incorrect
    return {"n": n, "invalid_x": invalid, "correct": correct,
            "incorrect": incorrect,
            "invalid_x_fraction": invalid / n if n else 0.0,
            "exact_fraction": correct / valid if valid else 0.0,
            "exact_fraction_of_all": correct / n if n else 0.0}


# ---------------------------------------------------------------------------
# experiment configuration


def preset(name: str) -> dict:
    """Standard-scale configuration for a named experiment."""
    if name == "scan-jump":
        return {
            "task": "scan-jump",
            "data": {"train_subsample": None, "subsample_seed": 0},
            "neighborhood": {"kind": "long_short", "delta": 0.5, "cap": 12},
            "model": {"n_prototypes": 2, "variant": "scan", "hidden": 512,
                      "embedding": 64, "attention": 128, "copy": "joint",
                      "dropout_enc_in": 0.5, "dropout_dec_emb": 0.5,
                      "dropout_h_out": 0.7, "dropout_copy_idx": 0.5,
                      "latent": 0, "mu_max": 10.0, "kappa": 25.0,
                      "eps_vmf": 1.0},
            "recomb_train": {"epochs": 8, "lr": 0.002, "clip_norm": 1.0,
                             "batch_size": 32},
            "sampling": {"count": 400, "strategy": "beam", "beam_width": 4,
                         "temperature": 0.4, "epsilon": "auto",
                         "rare_hints": 1, "rare_scope": "all",
                         "prior": "length", "batch_draws": 64,
                         "round_budget": 6000, "t_step": 0.2, "t_cap": 1.5},
            "conditional": {"epochs": 150, "lr": 0.002, "clip_norm": 1.0,
                            "batch_size": 32, "mode": "mix", "p_aug": 0.01,
                            "early_stop": None, "resample_factor": 1},
            "evaluation": {"test_limit": None, "max_len": 200},
            "seed": 0,
        }
    if name == "scan-around-right":
        cfg = preset("scan-jump")
        cfg.update(task="scan-around-right")
        cfg["neighborhood"] = {"kind": "long_long", "delta": 0.5,
                               "cap_first": 10, "cap_second": 3}
        cfg["recomb_train"]["epochs"] = 3
        cfg["sampling"].update(strategy="temperature", temperature=0.4,
                               epsilon=1.0, prior="length")
        cfg["conditional"]["p_aug"] = 0.2
        return cfg
    if name == "morph-analysis":
        return {
            "task": "morph",
            "data": {"path": None, "fixture": None},
            "split": {"hints": 8, "train_size": 1000, "test_size": 100},
            "neighborhood": {"kind": "morph_1", "k": 4},
            "model": {"n_prototypes": 1, "variant": "morph", "hidden": 1024,
                      "embedding": 1024, "attention": 1024, "copy": "gated",
                      "dropout_enc_in": 0.0, "dropout_dec_emb": 0.0,
                      "dropout_h_out": 0.0, "dropout_copy_idx": 0.0,
                      "latent": 0, "mu_max": 10.0, "kappa": 25.0,
                      "eps_vmf": 1.0},
            "recomb_train": {"epochs": 25, "lr": 0.0001, "clip_norm": None,
                             "batch_size": 32},
            "sampling": {"count": 180, "strategy": "mixed", "temperature": 0.5,
                         "epsilon": "auto", "rare_scope": "tags",
                         "prior": "uniform", "batch_draws": 64,
                         "round_budget": 6000, "t_step": 0.2, "t_cap": 1.5},
            "conditional": {"epochs": 100, "lr": 0.0001, "clip_norm": None,
                            "batch_size": 32, "mode": "concat", "p_aug": 0.0,
                            "early_stop": None, "resample_factor": 1},
            "evaluation": {"test_limit": None, "max_len": 200},
            "seed": 0,
        }
    raise ValueError(f"unknown preset {name!r}; "
                     f"expected scan-jump, scan-around-right, or morph-analysis")


def merge_config(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = merge_config(out[key], val)
        else:
            out[key] = val
    return out


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# experiment stages


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass
class Experiment:
    """One experiment run rooted at out_dir; stages read the artifacts of
    earlier stages from disk, so they can run individually."""

    config: dict
    out_dir: str

    def __post_init__(self):
        os.makedirs(self.out_dir, exist_ok=True)
        self.seed = int(self.config.get("seed", 0))
        seq = np.random.SeedSequence(self.seed)
        (self.split_seed, self.neigh_seed, self.recomb_seed, self.sample_seed,
         self.cond_seed, self.eval_seed) = [int(s.generate_state(1)[0])
                                            for s in seq.spawn(6)]
        _write_json(self._p("config.json"), self.config)

    def _p(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    # -- split ----------------------------------------------------------

    def stage_split(self) -> C.Split:
        cfg = self.config
        task = cfg["task"]
        try:
            if task in ("scan-jump", "scan-around-right"):
                corpus = C.generate_corpus()
                split = (C.jump_split(corpus) if task == "scan-jump"
                         else C.around_right_split(corpus))
                sub = cfg.get("data", {}).get("train_subsample")
                if sub:
                    rng = np.random.default_rng(
                        cfg.get("data", {}).get("subsample_seed", self.split_seed))
                    keep = [d for d in split.train if d.x == ("jump",)]
                    rest = [d for d in split.train if d.x != ("jump",)]
                    idx = rng.choice(len(rest), size=min(sub, len(rest)),
                                     replace=False)
                    split.train = keep + [rest[i] for i in sorted(idx)]
                C.write_scan(self._p("train.txt"), split.train)
                for name, test in split.tests.items():
                    C.write_scan(self._p(f"test_{name}.txt"), test)
            elif task == "morph":
                data_cfg = cfg.get("data", {})
                if data_cfg.get("fixture"):
                    fx = data_cfg["fixture"]
                    pool = C.generate_morph_fixture(
                        fx["past"], fx["future"], fx["other"],
                        seed=fx.get("seed", 0))
                elif data_cfg.get("path"):
                    pool = C.load_sigmorphon(data_cfg["path"])
                else:
                    raise ValueError("morph task needs data.path or data.fixture")
                sp = cfg.get("split", {})
                split = C.build_fewshot_split(
                    pool, hints=sp.get("hints", 8),
                    seed=sp.get("seed", self.split_seed),
                    train_size=sp.get("train_size", 1000),
                    test_size=sp.get("test_size", 100))
                C.write_sigmorphon(self._p("train.tsv"), split.train)
                for name, test in split.tests.items():
                    C.write_sigmorphon(self._p(f"test_{name}.tsv"), test)
            else:
                raise ValueError(f"unknown task {task!r}")
        except (ValueError, OSError) as exc:
            raise StageError("split", str(exc)) from exc
        split.check()
        return split

    def load_split(self) -> C.Split:
        task = self.config["task"]
        if task == "morph":
            train = C.load_sigmorphon(self._p("train.tsv"))
            tests = {}
            for name in ("pst", "fut", "other"):
                path = self._p(f"test_{name}.tsv")
                if os.path.exists(path):
                    tests[name] = C.load_sigmorphon(path)
        else:
            train = C.load_scan(self._p("train.txt"))
            name = "jump" if task == "scan-jump" else "around_right"
            tests = {name: C.load_scan(self._p(f"test_{name}.txt"))}
        return C.Split(train=train, tests=tests,
                       hints=self.config.get("split", {}).get("hints", 0))

    # -- recombiner-view data -------------------------------------------

    def recomb_view(self, train: list[C.Datum]) -> list[C.Datum]:
        if self.config["task"] == "morph":
            return [C.datum_views(d) for d in train]  # reinflection order
        return train

    # -- neighbors -------------------------------------------------------

    def stage_neighbors(self, train: list[C.Datum]) -> N.NeighborhoodIndex:
        ncfg = dict(self.config["neighborhood"])
        kind = ncfg.pop("kind")
        try:
            index = N.build_index(self.recomb_view(train), kind,
                                  seed=self.neigh_seed, **ncfg)
        except ValueError as exc:
            raise StageError("neighbors", str(exc)) from exc
        index.save(self._p("index.tsv"))
        return index

    def load_index(self) -> N.NeighborhoodIndex:
        return N.NeighborhoodIndex.load(self._p("index.tsv"),
                                        kind=self.config["neighborhood"]["kind"])

    # -- recombiner training ---------------------------------------------

    def stage_train_recomb(self, train: list[C.Datum],
                           index: N.NeighborhoodIndex, log=None) -> Recombiner:
        cfg = self.config
        data = self.recomb_view(train)
        vocab = C.Vocabulary.from_data(data + train)
        mcfg = ModelConfig.from_dict(cfg["model"])
        model = Recombiner(mcfg, vocab, seed=self.recomb_seed)
        tc = cfg["recomb_train"]
        try:
            trace = train_recombiner(
                data, index, model,
                TrainConfig(epochs=tc["epochs"], lr=tc["lr"],
                            clip_norm=tc.get("clip_norm"),
                            batch_size=tc.get("batch_size", 32),
                            seed=self.recomb_seed), log=log)
        except ValueError as exc:
            raise StageError("train-recomb", str(exc)) from exc
        model.save(self._p("recombiner.ckpt"))
        with open(self._p("recomb_loss.txt"), "w") as f:
            for i, v in enumerate(trace, 1):
                f.write(f"{i}\t{v:.6f}\n")
        return model

    # -- sampling ---------------------------------------------------------

    def stage_sample(self, train: list[C.Datum], index: N.NeighborhoodIndex,
                     model: Recombiner, log=None) -> list[C.Datum]:
        cfg = self.config
        scfg = cfg["sampling"]
        if scfg.get("count", 0) == 0:
            C.write_lines(self._p("augmented.txt"), [])
            _write_json(self._p("generation_report.json"),
                        {"attempted": 0, "accepted": 0})
            return []
        data = self.recomb_view(train)
        eps = scfg["epsilon"]
        if eps == "auto":
            hints = scfg.get("rare_hints",
                             cfg.get("split", {}).get("hints", 1))
            eps = (hints + 0.5) / len(train)
        marginals = C.token_marginals(data)
        max_len = 2 * max(len(d.flat) for d in data) + 5
        sampler_cfg = SamplerConfig(
            count=scfg["count"], strategy=scfg["strategy"],
            beam_width=scfg.get("beam_width", 4),
            temperature=scfg.get("temperature", 0.4), epsilon=eps,
            rare_scope=scfg.get("rare_scope", "all"), max_len=max_len,
            batch_draws=scfg.get("batch_draws", 64),
            round_budget=scfg.get("round_budget", 4000),
            t_step=scfg.get("t_step", 0.2), t_cap=scfg.get("t_cap", 1.5),
            seed=self.sample_seed)
        try:
            prior = fit_prototype_prior(index, data,
                                        strategy=scfg.get("prior", "uniform"))
            task = "morph" if cfg["task"] == "morph" else "scan"
            samples, report = generate_augmented(model, prior, data, marginals,
                                                 sampler_cfg, task=task, log=log)
        except GenerationError as exc:
            _write_json(self._p("generation_report.json"), exc.report)
            C.write_lines(self._p("augmented.txt"), [])
            if log:
                log(f"sample stage produced nothing: {exc}")
            return []
        except ValueError as exc:
            raise StageError("sample", str(exc)) from exc
        report["epsilon"] = eps
        gen_data = [s.datum for s in samples]
        C.write_lines(self._p("augmented_generated.txt"), gen_data,
                      [s.provenance() for s in samples])
        if cfg["task"] == "morph":
            # generated in reinflection order (lemma chars + tags -> form);
            # reorder for the analysis task before distillation
            tag_vocab = {t for d in data if d.tags for t in d.tags}
            final, prov = [], []
            for s in samples:
                x, y = s.datum.x, s.datum.y
                tags = [t for t in x if t in tag_vocab]
                chars = [t for t in x if t not in tag_vocab]
                lemma = "".join(" " if c == C.SPACE_CHAR else c for c in chars)
                form = "".join(" " if c == C.SPACE_CHAR else c for c in y)
                if not lemma or not tags or not form:
                    continue
                final.append(C.morph_datum(lemma, form, tags, order="analysis"))
                prov.append(s.provenance())
            report["reordered"] = len(final)
        else:
            final = gen_data
            prov = [s.provenance() for s in samples]
        C.write_lines(self._p("augmented.txt"), final, prov)
        _write_json(self._p("generation_report.json"), report)
        return final

    def load_augmented(self) -> list[C.Datum]:
        path = self._p("augmented.txt")
        if not os.path.exists(path):
            return []  # baseline runs skip the sample stage entirely
        task = "morph" if self.config["task"] == "morph" else "scan"
        data, _ = C.read_lines(path, task=task)
        return data

    # -- conditional -------------------------------------------------------

    def stage_train_cond(self, train: list[C.Datum], augmented: list[C.Datum],
                         log=None) -> Recombiner:
        cfg = self.config
        vocab = C.Vocabulary.from_data(self.recomb_view(train) + train)
        ccfg_d = cfg["conditional"]
        mcfg = conditional_config(cfg["model"])
        model = Recombiner(mcfg, vocab, seed=self.cond_seed)
        scope = None
        if cfg["task"] == "morph":
            scope = {t for d in train if d.tags for t in d.tags}
        eps = None
        if ccfg_d.get("resample_factor", 1) > 1:
            eps = ccfg_d.get("resample_eps")
            if eps is None:
                hints = cfg.get("split", {}).get("hints", 1)
                eps = (hints + 0.5) / len(train)
        ccfg = CondTrainConfig(
            epochs=ccfg_d["epochs"], lr=ccfg_d["lr"],
            clip_norm=ccfg_d.get("clip_norm"),
            batch_size=ccfg_d.get("batch_size", 32),
            mode=ccfg_d.get("mode", "mix"), p_aug=ccfg_d.get("p_aug", 0.0),
            seed=self.cond_seed,
            max_len=cfg.get("evaluation", {}).get("max_len", 200),
            early_stop=ccfg_d.get("early_stop"),
            resample_factor=ccfg_d.get("resample_factor", 1),
            resample_eps=eps, rare_scope=scope)
        try:
            trace, info = train_conditional(train, augmented, model, ccfg,
                                            log=log)
        except ValueError as exc:
            raise StageError("train-cond", str(exc)) from exc
        _write_json(self._p("cond_train_info.json"), info)
        model.save(self._p("conditional.ckpt"))
        with open(self._p("cond_loss.txt"), "w") as f:
            for i, v in enumerate(trace, 1):
                f.write(f"{i}\t{v:.6f}\n")
        return model

    # -- evaluation ---------------------------------------------------------

    def stage_eval(self, model: Recombiner, tests: dict[str, list[C.Datum]]
                   ) -> dict:
        cfg = self.config
        ecfg = cfg.get("evaluation", {})
        limit = ecfg.get("test_limit")
        max_len = ecfg.get("max_len", 200)
        vocab = model.vocab
        report = {"config_hash": config_hash(self.config), "seed": self.seed,
                  "tests": {}}
        for name, test in sorted(tests.items()):
            data = test
            if limit is not None and len(test) > limit:
                rng = np.random.default_rng(self.eval_seed)
                idx = rng.choice(len(test), size=limit, replace=False)
                data = [test[i] for i in sorted(idx)]
            preds = []
            for start in range(0, len(data), 64):
                chunk = data[start:start + 64]
                xs = [vocab.encode(d.x) for d in chunk]
                preds.extend(predict_batch(model, xs, max_len))
            golds = [vocab.encode(d.y) for d in data]
            records = []
            for d, p, g in zip(data, preds, golds):
                records.append({"x": " ".join(d.x),
                                "gold": " ".join(vocab.decode(g)),
                                "pred": " ".join(vocab.decode(p)),
                                "em": int(p == g)})
            em = exact_match(preds, golds)
            f1 = token_f1(preds, golds)
            report["tests"][name] = {"n": len(data), "exact_match": em,
                                     "token_f1": f1}
            with open(self._p(f"eval_{name}_examples.tsv"), "w",
                      encoding="utf-8") as f:
                f.write("x\tgold\tpred\tem\n")
                for r in records:
                    f.write(f"{r['x']}\t{r['gold']}\t{r['pred']}\t{r['em']}\n")
        with open(self._p("eval_summary.tsv"), "w", encoding="utf-8") as f:
            f.write("test\tn\texact_match\ttoken_f1\n")
            for name, m in sorted(report["tests"].items()):
                f.write(f"{name}\t{m['n']}\t{m['exact_match']:.6f}"
                        f"\t{m['token_f1']:.6f}\n")
        _write_json(self._p("report.json"), report)
        return report

    def stage_analyze(self, augmented: list[C.Datum]) -> dict:
        if self.config["task"] == "morph":
            raise StageError("analyze", "oracle analysis is for command tasks")
        analysis = analyze_samples(augmented)
        _write_json(self._p("analysis.json"), analysis)
        return analysis


def run_experiment(config: dict, out_dir: str, log=None) -> dict:
    """Execute the full pipeline; returns the evaluation report dict."""
    exp = Experiment(config=config, out_dir=out_dir)
    split = exp.stage_split()
    index = exp.stage_neighbors(split.train)
    needs_model = config["sampling"].get("count", 0) > 0
    if needs_model:
        model = exp.stage_train_recomb(split.train, index, log=log)
        augmented = exp.stage_sample(split.train, index, model, log=log)
    else:
        augmented = []
        C.write_lines(exp._p("augmented.txt"), [])
        _write_json(exp._p("generation_report.json"),
                    {"attempted": 0, "accepted": 0})
    cond = exp.stage_train_cond(split.train, augmented, log=log)
    report = exp.stage_eval(cond, split.tests)
    if config["task"] != "morph" and augmented:
        report["sample_analysis"] = exp.stage_analyze(augmented)
        _write_json(exp._p("report.json"), report)
    return report
