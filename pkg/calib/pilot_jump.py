"""Pilot: reduced-scale jump pipeline through sampling + oracle analysis."""
import json, time
import numpy as np
from seqrecomb import corpus as C, neighborhood as N, recombiner as R
from seqrecomb import sampler as S, pipeline as P

t0 = time.time()
corpus = C.generate_corpus()
split = C.jump_split(corpus)
rng = np.random.default_rng(0)
keep = [d for d in split.train if d.x == ("jump",)]
rest = [d for d in split.train if d.x != ("jump",)]
idx = rng.choice(len(rest), size=3000, replace=False)
train = keep + [rest[i] for i in sorted(idx)]
print(f"train {len(train)}  ({time.time()-t0:.0f}s)")

t0 = time.time()
index = N.build_longshort_index(train, delta=0.5, cap=2, seed=0)
print(f"index: {index.instance_count()} tuples  ({time.time()-t0:.0f}s)")

vocab = C.Vocabulary.from_data(train)
cfg = R.ModelConfig(n_prototypes=2, variant="scan", hidden=128, embedding=64,
                    attention=128, copy="joint", dropout_enc_in=0.5,
                    dropout_dec_emb=0.5, dropout_h_out=0.7, dropout_copy_idx=0.5)
model = R.Recombiner(cfg, vocab, seed=0)
t0 = time.time()
trace = R.train_recombiner(train, index, model,
                           R.TrainConfig(epochs=4, lr=0.002, clip_norm=1.0,
                                         batch_size=64, seed=0),
                           log=lambda m: print(m, flush=True))
print(f"recomb train done ({time.time()-t0:.0f}s)")

t0 = time.time()
prior = S.fit_prototype_prior(index, train, strategy="length")
print("slot stats:", prior.slot_stats, "pool sizes:", [len(p) for p in prior.pools])
marg = C.token_marginals(train)
eps = 1.5 / len(train)
max_len = 2 * max(len(d.flat) for d in train) + 5
scfg = S.SamplerConfig(count=100, strategy="beam", beam_width=4, epsilon=eps,
                       max_len=max_len, batch_draws=64, round_budget=4000,
                       seed=0)
try:
    samples, report = S.generate_augmented(model, prior, train, marg, scfg,
                                           log=lambda m: print(m, flush=True))
except S.GenerationError as e:
    print("GENERATION FAILED:", e.report)
    raise SystemExit(1)
print(f"sampling done ({time.time()-t0:.0f}s)")
print(json.dumps({k: v for k, v in report.items() if k != "escalations"}, indent=1))
analysis = P.analyze_samples([s.datum for s in samples])
print("ANALYSIS:", json.dumps(analysis, indent=1))
for s in samples[:12]:
    print("  ", " ".join(s.datum.x), "->", C.display_actions(s.datum.y))
