"""Desk-scale around-right calibration: recombiner + sampling + analysis."""
import json, time
import numpy as np
from seqrecomb import corpus as C, neighborhood as N, recombiner as R
from seqrecomb import sampler as S, pipeline as P

corpus = C.generate_corpus()
split = C.around_right_split(corpus)
rng = np.random.default_rng(0)
idx = rng.choice(len(split.train), size=6000, replace=False)
train = [split.train[i] for i in sorted(idx)]
print(f"train {len(train)}", flush=True)

t0 = time.time()
index = N.build_longlong_index(train, delta=0.5, cap_first=3, cap_second=1, seed=0)
print(f"index: {index.instance_count()} tuples ({time.time()-t0:.0f}s)", flush=True)

vocab = C.Vocabulary.from_data(train)
cfg = R.ModelConfig(n_prototypes=2, variant="scan", hidden=256, embedding=64,
                    attention=128, copy="joint", dropout_enc_in=0.5,
                    dropout_dec_emb=0.5, dropout_h_out=0.7, dropout_copy_idx=0.5)
model = R.Recombiner(cfg, vocab, seed=0)
t0 = time.time()
trace = R.train_recombiner(train, index, model,
                           R.TrainConfig(epochs=3, lr=0.002, clip_norm=1.0,
                                         batch_size=64, seed=0),
                           log=lambda m: print(f"{m} ({time.time()-t0:.0f}s)", flush=True))
model.save("calib/desk_around_recomb.ckpt")

t0 = time.time()
prior = S.fit_prototype_prior(index, train, strategy="length")
print("slot stats:", prior.slot_stats, "pairs:", 0 if prior.pairs is None else len(prior.pairs), flush=True)
marg = C.token_marginals(train)
max_len = 2 * max(len(d.flat) for d in train) + 5
scfg = S.SamplerConfig(count=400, strategy="temperature", temperature=0.4,
                       epsilon=1.0, max_len=max_len, batch_draws=128,
                       round_budget=20000, seed=0)
try:
    samples, report = S.generate_augmented(model, prior, train, marg, scfg,
                                           log=lambda m: print(m, flush=True))
except S.GenerationError as e:
    print("GENERATION FAILED:", json.dumps(e.report)); raise SystemExit(1)
print(f"sampling: {time.time()-t0:.0f}s", flush=True)
print(json.dumps({k: v for k, v in report.items() if k != "escalations"}, indent=1))
analysis = P.analyze_samples([s.datum for s in samples])
print("ANALYSIS:", json.dumps(analysis, indent=1))
n_ar = sum(1 for s in samples
           if any(s.datum.x[i] == "around" and s.datum.x[i+1] == "right"
                  for i in range(len(s.datum.x) - 1)))
print(f"samples containing the withheld construction: {n_ar}/400")
for s in samples[:8]:
    print("  ", " ".join(s.datum.x), "->", " ".join(s.datum.y))
