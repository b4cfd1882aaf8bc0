"""Recombination network: output distributions, gradients, training, vMF."""

import numpy as np
import pytest
from scipy import special, stats

from seqrecomb import recombiner as R
from seqrecomb import tensor as T
from seqrecomb.corpus import Vocabulary

from fd import check_grads


def tiny_vocab():
    return Vocabulary(list("abcdefg") + ["X", "Y"])


def make_model(variant="scan", n=2, copy="joint", latent=0, seed=0, hidden=6,
               emb=4, att=5, **kw):
    cfg = R.ModelConfig(n_prototypes=n, variant=variant, hidden=hidden,
                        embedding=emb, attention=att, copy=copy, latent=latent,
                        **kw)
    return R.Recombiner(cfg, tiny_vocab(), seed=seed)


def enc_seqs(model, *seqs):
    return [[model.vocab.encode(s)] for s in seqs]


class TestConfig:
    def test_zero_proto_requires_copy_off(self):
        with pytest.raises(ValueError):
            R.ModelConfig(n_prototypes=0, copy="joint")

    def test_roundtrip(self):
        cfg = R.ModelConfig(n_prototypes=1, variant="morph", copy="gated")
        assert R.ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEncodeProtoypes:
    def test_single_token_prototype_single_vector(self):
        m = make_model(n=1)
        (enc,) = m.encode_prototypes(enc_seqs(m, ["a"]))
        assert enc.keys.data.shape[1] == 1
        assert enc.mask.sum() == 1

    def test_output_count_is_total_prototype_length(self):
        m = make_model(n=2)
        encs = m.encode_prototypes(enc_seqs(m, list("abc"), list("de")))
        assert sum(int(e.mask.sum()) for e in encs) == 5

    def test_empty_prototype_rejected(self):
        m = make_model(n=1)
        with pytest.raises(ValueError, match="empty prototype"):
            m.encode_prototypes([[[]]])

    def test_encoder_gradient(self):
        with T.use_dtype(np.float64):
            m = make_model(n=1, hidden=3, emb=2, att=2)
            seqs = enc_seqs(m, list("abc"))

            def loss():
                (enc,) = m.encode_prototypes(seqs)
                return T.add(T.sum_(enc.keys), T.sum_(enc.values))

            check_grads(loss, {k: v for k, v in m.params.items()
                               if k.startswith(("enc0", "att0", "emb"))})


class TestDecodeStepDistribution:
    @pytest.mark.parametrize("variant,copy,n", [
        ("scan", "joint", 2), ("scan", "joint", 1), ("scan", "off", 0),
        ("morph", "gated", 2), ("morph", "gated", 1), ("morph", "off", 0),
        ("scan", "off", 2), ("morph", "off", 1),
    ])
    def test_sums_to_one(self, variant, copy, n):
        m = make_model(variant=variant, n=n, copy=copy, seed=3)
        encs = m.encode_prototypes(enc_seqs(m, list("abc"), list("de"))[:n])
        state = m.init_state(encs, 1)
        prev = m.vocab.bos
        for _ in range(4):
            p, state = m.decode_step(encs, state, prev)
            assert abs(p.sum() - 1.0) < 1e-6
            assert np.all(p >= 0.0)
            prev = int(np.argmax(p))

    def test_zero_proto_is_write_head_only(self):
        m = make_model(n=0, copy="off", seed=1)
        state = m.init_state([], 1)
        p, _ = m.decode_step([], state, m.vocab.bos)
        assert abs(p.sum() - 1.0) < 1e-6

    def test_reserved_tokens_never_generated(self):
        m = make_model(n=2, seed=5)
        encs = m.encode_prototypes(enc_seqs(m, list("abc"), list("de")))
        p, _ = m.decode_step(encs, m.init_state(encs, 1), m.vocab.bos)
        v = m.vocab
        assert p[v.pad] == 0.0 and p[v.bos] == 0.0 and p[v.unk] == 0.0

    def test_gated_single_token_prototype_concentrates(self):
        # attention over a length-1 prototype is a point mass, so the
        # prototype stream puts its whole gate weight on that token
        m = make_model(variant="morph", n=1, copy="gated", seed=2)
        tok = m.vocab.encode(["X"])[0]
        encs = m.encode_prototypes([[[tok]]])
        state = m.init_state(encs, 1)
        p, new_state = m.decode_step(encs, state, m.vocab.bos)
        h = new_state.h.data
        gate_logits = h @ m.params["gate_w"].data + m.params["gate_b"].data
        gate_logits[0, 1] = -np.inf  # no emitted tokens yet
        gate = np.exp(gate_logits - gate_logits.max())
        gate /= gate.sum()
        assert p[tok] >= gate[0, 2] - 1e-6
        assert abs(p.sum() - 1.0) < 1e-6

    def test_gate_forced_one_hot_gives_copy_prob_one(self):
        m = make_model(variant="morph", n=1, copy="gated", seed=2)
        m.params["gate_b"].data = np.array([-1e9, -1e9, 1e9],
                                           dtype=m.params["gate_b"].data.dtype)
        tok = m.vocab.encode(["Y"])[0]
        encs = m.encode_prototypes([[[tok]]])
        p, _ = m.decode_step(encs, m.init_state(encs, 1), m.vocab.bos)
        assert p[tok] == pytest.approx(1.0, abs=1e-6)

    def test_copy_off_ignores_prototype_token_identity(self):
        # two tokens with identical embedding rows: with copy off the output
        # cannot depend on which id sits in the prototype, so no probability
        # mass flows through prototype positions
        m = make_model(n=1, copy="off", seed=4)
        ta, tb = m.vocab.encode(["X", "Y"])
        m.params["emb"].data[tb] = m.params["emb"].data[ta]
        p1, _ = m.decode_step(m.encode_prototypes([[[ta, ta]]]),
                              m.init_state(m.encode_prototypes([[[ta, ta]]]), 1),
                              m.vocab.bos)
        p2, _ = m.decode_step(m.encode_prototypes([[[tb, tb]]]),
                              m.init_state(m.encode_prototypes([[[tb, tb]]]), 1),
                              m.vocab.bos)
        assert np.allclose(p1, p2)

    def test_joint_copy_uses_prototype_token_identity(self):
        m = make_model(n=1, copy="joint", seed=4)
        ta, tb = m.vocab.encode(["X", "Y"])
        m.params["emb"].data[tb] = m.params["emb"].data[ta]
        encs1 = m.encode_prototypes([[[ta, ta]]])
        encs2 = m.encode_prototypes([[[tb, tb]]])
        p1, _ = m.decode_step(encs1, m.init_state(encs1, 1), m.vocab.bos)
        p2, _ = m.decode_step(encs2, m.init_state(encs2, 1), m.vocab.bos)
        assert p1[ta] > p2[ta] and p2[tb] > p1[tb]

    def test_tied_embeddings_alias_not_copy(self):
        m = make_model(variant="scan")
        assert m.output_matrix_is_embedding
        assert "out_w" not in m.params and "dec_emb" not in m.params
        m2 = make_model(variant="morph", copy="gated")
        assert not m2.output_matrix_is_embedding
        assert "out_w" in m2.params and "dec_emb" in m2.params


class TestSequenceNLL:
    def test_loss_additive_over_time(self):
        m = make_model(n=1, seed=6)
        target = m.vocab.encode(list("abXd"))
        proto = m.vocab.encode(list("abd"))
        total = m.sequence_nll(target, [proto])
        # stepwise recomputation via decode_step
        encs = m.encode_prototypes([[proto]])
        state = m.init_state(encs, 1)
        full = target + [m.vocab.eos]
        prev = m.vocab.bos
        acc = 0.0
        for tok in full:
            p, state = m.decode_step(encs, state, prev)
            acc -= np.log(max(p[tok], 1e-12))
            prev = tok
        assert total == pytest.approx(acc, rel=1e-5)

    def test_random_params_loss_near_uniform(self):
        m = make_model(n=1, seed=7)
        target = m.vocab.encode(list("abcdefg"))
        proto = m.vocab.encode(list("abc"))
        loss = m.sequence_nll(target, [proto])
        v_eff = len(m.vocab) - 3  # pad/bos/unk blocked
        expected = (len(target) + 1) * np.log(v_eff)
        assert abs(loss - expected) / expected < 0.2

    def test_token_outside_vocab_rejected(self):
        m = make_model(n=1)
        with pytest.raises(ValueError, match="outside vocabulary"):
            m.sequence_nll([999], [m.vocab.encode(["a"])])

    @pytest.mark.parametrize("variant,copy", [("scan", "joint"), ("morph", "gated")])
    def test_overfits_single_pair(self, variant, copy):
        m = make_model(variant=variant, n=2, copy=copy, seed=8,
                       hidden=24, emb=12, att=12)
        v = m.vocab
        target = v.encode(list("abXde"))
        protos = [v.encode(list("abde")), v.encode(["X"])]
        opt = T.AdamState(m.params, lr=0.01, clip_norm=1.0)
        for _ in range(150):
            opt.zero_grad()
            loss, _ = m.sequence_nll_batch([target], [[protos[0]], [protos[1]]])
            T.backward(loss)
            opt.step()
        assert m.sequence_nll(target, protos) < 0.1


class TestFullGradient:
    @pytest.mark.parametrize("variant,copy,latent", [
        ("scan", "joint", 0),
        ("morph", "gated", 0),
        ("scan", "joint", 2),
    ])
    def test_full_loss_matches_finite_differences(self, variant, copy, latent):
        with T.use_dtype(np.float64):
            m = make_model(variant=variant, n=2, copy=copy, latent=latent,
                           seed=9, hidden=4, emb=3, att=3)
            v = m.vocab
            targets = [v.encode(list("abX")), v.encode(list("de"))]
            protos = [[v.encode(list("ab")), v.encode(list("d"))],
                      [v.encode(["X"]), v.encode(list("de"))]]

            def loss():
                out, _ = m.sequence_nll_batch(targets, protos)
                return out

            check_grads(loss, m.params, tol=1e-4)


class TestVMFPrior:
    def test_norms_within_mu_max(self):
        rng = np.random.default_rng(0)
        z = R.vmf_prior_sample(32, 10.0, rng, batch=500)
        norms = np.linalg.norm(z, axis=1)
        assert np.all(norms <= 10.0) and np.all(norms >= 0.0)

    def test_mean_direction_vanishes(self):
        rng = np.random.default_rng(1)
        z = R.vmf_prior_sample(8, 10.0, rng, batch=20000)
        dirs = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
        assert np.linalg.norm(dirs.mean(axis=0)) < 0.02

    def test_rotation_invariance_chi2(self):
        # concentration zero: any hemisphere split is 50/50
        rng = np.random.default_rng(2)
        z = R.vmf_prior_sample(16, 10.0, rng, batch=4000)
        probes = np.random.default_rng(3).standard_normal((5, 16))
        for probe in probes:
            above = int((z @ probe > 0).sum())
            _, p = stats.chisquare([above, 4000 - above])
            assert p > 1e-3


class TestVMFPosterior:
    def test_degenerate_interval_at_mu_max(self):
        rng = np.random.default_rng(4)
        mu = np.zeros(8)
        mu[0] = 10.0
        z = R.vmf_posterior_numpy(mu, 25.0, 1.0, 10.0, rng)
        assert np.linalg.norm(z) == pytest.approx(10.0, rel=1e-6)

    def test_norm_in_interval(self):
        rng = np.random.default_rng(5)
        mu = rng.standard_normal(8)
        mu *= 3.0 / np.linalg.norm(mu)
        for _ in range(200):
            z = R.vmf_posterior_numpy(mu, 25.0, 1.0, 10.0, rng)
            assert 3.0 - 1e-6 <= np.linalg.norm(z) <= 4.0 + 1e-6

    def test_mean_direction_aligns_with_mu(self):
        rng = np.random.default_rng(6)
        for dim in (8, 32):
            mu = rng.standard_normal(dim)
            mu /= np.linalg.norm(mu)
            draws = np.stack([R.vmf_posterior_numpy(mu, 25.0, 1.0, 10.0, rng)
                              for _ in range(1000)])
            dirs = draws / np.linalg.norm(draws, axis=1, keepdims=True)
            mean_dir = dirs.mean(axis=0)
            cos = mean_dir @ mu / np.linalg.norm(mean_dir)
            assert cos > 0.9

    def test_mean_cosine_matches_bessel_ratio(self):
        # E[cos angle] for the direction is I_{d/2}(k)/I_{d/2-1}(k)
        rng = np.random.default_rng(7)
        dim, kappa = 8, 25.0
        mu = np.zeros(dim)
        mu[0] = 1.0
        ws = [R._vmf_weight(kappa, dim, rng) for _ in range(4000)]
        expected = special.iv(dim / 2, kappa) / special.iv(dim / 2 - 1, kappa)
        assert np.mean(ws) == pytest.approx(expected, abs=0.01)

    def test_zero_mu_uniform_convention(self):
        rng = np.random.default_rng(8)
        z = R.vmf_posterior_numpy(np.zeros(4), 25.0, 1.0, 10.0, rng)
        assert np.linalg.norm(z) <= 1.0 + 1e-6


class TestTraining:
    def _toy_setup(self, n=2, latent=0):
        from seqrecomb import corpus as C
        from seqrecomb import neighborhood as N
        rows = [("walk", "X"), ("run", "Y"), ("walk twice", "X X"),
                ("run twice", "Y Y"), ("walk thrice", "X X X"),
                ("run thrice", "Y Y Y")]
        data = [C.Datum(x=tuple(a.split()), y=tuple(b.split())) for a, b in rows]
        if n == 2:
            index = N.build_longshort_index(data, delta=0.9, cap=4)
        elif n == 0:
            index = N.build_index(data, "none")
        vocab = C.Vocabulary.from_data(data)
        cfg = R.ModelConfig(n_prototypes=n, variant="scan", hidden=16,
                            embedding=8, attention=8,
                            copy="joint" if n else "off", latent=latent)
        return data, index, vocab, cfg

    def test_loss_decreases(self):
        data, index, vocab, cfg = self._toy_setup()
        model = R.Recombiner(cfg, vocab, seed=0)
        trace = R.train_recombiner(data, index, model,
                                   R.TrainConfig(epochs=5, lr=0.01, batch_size=4))
        assert trace[-1] < trace[0]

    def test_zero_prototype_language_model(self):
        data, index, vocab, cfg = self._toy_setup(n=0)
        model = R.Recombiner(cfg, vocab, seed=0)
        trace = R.train_recombiner(data, index, model,
                                   R.TrainConfig(epochs=4, lr=0.01, batch_size=4))
        assert trace[-1] < trace[0]

    def test_deterministic_given_seed(self):
        data, index, vocab, cfg = self._toy_setup()

        def run():
            model = R.Recombiner(cfg, vocab, seed=1)
            trace = R.train_recombiner(data, index, model,
                                       R.TrainConfig(epochs=2, lr=0.01,
                                                     batch_size=4, seed=3))
            return trace, {k: p.data.copy() for k, p in model.params.items()}

        t1, p1 = run()
        t2, p2 = run()
        assert t1 == t2
        assert all(np.array_equal(p1[k], p2[k]) for k in p1)

    def test_empty_index_rejected(self):
        data, index, vocab, cfg = self._toy_setup()
        from seqrecomb.neighborhood import NeighborhoodIndex
        empty = NeighborhoodIndex(tuples=[[] for _ in data], kind="long_short")
        model = R.Recombiner(cfg, vocab, seed=0)
        with pytest.raises(ValueError, match="empty"):
            R.train_recombiner(data, empty, model, R.TrainConfig(epochs=1))


class TestCheckpoint:
    def test_save_load_roundtrip(self, tmp_path):
        m = make_model(n=2, seed=11)
        path = tmp_path / "model.ckpt"
        m.save(path, extra_meta={"note": "test"})
        loaded = R.Recombiner.load(path)
        assert loaded.config == m.config
        assert loaded.vocab.id_to_token == m.vocab.id_to_token
        for k in m.params:
            assert np.allclose(loaded.params[k].data, m.params[k].data)
