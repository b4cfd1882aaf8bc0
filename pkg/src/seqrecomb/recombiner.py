"""Prototype-conditioned generative sequence model and its training loop.

The model reconstructs a target token sequence (x ▷ y flattened) from up to
two prototype sequences. Per-prototype BiLSTM encoders produce contextual
token embeddings; a single-layer LSTM decoder carries a feed vector through
time and attends to the prototypes (and, in the `morph` variant, to its own
previous states). Output probabilities mix a write head with copy streams in
one of two ways:

* ``joint``: raw prototype attention scores are concatenated to the vocab
  scores and normalized in one softmax over vocab + prototype positions;
  per-token probabilities aggregate every position holding that token.
* ``gated``: a softmax gate over (write, self-copy, one per prototype)
  streams mixes independently normalized distributions.

Variant differences follow the two task families. `scan`: tanh key/query/
value transforms with separate attention parameters per prototype, tied
input/output embeddings (output scores are W_e^T @ feed), decoder-state
dropout applied at decode time as well as training. `morph`: bilinear
attention over linearly projected encoder states, separate decoder
embedding, write head over the concatenated context, decoder initialized
from the projected final encoder states, no dropout.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .corpus import RESERVED, Vocabulary
from .neighborhood import NeighborhoodIndex


@dataclass
class ModelConfig:
    n_prototypes: int = 2
    variant: str = "scan"            # "scan" | "morph"
    hidden: int = 512
    embedding: int = 64
    attention: int = 128             # scan attention projection size
    copy: str = "joint"              # "joint" | "gated" | "off"
    dropout_enc_in: float = 0.0
    dropout_dec_emb: float = 0.0
    dropout_h_out: float = 0.0
    dropout_copy_idx: float = 0.0
    latent: int = 0                  # z size; 0 disables the latent variable
    mu_max: float = 10.0
    kappa: float = 25.0
    eps_vmf: float = 1.0

    def __post_init__(self):
        if self.variant not in ("scan", "morph"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.copy not in ("joint", "gated", "off"):
            raise ValueError(f"unknown copy mode {self.copy!r}")
        if self.n_prototypes == 0 and self.copy != "off":
            raise ValueError("copy streams require at least one prototype")

    @property
    def tied(self) -> bool:
        return self.variant == "scan"

    @property
    def feed_size(self) -> int:
        return self.embedding if self.variant == "scan" else self.hidden

    @property
    def dec_input(self) -> int:
        return self.embedding + self.feed_size + self.latent

    @property
    def pre_size(self) -> int:
        if self.variant == "scan":
            return self.hidden + self.n_prototypes * self.attention
        return self.hidden * (2 + self.n_prototypes)  # h_out, self-attn, protos

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class SlotEncoding:
    """Cached encoder outputs for one prototype slot."""

    ids: np.ndarray            # (B, L) token ids
    mask: np.ndarray           # (B, L) True at real tokens
    mask_add: T.Tensor         # (B, L) additive mask, NEG_INF at padding
    keys: T.Tensor             # (B, L, A)
    values: T.Tensor           # (B, L, A)
    final: T.Tensor            # (B, 2H) concatenated direction finals
    h_final_sum: T.Tensor      # (B, H) fwd+bwd final sum, latent proposal input


@dataclass
class DecoderState:
    h: T.Tensor
    c: T.Tensor
    feed: T.Tensor
    history: list = field(default_factory=list)   # previous decoder states
    prefix: list = field(default_factory=list)    # consumed input ids, (B,) each
    z: T.Tensor | None = None


class Recombiner:
    """n-prototype recombination network (n in {0,1,2})."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        self.config = config
        self.vocab = vocab
        self.params: dict[str, T.Tensor] = {}
        self._build(np.random.default_rng(seed))
        blocked = np.zeros(len(vocab), dtype=T.get_default_dtype())
        blocked[[vocab.pad, vocab.bos, vocab.unk]] = T.NEG_INF
        self._vocab_block = blocked  # reserved tokens never generated

    # ------------------------------------------------------------------
    # parameters

    def _p(self, name: str, array) -> T.Tensor:
        t = T.parameter(array, name=name)
        self.params[name] = t
        return t

    def _lstm_weights(self, rng, prefix: str, inp: int, hidden: int):
        self._p(f"{prefix}_w_ih", T.xavier_uniform(rng, inp, 4 * hidden))
        self._p(f"{prefix}_w_hh", T.xavier_uniform(rng, hidden, 4 * hidden))
        self._p(f"{prefix}_b", np.zeros(4 * hidden))

    def _build(self, rng):
        cfg = self.config
        V, E, H, A = len(self.vocab), cfg.embedding, cfg.hidden, cfg.attention
        self._p("emb", T.xavier_uniform(rng, V, E))
        if not cfg.tied:
            self._p("dec_emb", T.xavier_uniform(rng, V, E))
        for k in range(cfg.n_prototypes):
            for d in ("fwd", "bwd"):
                self._lstm_weights(rng, f"enc{k}_{d}", E, H)
            if cfg.variant == "scan":
                self._p(f"att{k}_key_w", T.xavier_uniform(rng, 2 * H, A))
                self._p(f"att{k}_key_b", np.zeros(A))
                self._p(f"att{k}_val_w", T.xavier_uniform(rng, 2 * H, A))
                self._p(f"att{k}_val_b", np.zeros(A))
                self._p(f"att{k}_query_w", T.xavier_uniform(rng, H + cfg.dec_input, A))
                self._p(f"att{k}_query_b", np.zeros(A))
        if cfg.variant == "morph":
            self._p("proj_w", T.xavier_uniform(rng, 2 * H, H))
            self._p("proj_b", np.zeros(H))
            self._p("w_p", T.xavier_uniform(rng, H, H))   # prototype key map
            self._p("w_o", T.xavier_uniform(rng, H, H))   # self-attention key map
        self._lstm_weights(rng, "dec", cfg.dec_input, H)
        self._p("feed_w", T.xavier_uniform(rng, cfg.pre_size, cfg.feed_size))
        self._p("feed_b", np.zeros(cfg.feed_size))
        if not cfg.tied:
            self._p("out_w", T.xavier_uniform(rng, cfg.pre_size, V))
            self._p("out_b", np.zeros(V))
        if cfg.copy == "gated":
            self._p("gate_w", T.xavier_uniform(rng, H, 2 + cfg.n_prototypes))
            self._p("gate_b", np.zeros(2 + cfg.n_prototypes))
        if cfg.latent:
            self._p("z_w", T.xavier_uniform(rng, 2 * H, cfg.latent))

    @property
    def output_matrix_is_embedding(self) -> bool:
        """Tied models project outputs with the embedding matrix itself."""
        return self.config.tied

    # ------------------------------------------------------------------
    # encoding

    @staticmethod
    def pad_batch(seqs: list[list[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
        L = max(len(s) for s in seqs)
        ids = np.full((len(seqs), L), pad, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        return ids, lengths

    def _enc_weights(self, k: int) -> dict:
        return {
            "fwd_w_ih": self.params[f"enc{k}_fwd_w_ih"],
            "fwd_w_hh": self.params[f"enc{k}_fwd_w_hh"],
            "fwd_b": self.params[f"enc{k}_fwd_b"],
            "bwd_w_ih": self.params[f"enc{k}_bwd_w_ih"],
            "bwd_w_hh": self.params[f"enc{k}_bwd_w_hh"],
            "bwd_b": self.params[f"enc{k}_bwd_b"],
        }

    def _transform_tokens(self, x: T.Tensor, w: T.Tensor, b: T.Tensor,
                          nonlinear: bool) -> T.Tensor:
        B, L, D = x.data.shape
        out = T.add(T.matmul(T.reshape(x, (B * L, D)), w), b)
        if nonlinear:
            out = T.tanh(out)
        return T.reshape(out, (B, L, w.data.shape[1]))

    def encode_prototypes(self, proto_seqs: list[list[list[int]]],
                          rng: np.random.Generator | None = None) -> list[SlotEncoding]:
        """Encode a batch of prototype tuples; proto_seqs[k][b] is the id
        sequence in slot k of instance b."""
        cfg = self.config
        encs = []
        for k, seqs in enumerate(proto_seqs):
            if any(len(s) == 0 for s in seqs):
                raise ValueError(f"empty prototype in slot {k}")
            ids, lengths = self.pad_batch(seqs, self.vocab.pad)
            embs = T.embedding(self.params["emb"], ids)
            embs = T.dropout(embs, cfg.dropout_enc_in, rng)
            outs, final = T.bilstm_encode(embs, lengths, self._enc_weights(k))
            mask = np.arange(ids.shape[1])[None, :] < lengths[:, None]
            if cfg.variant == "scan":
                keys = self._transform_tokens(outs, self.params[f"att{k}_key_w"],
                                              self.params[f"att{k}_key_b"], True)
                values = self._transform_tokens(outs, self.params[f"att{k}_val_w"],
                                                self.params[f"att{k}_val_b"], True)
            else:
                h_proto = self._transform_tokens(outs, self.params["proj_w"],
                                                 self.params["proj_b"], False)
                B, L, _ = h_proto.data.shape
                keys = T.reshape(T.matmul(T.reshape(h_proto, (B * L, cfg.hidden)),
                                          self.params["w_p"]), (B, L, cfg.hidden))
                values = h_proto
            H = cfg.hidden
            h_final_sum = T.add(T.narrow(final, 1, 0, H), T.narrow(final, 1, H, H))
            mask_add = T.constant(np.where(mask, 0.0, T.NEG_INF))
            encs.append(SlotEncoding(ids=ids, mask=mask, mask_add=mask_add,
                                     keys=keys, values=values,
                                     final=final, h_final_sum=h_final_sum))
        return encs

    # ------------------------------------------------------------------
    # decoding

    def init_state(self, encs: list[SlotEncoding], batch: int,
                   z: T.Tensor | None = None) -> DecoderState:
        cfg = self.config
        dt = T.get_default_dtype()
        if cfg.variant == "morph" and encs:
            projected = [T.add(T.matmul(e.final, self.params["proj_w"]),
                               self.params["proj_b"]) for e in encs]
            h = projected[0]
            for p in projected[1:]:
                h = T.add(h, p)
            h = T.scale(h, 1.0 / len(projected))
        else:
            h = T.constant(np.zeros((batch, cfg.hidden), dtype=dt))
        c = T.constant(np.zeros((batch, cfg.hidden), dtype=dt))
        feed = T.constant(np.zeros((batch, cfg.feed_size), dtype=dt))
        if cfg.latent and z is None:
            raise ValueError("latent model requires z")
        return DecoderState(h=h, c=c, feed=feed, z=z)

    def step(self, encs: list[SlotEncoding], state: DecoderState,
             prev_ids: np.ndarray, rng: np.random.Generator | None,
             train: bool = False) -> tuple[T.Tensor, DecoderState]:
        """One decode step over a batch; returns the next-token distribution
        (B, V) and the new state. `rng` drives dropout; the decoder-state
        dropout applies whenever an rng is supplied (decode included)."""
        cfg = self.config
        B = prev_ids.shape[0]
        emb_matrix = self.params["emb"] if cfg.tied else self.params["dec_emb"]
        emb = T.embedding(emb_matrix, prev_ids)
        emb = T.dropout(emb, cfg.dropout_dec_emb, rng if train else None)
        parts = [emb, state.feed]
        if cfg.latent:
            parts.append(state.z)
        inp = T.concat(parts, axis=1)
        h, c = T.lstm_step(inp, (state.h, state.c), self.params["dec_w_ih"],
                           self.params["dec_w_hh"], self.params["dec_b"])
        h_att = T.dropout(h, cfg.dropout_h_out, rng)

        ctxs, raw_scores, alphas = [], [], []
        for k, enc in enumerate(encs):
            if cfg.variant == "scan":
                q = T.tanh(T.add(T.matmul(T.concat([h_att, inp], axis=1),
                                          self.params[f"att{k}_query_w"]),
                                 self.params[f"att{k}_query_b"]))
            else:
                q = h_att
            scores = T.add(T.att_scores(q, enc.keys), enc.mask_add)
            alpha = T.softmax(scores)
            ctxs.append(T.att_combine(alpha, enc.values))
            raw_scores.append(scores)
            alphas.append(alpha)

        self_ctx = self_alpha = None
        if cfg.variant == "morph":
            if state.history:
                hist = T.stack(state.history, axis=1)          # (B, t, H)
                Bh, th, Hh = hist.data.shape
                hist_keys = T.reshape(T.matmul(T.reshape(hist, (Bh * th, Hh)),
                                               self.params["w_o"]), (Bh, th, Hh))
                self_alpha = T.softmax(T.att_scores(h_att, hist_keys))
                self_ctx = T.att_combine(self_alpha, hist)
            else:
                self_ctx = T.constant(np.zeros((B, cfg.hidden),
                                               dtype=T.get_default_dtype()))

        pre_parts = [h_att]
        if cfg.variant == "morph":
            pre_parts.append(self_ctx)
        pre_parts.extend(ctxs)
        h_pre = T.concat(pre_parts, axis=1)
        feed = T.add(T.matmul(h_pre, self.params["feed_w"]), self.params["feed_b"])

        if cfg.tied:
            logits = T.matmul_t(feed, self.params["emb"])
        else:
            logits = T.add(T.matmul(h_pre, self.params["out_w"]), self.params["out_b"])
        logits = T.add(logits, T.constant(self._vocab_block[None, :]))

        p_vocab = self._combine(logits, encs, raw_scores, alphas, self_alpha,
                                state, h_att, prev_ids, B, rng, train)
        new_state = DecoderState(h=h, c=c, feed=feed,
                                 history=state.history + [h],
                                 prefix=state.prefix + [prev_ids],
                                 z=state.z)
        return p_vocab, new_state

    def _combine(self, logits, encs, raw_scores, alphas, self_alpha, state,
                 h_att, prev_ids, B, rng, train) -> T.Tensor:
        cfg = self.config
        V = len(self.vocab)
        if cfg.copy == "off" or not encs:
            return T.softmax(logits)

        if cfg.copy == "joint":
            if train and cfg.dropout_copy_idx > 0.0 and rng is not None:
                drop = rng.random((B, V)) < cfg.dropout_copy_idx
                logits = T.add(logits, T.constant(np.where(drop, T.NEG_INF, 0.0)))
            joint = T.softmax(T.concat([logits] + raw_scores, axis=1))
            p = T.narrow(joint, 1, 0, V)
            offset = V
            for enc in encs:
                L = enc.ids.shape[1]
                p = T.add(p, T.scatter_vocab(T.narrow(joint, 1, offset, L),
                                             enc.ids, V))
                offset += L
            return p

        # gated mixture over (write, self-copy, prototypes); streams without
        # support (no emitted tokens yet) are masked out of the gate softmax
        gate_logits = T.add(T.matmul(h_att, self.params["gate_w"]),
                            self.params["gate_b"])
        mask = np.zeros((1, 2 + cfg.n_prototypes), dtype=T.get_default_dtype())
        emitted = state.prefix[1:] + [prev_ids] if state.prefix else []
        if not emitted:
            mask[0, 1] = T.NEG_INF
        gate = T.softmax(T.add(gate_logits, T.constant(mask)))
        p = T.mul(T.narrow(gate, 1, 0, 1), T.softmax(logits))
        if emitted and self_alpha is not None:
            # history position s emitted the token consumed at step s+1
            p_self = T.scatter_vocab(self_alpha, np.stack(emitted, axis=1), V)
            p = T.add(p, T.mul(T.narrow(gate, 1, 1, 1), p_self))
        for k, enc in enumerate(encs):
            p = T.add(p, T.mul(T.narrow(gate, 1, 2 + k, 1),
                               T.scatter_vocab(alphas[k], enc.ids, V)))
        return p

    def decode_step(self, encs: list[SlotEncoding], state: DecoderState,
                    prev_token: int, rng: np.random.Generator | None = None
                    ) -> tuple[np.ndarray, DecoderState]:
        """Single-instance step: next-token probabilities and the new state."""
        p, new_state = self.step(encs, state, np.array([prev_token]), rng)
        return p.data[0], new_state

    # ------------------------------------------------------------------
    # likelihood

    def sequence_nll_batch(self, targets: list[list[int]],
                           proto_seqs: list[list[list[int]]],
                           rng: np.random.Generator | None = None,
                           train: bool = False,
                           z: T.Tensor | None = None
                           ) -> tuple[T.Tensor, np.ndarray]:
        """Teacher-forced batch loss: mean over instances of
        -sum_t log p(token_t), with the end token appended to each target.
        Returns (mean loss node, per-instance total NLL array)."""
        cfg = self.config
        B = len(targets)
        eos, bos, pad = self.vocab.eos, self.vocab.bos, self.vocab.pad
        full = [t + [eos] for t in targets]
        Tmax = max(len(t) for t in full)
        tgt = np.full((B, Tmax), pad, dtype=np.int64)
        for i, t in enumerate(full):
            tgt[i, :len(t)] = t
        valid = tgt != pad
        inputs = np.concatenate([np.full((B, 1), bos, dtype=np.int64),
                                 tgt[:, :-1]], axis=1)
        encs = self.encode_prototypes(proto_seqs, rng if train else None)
        if cfg.latent and z is None:
            z = self.posterior_z(targets, encs, rng or np.random.default_rng(0))
        state = self.init_state(encs, B, z=z)
        step_rng = rng if train else None
        total = None
        for t in range(Tmax):
            p, state = self.step(encs, state, inputs[:, t], step_rng, train=train)
            picked = T.take_per_row(p, tgt[:, t])
            nll_t = T.scale(T.log(T.clamp_min(picked, 1e-12)), -1.0)
            nll_t = T.mul(nll_t, T.constant(valid[:, t].astype(p.data.dtype)))
            total = nll_t if total is None else T.add(total, nll_t)
        return T.mean_(total), total.data.copy()

    def sequence_nll(self, target: list[int], protos: list[list[int]],
                     z: T.Tensor | None = None) -> float:
        """-log p(target | prototypes) for a single instance, no dropout."""
        for tok in target:
            if not 0 <= tok < len(self.vocab):
                raise ValueError(f"token id {tok} outside vocabulary")
        loss, _ = self.sequence_nll_batch([target], [[p] for p in protos], z=z)
        return float(loss.data)

    # ------------------------------------------------------------------
    # latent variable

    def posterior_z(self, targets: list[list[int]], encs: list[SlotEncoding],
                    rng: np.random.Generator) -> T.Tensor:
        """Sample z from the proposal: vMF direction around mu, norm uniform
        on [|mu|, min(|mu|+eps, mu_max)]. The sampled weights are constants;
        gradients flow into mu's parameters."""
        cfg = self.config
        ids, lengths = self.pad_batch(targets, self.vocab.pad)
        embs = T.embedding(self.params["emb"], ids)
        _, final = T.bilstm_encode(embs, lengths, self._enc_weights(0))
        H = cfg.hidden
        h_d = T.add(T.narrow(final, 1, 0, H), T.narrow(final, 1, H, H))
        h_q = encs[0].h_final_sum
        for e in encs[1:]:
            h_q = T.add(h_q, e.h_final_sum)
        mu = T.tanh(T.matmul(T.concat([h_d, h_q], axis=1), self.params["z_w"]))
        B, zdim = mu.data.shape
        munorm = T.sqrt(T.clamp_min(T.sum_(T.mul(mu, mu), axis=1, keepdims=True),
                                    1e-12))
        mu_hat = T.mul(mu, T.reciprocal(munorm))
        # w (cosine to the mean) and the gaussian draw do not depend on the
        # parameters; the orthogonal projection does, so it stays on the graph
        w = np.array([_vmf_weight(cfg.kappa, zdim, rng) for _ in range(B)],
                     dtype=T.get_default_dtype())
        eps = T.constant(rng.standard_normal((B, zdim)))
        dot = T.sum_(T.mul(eps, mu_hat), axis=1, keepdims=True)
        v_raw = T.sub(eps, T.mul(dot, mu_hat))
        v_norm = T.sqrt(T.clamp_min(T.sum_(T.mul(v_raw, v_raw), axis=1,
                                           keepdims=True), 1e-12))
        v_hat = T.mul(v_raw, T.reciprocal(v_norm))
        tangent = T.mul(v_hat, T.constant(
            np.sqrt(np.maximum(1.0 - w * w, 0.0))[:, None]))
        direction = T.add(tangent, T.mul(mu_hat, T.constant(w[:, None])))
        cap = _clamp_max(_shift(munorm, cfg.eps_vmf), cfg.mu_max)
        u = T.constant(rng.random((B, 1)).astype(T.get_default_dtype()))
        norm = T.add(munorm, T.mul(u, T.sub(cap, munorm)))
        return T.mul(direction, norm)

    # ------------------------------------------------------------------
    # persistence

    def save(self, path, extra_meta: dict | None = None):
        meta = {"config": self.config.to_dict(), "vocab": self.vocab.id_to_token}
        if extra_meta:
            meta.update(extra_meta)
        T.save_checkpoint(path, {k: p.data for k, p in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "Recombiner":
        tensors, meta = T.load_checkpoint(path)
        vocab = Vocabulary(meta["vocab"][len(RESERVED):])
        model = cls(ModelConfig.from_dict(meta["config"]), vocab)
        for k, arr in tensors.items():
            model.params[k].data = arr.astype(T.get_default_dtype())
        return model


def _shift(t: T.Tensor, c: float) -> T.Tensor:
    return T.add(t, T.constant(np.full_like(t.data, c)))


def _clamp_max(t: T.Tensor, ceiling: float) -> T.Tensor:
    return T.scale(T.clamp_min(T.scale(t, -1.0), -ceiling), -1.0)


# ---------------------------------------------------------------------------
# von Mises-Fisher sampling


def _vmf_weight(kappa: float, dim: int, rng: np.random.Generator) -> float:
    """Wood's rejection sampler for the cosine of the angle to the mean
    direction on the (dim-1)-sphere."""
    if kappa <= 0.0:
        raise ValueError("kappa must be positive for the proposal")
    d = dim - 1
    if d == 0:  # circle degenerates to +-1
        p = 1.0 / (1.0 + np.exp(-2.0 * kappa))
        return 1.0 if rng.random() < p else -1.0
    b = d / (np.sqrt(4.0 * kappa ** 2 + d ** 2) + 2.0 * kappa)
    x = (1.0 - b) / (1.0 + b)
    c = kappa * x + d * np.log(1.0 - x ** 2)
    while True:
        z = rng.beta(d / 2.0, d / 2.0)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        if kappa * w + d * np.log(1.0 - x * w) - c >= np.log(rng.random()):
            return float(w)


def _orthonormal_to(mu_hat: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors orthogonal to each row of mu_hat (B, D)."""
    v = rng.standard_normal(mu_hat.shape)
    v -= (v * mu_hat).sum(axis=1, keepdims=True) * mu_hat
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return (v / np.where(n < 1e-12, 1.0, n)).astype(T.get_default_dtype())


def vmf_prior_sample(latent: int, mu_max: float, rng: np.random.Generator,
                     batch: int = 1) -> np.ndarray:
    """Prior z: uniform direction (concentration zero) scaled by a norm
    drawn uniformly from [0, mu_max]."""
    d = rng.standard_normal((batch, latent))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    norms = rng.uniform(0.0, mu_max, size=(batch, 1))
    return (d * norms).astype(T.get_default_dtype())


def vmf_posterior_numpy(mu: np.ndarray, kappa: float, eps: float, mu_max: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Plain-array posterior sample (no gradient path)."""
    munorm = float(np.linalg.norm(mu))
    dim = mu.shape[0]
    if munorm < 1e-10:
        z = rng.standard_normal(dim)
        z /= max(np.linalg.norm(z), 1e-12)
        return (z * rng.uniform(0.0, min(eps, mu_max))).astype(T.get_default_dtype())
    w = _vmf_weight(kappa, dim, rng)
    v = _orthonormal_to((mu / munorm)[None, :], rng)[0]
    direction = v * np.sqrt(max(1.0 - w * w, 0.0)) + (mu / munorm) * w
    norm = rng.uniform(munorm, min(munorm + eps, mu_max))
    return (direction * norm).astype(T.get_default_dtype())


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 8
    lr: float = 0.002
    clip_norm: float | None = 1.0
    batch_size: int = 32
    seed: int = 0


def _length_bucketed_batches(order: np.ndarray, sizes: np.ndarray,
                             batch_size: int, rng: np.random.Generator):
    """Group similarly sized instances to limit padding waste; batch order is
    shuffled so buckets do not impose a curriculum."""
    by_size = order[np.argsort(sizes[order], kind="stable")]
    batches = [by_size[i:i + batch_size] for i in range(0, len(by_size), batch_size)]
    rng.shuffle(batches)
    return batches


def train_recombiner(data, index: NeighborhoodIndex, model: Recombiner,
                     tcfg: TrainConfig, log=None) -> list[float]:
    """Optimize the recombiner over every (target, prototype tuple) instance;
    one epoch covers the entire flattened index. Returns the per-epoch
    mean-NLL trace."""
    vocab = model.vocab
    instances = [(tid, tup) for tid, row in enumerate(index.tuples) for tup in row]
    if not instances:
        raise ValueError("empty neighborhood index")
    encoded = [vocab.encode(d.flat) for d in data]
    sizes = np.array([len(encoded[tid]) + sum(len(encoded[p]) for p in tup)
                      for tid, tup in instances], dtype=np.int64)
    opt = T.AdamState(model.params, lr=tcfg.lr, clip_norm=tcfg.clip_norm)
    master = np.random.SeedSequence(tcfg.seed)
    shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in master.spawn(2))
    trace = []
    n_proto = model.config.n_prototypes
    for epoch in range(tcfg.epochs):
        order = np.arange(len(instances))
        shuffle_rng.shuffle(order)
        total_nll = 0.0
        for batch_idx in _length_bucketed_batches(order, sizes, tcfg.batch_size,
                                                  shuffle_rng):
            batch = [instances[i] for i in batch_idx]
            targets = [encoded[tid] for tid, _ in batch]
            protos = [[encoded[tup[k]] for _, tup in batch] for k in range(n_proto)]
            opt.zero_grad()
            loss, per_nll = model.sequence_nll_batch(targets, protos,
                                                     rng=dropout_rng, train=True)
            T.backward(loss)
            opt.step()
            total_nll += float(per_nll.sum())
        trace.append(total_nll / len(instances))
        if log:
            log(f"epoch {epoch + 1}/{tcfg.epochs}: mean nll {trace[-1]:.4f}")
    return trace
