"""Sequence feature networks, amortized fitness representation, outcome and propensity heads.

Conv stages operate directly on token matrices: a row of the dense encoding is
``embed[token]`` plus position features, so the convolution reduces to table lookups.
``dense_conv_features`` is the plain dense reference used in tests.
"""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import ndiff
from .ndiff import ParamStore, Prior, selu, selu_grad
from .seqcore import EMBEDDINGS, N_FEATURES, N_TOKENS, dense_encode, position_features, tokenize

VARIANTS = ("CAIRE", "NoPropensityCAIRE", "Uncorrected", "AttentionCAIRE", "DeepRCStar", "NonNeuralCAIRE")
VARIANT_ALIASES = {v.lower(): v for v in VARIANTS} | {
    "caire": "CAIRE",
    "nopropensity": "NoPropensityCAIRE",
    "no_propensity": "NoPropensityCAIRE",
    "attention": "AttentionCAIRE",
    "deeprc": "DeepRCStar",
    "deeprcstar": "DeepRCStar",
    "deeprc*": "DeepRCStar",
    "nonneural": "NonNeuralCAIRE",
    "non_neural": "NonNeuralCAIRE",
}

GAMMA_PRIOR = Prior("normal", 0.0, 100.0)
RHO_PRIOR = Prior("normal", 0.0, 1.0)
BETA_PRIOR = Prior("normal", 0.0, 10.0)
PROP_PRIOR = Prior("normal", 0.0, 10.0)
TAU_PRIOR = Prior("lognormal", -1.0, 2.0)

FIT_PREFIXES = ("enc0", "enc1", "enc2", "hr0", "hr1", "hr2", "hr3")
PROPENSITY_PARAMS = ("W", "B", "log_tau_e")
CHUNK = 8192


def canonical_variant(name: str) -> str:
    key = name.strip()
    if key in VARIANTS:
        return key
    try:
        return VARIANT_ALIASES[key.lower()]
    except KeyError:
        raise ValueError(f"unknown model variant {name!r}; expected one of {VARIANTS}") from None


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "CAIRE"
    d_a: int = 8
    d_r: int = 4
    kernel: int = 5
    l_max: int = 19
    encoding: str = "onehot"
    conv_channels: int = 8
    hr_hidden: int = 16
    hr_layers: int = 3
    enc_hidden: int = 8
    attn_hidden: int = 32

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.encoding not in EMBEDDINGS:
            raise ValueError(f"unknown encoding {self.encoding!r}")
        if self.kernel > self.l_max:
            raise ValueError("kernel larger than L_max")
        if self.variant == "NonNeuralCAIRE":
            # fixed low-dimensional linear architecture
            for name, value in (("encoding", "blosum"), ("d_a", 4), ("d_r", 4), ("kernel", 3)):
                object.__setattr__(self, name, value)

    @property
    def has_fitness(self) -> bool:
        return self.variant in ("CAIRE", "NoPropensityCAIRE", "AttentionCAIRE", "NonNeuralCAIRE")

    @property
    def has_propensity(self) -> bool:
        return self.variant in ("CAIRE", "AttentionCAIRE", "NonNeuralCAIRE")

    @property
    def attention(self) -> bool:
        return self.variant in ("AttentionCAIRE", "DeepRCStar")

    @property
    def linear_features(self) -> bool:
        return self.variant == "NonNeuralCAIRE"

    @property
    def fit_channels(self) -> int:
        return self.d_a if self.linear_features else self.conv_channels

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TokenBatch:
    tokens: np.ndarray  # (N, L_max) int8
    lengths: np.ndarray  # (N,) residue counts

    def __len__(self) -> int:
        return len(self.lengths)

    @classmethod
    def from_sequences(cls, seqs: Sequence[str], l_max: int) -> "TokenBatch":
        tokens, lengths = tokenize(seqs, l_max)
        return cls(tokens, lengths)

    def take(self, idx) -> "TokenBatch":
        return TokenBatch(self.tokens[idx], self.lengths[idx])

    def __getitem__(self, sl: slice) -> "TokenBatch":
        return TokenBatch(self.tokens[sl], self.lengths[sl])

    @staticmethod
    def concat(batches: Sequence["TokenBatch"]) -> "TokenBatch":
        return TokenBatch(
            np.concatenate([b.tokens for b in batches]), np.concatenate([b.lengths for b in batches])
        )

    def dense(self, mode: str = "onehot") -> np.ndarray:
        return dense_encode(self.tokens, self.lengths, mode)


@dataclass
class FitnessRepresentation:
    rho: np.ndarray
    beta: float


# ---------------------------------------------------------------------------
# Conv feature stage


@functools.lru_cache(maxsize=8)
def _position_table(l_max: int) -> np.ndarray:
    """(l_max + 1, l_max, 3) position features indexed by occupied row count."""
    table = np.zeros((l_max + 1, l_max, 3))
    for occ in range(1, l_max + 1):
        table[occ, :occ] = position_features(occ)
    return table


def valid_positions(lengths: np.ndarray, l_max: int, kernel: int) -> np.ndarray:
    """Conv output positions whose window lies inside the occupied rows (end token included).

    A sequence shorter than the kernel keeps position 0 only.
    """
    occ = lengths.astype(np.intp) + 1
    last = np.maximum(occ - kernel, 0)
    return np.arange(l_max - kernel + 1)[None, :] <= last[:, None]


def conv_preactivation(W, b, batch: TokenBatch, embed: np.ndarray, dtype=np.float64) -> np.ndarray:
    """(N, L_out, C) convolution outputs of the encoded batch, accumulated in ``dtype``."""
    K = W.shape[0]
    n, L = batch.tokens.shape
    L_out = L - K + 1
    tok = batch.tokens.astype(np.intp)
    table = np.einsum("te,kec->ktc", embed, W[:, :21]).astype(dtype, copy=False)
    pre = np.take(table[0], tok[:, :L_out], axis=0)
    for k in range(1, K):
        pre += np.take(table[k], tok[:, k : k + L_out], axis=0)
    pos = ndiff.conv1d(_position_table(L), W[:, 21:], b).astype(dtype, copy=False)  # (L+1, L_out, C)
    pre += pos[batch.lengths.astype(np.intp) + 1]
    return pre


def conv_features_forward(W, b, batch: TokenBatch, embed: np.ndarray, pooling: str = "max", dtype=np.float64):
    """Conv stage: max(SELU(conv)) over valid positions, or a plain sum for ``pooling='sum'``.

    ``dtype`` sets the precision of the max-pooled convolution; outputs are float64.
    """
    K = W.shape[0]
    valid = valid_positions(batch.lengths, batch.tokens.shape[1], K)
    if pooling == "max":
        pre = conv_preactivation(W, b, batch, embed, dtype)
        m, idx = _masked_running_max(pre, valid)
        m = m.astype(np.float64)
        return selu(m), (m, idx)
    pre = conv_preactivation(W, b, batch, embed)
    out = np.einsum("npc,np->nc", pre, valid.astype(np.float64))
    return out, (valid,)


def _masked_running_max(pre: np.ndarray, valid: np.ndarray):
    """Max over positions (axis 1) restricted to valid ones; lowest index wins ties.

    Same result as ndiff.maxpool_positions, but a loop over the short position axis
    avoids a strided argmax over the whole (N, L_out, C) block.
    """
    m = pre[:, 0].copy()  # position 0 is always valid
    idx = np.zeros(m.shape, dtype=np.intp)
    for p in range(1, pre.shape[1]):
        better = (pre[:, p] > m) & valid[:, p, None]
        np.copyto(m, pre[:, p], where=better)
        idx[better] = p
    return m, idx


def conv_features_backward(W, batch: TokenBatch, embed: np.ndarray, cache, dout, pooling: str = "max"):
    """Returns (dW, db) for the conv stage given d(out)."""
    K, _, C = W.shape
    n, L = batch.tokens.shape
    tok = batch.tokens.astype(np.intp)
    occ = batch.lengths.astype(np.intp) + 1
    ptab = _position_table(L)
    dW = np.zeros_like(W)
    if pooling == "max":
        m, idx = cache
        dm = dout * selu_grad(m)
        chan = np.broadcast_to(np.arange(C), (n, C))
        for k in range(K):
            rows = idx + k
            tk = np.take_along_axis(tok, rows, axis=1)
            dT = np.bincount((tk * C + chan).ravel(), weights=dm.ravel(), minlength=N_TOKENS * C)
            dW[k, :21] = embed.T @ dT.reshape(N_TOKENS, C)
            pf = ptab[occ[:, None], rows]  # (N, C, 3)
            dW[k, 21:] = np.einsum("ncf,nc->fc", pf, dm)
        return dW, dm.sum(axis=0)
    (valid,) = cache
    vf = valid.astype(np.float64)
    L_out = valid.shape[1]
    for k in range(K):
        counts = np.zeros((n, N_TOKENS))
        np.add.at(counts, (np.repeat(np.arange(n), L_out), tok[:, k : k + L_out].ravel()), vf.ravel())
        dW[k, :21] = embed.T @ (counts.T @ dout)
        pf = np.einsum("np,npf->nf", vf, ptab[occ][:, k : k + L_out])
        dW[k, 21:] = pf.T @ dout
    return dW, vf.sum(axis=1) @ dout


def dense_conv_features(W, b, x_dense: np.ndarray, lengths: np.ndarray, pooling: str = "max") -> np.ndarray:
    """Reference path on dense (N, L_max, 24) encodings."""
    pre = ndiff.conv1d(x_dense, W, b)
    valid = valid_positions(lengths, x_dense.shape[1], W.shape[0])
    if pooling == "max":
        m, _ = ndiff.maxpool_positions(pre, valid)
        return selu(m)
    return np.einsum("npc,np->nc", pre, valid.astype(np.float64))


# ---------------------------------------------------------------------------
# Feedforward helper


def mlp_forward(params: ParamStore, prefixes: Sequence[str], x: np.ndarray, final_activation: bool = False):
    cache = []
    h = x
    for i, pre in enumerate(prefixes):
        z = h @ params[f"{pre}.W"] + params[f"{pre}.b"]
        cache.append((h, z))
        last = i == len(prefixes) - 1
        h = selu(z) if (not last or final_activation) else z
    return h, cache


def mlp_backward(params: ParamStore, prefixes, cache, dout, grads, final_activation: bool = False):
    d = dout
    for i in reversed(range(len(prefixes))):
        pre = prefixes[i]
        h, z = cache[i]
        last = i == len(prefixes) - 1
        if not last or final_activation:
            d = d * selu_grad(z)
        dx, dW, db = ndiff.linear_backward(h, params[f"{pre}.W"], d)
        _acc(grads, f"{pre}.W", dW)
        _acc(grads, f"{pre}.b", db)
        d = dx
    return d


def _acc(grads: dict, name: str, g) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = np.array(g, dtype=np.float64)


def _segment_sum(x: np.ndarray, seg: np.ndarray, n_seg: int) -> np.ndarray:
    out = np.zeros((n_seg,) + x.shape[1:])
    np.add.at(out, seg, x)
    return out


# ---------------------------------------------------------------------------
# Model


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class CaireModel:
    """Parameters plus forward/backward passes for one model variant."""

    def __init__(self, config: ModelConfig, params: ParamStore, compute_dtype=np.float64):
        self.config = config
        self.params = params
        self.compute_dtype = np.dtype(compute_dtype)
        self.embed = EMBEDDINGS[config.encoding]
        self._attach_priors()

    # -- construction ---------------------------------------------------
    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator, compute_dtype=np.float64) -> "CaireModel":
        c = config
        p = ParamStore()
        K = c.kernel

        def conv(prefix, channels):
            p[f"{prefix}.W"] = _uniform(rng, (K, N_FEATURES, channels), K * N_FEATURES)
            p[f"{prefix}.b"] = _uniform(rng, (channels,), K * N_FEATURES)

        def lin(prefix, d_in, d_out):
            p[f"{prefix}.W"] = _uniform(rng, (d_in, d_out), d_in)
            p[f"{prefix}.b"] = _uniform(rng, (d_out,), d_in)

        conv("ha", c.d_a)
        if c.attention:
            lin("attn1", c.d_a, c.attn_hidden)
            lin("attn2", c.attn_hidden, c.attn_hidden)
            p["attn.q"] = _uniform(rng, (c.attn_hidden,), c.attn_hidden)
        if c.has_fitness:
            fc = c.fit_channels
            conv("enc0", fc)
            lin("enc1", fc, c.enc_hidden)
            lin("enc2", c.enc_hidden, c.d_r + 1)
            conv("hr0", fc)
            if c.linear_features:
                lin("hr1", fc, c.d_r)
            else:
                dims = [fc] + [c.hr_hidden] * (c.hr_layers - 1) + [c.d_r]
                for i in range(c.hr_layers):
                    lin(f"hr{i + 1}", dims[i], dims[i + 1])
        p["gamma_a"] = np.zeros(c.d_a)
        if c.has_fitness:
            p["gamma_r"] = np.zeros(c.d_r)
        p["gamma_y"] = np.zeros(())
        p["log_tau_y"] = np.full((), TAU_PRIOR.loc)  # prior median
        if c.has_propensity:
            p["W"] = np.zeros((c.d_a, c.d_r))
            p["B"] = np.zeros(c.d_a)
            p["log_tau_e"] = np.full((), TAU_PRIOR.loc)
        return cls(config, p, compute_dtype)

    def _attach_priors(self):
        pri = self.params.priors
        for name in ("gamma_a", "gamma_r", "gamma_y"):
            if name in self.params:
                pri[name] = GAMMA_PRIOR
        for name in ("W", "B"):
            if name in self.params:
                pri[name] = PROP_PRIOR
        for name in ("log_tau_y", "log_tau_e"):
            if name in self.params:
                pri[name] = TAU_PRIOR

    @property
    def hr_prefixes(self) -> list[str]:
        if self.config.linear_features:
            return ["hr1"]
        return [f"hr{i + 1}" for i in range(self.config.hr_layers)]

    @property
    def pooling(self) -> str:
        return "sum" if self.config.linear_features else "max"

    def main_param_names(self) -> list[str]:
        return [n for n in self.params.names() if n not in PROPENSITY_PARAMS]

    def copy(self) -> "CaireModel":
        return CaireModel(self.config, self.params.copy(), self.compute_dtype)

    # -- feature networks -------------------------------------------------
    def features_fwd(self, prefix: str, batch: TokenBatch):
        return conv_features_forward(
            self.params[f"{prefix}.W"], self.params[f"{prefix}.b"], batch, self.embed, self.pooling, self.compute_dtype
        )

    def features_bwd(self, prefix: str, batch: TokenBatch, cache, dout, grads):
        dW, db = conv_features_backward(self.params[f"{prefix}.W"], batch, self.embed, cache, dout, self.pooling)
        _acc(grads, f"{prefix}.W", dW)
        _acc(grads, f"{prefix}.b", db)

    def _chunked(self, fn, batch: TokenBatch) -> np.ndarray:
        if len(batch) <= CHUNK:
            return fn(batch)
        return np.concatenate([fn(batch[i : i + CHUNK]) for i in range(0, len(batch), CHUNK)])

    def h_a(self, batch: TokenBatch) -> np.ndarray:
        return self._chunked(lambda b: self.features_fwd("ha", b)[0], batch)

    def h_r(self, batch: TokenBatch) -> np.ndarray:
        def fn(b):
            f, _ = self.features_fwd("hr0", b)
            return mlp_forward(self.params, self.hr_prefixes, f)[0]

        return self._chunked(fn, batch)

    def h_enc(self, batch: TokenBatch) -> np.ndarray:
        return self._chunked(lambda b: self.features_fwd("enc0", b)[0], batch)

    def attention_scores(self, h: np.ndarray):
        """log g = q . htilde(h) / sqrt(d); returns scores and the MLP cache."""
        ht, cache = mlp_forward(self.params, ("attn1", "attn2"), h, final_activation=True)
        return ht @ self.params["attn.q"] / math.sqrt(self.config.attn_hidden), (ht, cache)

    def attention_scores_bwd(self, cache, dscore, grads):
        ht, mcache = cache
        scale = 1.0 / math.sqrt(self.config.attn_hidden)
        _acc(grads, "attn.q", scale * ht.T @ dscore)
        dht = scale * np.outer(dscore, self.params["attn.q"])
        return mlp_backward(self.params, ("attn1", "attn2"), mcache, dht, grads, final_activation=True)

    # -- per-patient quantities ----------------------------------------
    def encoder_head(self, diff: np.ndarray):
        """(rho, beta) from the mature-minus-preselection embedding difference."""
        out, cache = mlp_forward(self.params, ("enc1", "enc2"), diff)
        return out[..., :-1], out[..., -1], cache

    def encode_patient(self, mature: TokenBatch, pre: TokenBatch, mature_weights=None) -> FitnessRepresentation:
        if len(mature) == 0 or len(pre) == 0:
            raise ValueError("encoder needs nonempty mature and pre-selection batches")
        hm = self.h_enc(mature)
        hz = self.h_enc(pre)
        mean_m = hm.mean(axis=0) if mature_weights is None else mature_weights @ hm
        rho, beta, _ = self.encoder_head(mean_m - hz.mean(axis=0))
        return FitnessRepresentation(rho, float(beta))

    def pool(self, h: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
        """Repertoire embedding of one patient's sequence features (plain or attention mean)."""
        w = np.full(len(h), 1.0 / len(h)) if weights is None else np.asarray(weights, dtype=np.float64)
        if not self.config.attention:
            return w @ h
        s, _ = self.attention_scores(h)
        a = w * np.exp(s - s.max())
        return (a @ h) / a.sum()

    def repertoire_embedding(self, batch: TokenBatch, weights=None) -> np.ndarray:
        return self.pool(self.h_a(batch), weights)

    def outcome_mean(self, E: np.ndarray, rho: np.ndarray | None) -> np.ndarray:
        p, c = self.params, self.config
        ga = p["gamma_a"]
        if c.has_propensity:
            mu = (E - rho @ p["W"].T - p["B"]) @ ga + rho @ p["gamma_r"]
        elif c.has_fitness:
            mu = E @ ga + rho @ p["gamma_r"]
        else:
            mu = E @ ga
        return mu + p["gamma_y"]

    @property
    def tau_y(self) -> float:
        return float(np.exp(self.params["log_tau_y"]))

    @property
    def tau_e(self) -> float:
        return float(np.exp(self.params["log_tau_e"]))

    # -- training objectives --------------------------------------------
    def main_loss(
        self,
        mature: TokenBatch,
        pre: TokenBatch | None,
        y: np.ndarray,
        xi: float = 1.0,
        patient_scale: float = 1.0,
        seq_scale: np.ndarray | None = None,
    ):
        """Negative scaled log joint of one minibatch and its gradient.

        ``mature`` and ``pre`` hold equal-sized, patient-major blocks of sequences.
        ``seq_scale[i]`` multiplies patient i's classifier terms and ``patient_scale``
        every per-patient term. Returns (loss, grads, aux) where aux carries the
        repertoire embeddings and fitness representations used by the propensity step.
        """
        c, p = self.config, self.params
        P = len(y)
        y = np.asarray(y, dtype=np.float64)
        bm = len(mature) // P
        seq_scale = np.ones(P) if seq_scale is None else np.asarray(seq_scale, dtype=np.float64)
        grads: dict[str, np.ndarray] = {}
        obj = 0.0

        hA, cA = self.features_fwd("ha", mature)
        if c.attention:
            s, cs = self.attention_scores(hA)
            s3 = s.reshape(P, bm)
            a = np.exp(s3 - s3.max(axis=1, keepdims=True))
            att = a / a.sum(axis=1, keepdims=True)
            H3 = hA.reshape(P, bm, -1)
            E = np.einsum("pj,pjd->pd", att, H3)
        else:
            E = hA.reshape(P, bm, -1).mean(axis=1)

        rho = beta = None
        if c.has_fitness:
            bz = len(pre) // P
            both = TokenBatch.concat([mature, pre])
            he, ce = self.features_fwd("enc0", both)
            diff = he[: P * bm].reshape(P, bm, -1).mean(axis=1) - he[P * bm :].reshape(P, bz, -1).mean(axis=1)
            rho, beta, enc_cache = self.encoder_head(diff)
            f0, c0 = self.features_fwd("hr0", both)
            hr, hr_cache = mlp_forward(p, self.hr_prefixes, f0)
            seg = np.concatenate([np.repeat(np.arange(P), bm), np.repeat(np.arange(P), bz)])
            labels = np.concatenate([np.ones(P * bm), np.zeros(P * bz)])
            logit = np.einsum("nd,nd->n", hr, rho[seg]) + beta[seg]
            w = patient_scale * seq_scale[seg]
            obj += float(np.sum(w * ndiff.bernoulli_logit_loglik(labels, logit)))
            dlogit = w * ndiff.bernoulli_logit_loglik_grad(labels, logit)
            d_hr = dlogit[:, None] * rho[seg]
            d_rho = _segment_sum(dlogit[:, None] * hr, seg, P)
            d_beta = _segment_sum(dlogit, seg, P)
            obj += patient_scale * xi * float(
                np.sum(ndiff.normal_logprior(rho, RHO_PRIOR.loc, RHO_PRIOR.scale))
                + np.sum(ndiff.normal_logprior(beta, BETA_PRIOR.loc, BETA_PRIOR.scale))
            )
            d_rho += patient_scale * xi * ndiff.normal_logprior_grad(rho, RHO_PRIOR.loc, RHO_PRIOR.scale)
            d_beta += patient_scale * xi * ndiff.normal_logprior_grad(beta, BETA_PRIOR.loc, BETA_PRIOR.scale)

        # outcome
        mu = self.outcome_mean(E, rho)
        tau = self.tau_y
        obj += patient_scale * float(np.sum(ndiff.gaussian_loglik(y, mu, tau)))
        _, dmu, dtau = ndiff.gaussian_loglik_grad(y, mu, tau)
        dmu = patient_scale * dmu
        _acc(grads, "log_tau_y", patient_scale * np.sum(dtau) * tau)
        ga = p["gamma_a"]
        if c.has_propensity:
            resid = E - rho @ p["W"].T - p["B"]
            _acc(grads, "gamma_a", dmu @ resid)
            d_rho += np.outer(dmu, p["gamma_r"] - p["W"].T @ ga)
        else:
            _acc(grads, "gamma_a", dmu @ E)
            if c.has_fitness:
                d_rho += np.outer(dmu, p["gamma_r"])
        if c.has_fitness:
            _acc(grads, "gamma_r", dmu @ rho)
        _acc(grads, "gamma_y", np.sum(dmu))
        dE = np.outer(dmu, ga)

        # global priors
        names = [n for n in ("gamma_a", "gamma_r", "gamma_y", "log_tau_y") if n in p]
        obj += p.log_prior(names)
        for name, g in p.log_prior_grad(names).items():
            _acc(grads, name, g)

        # backprop into the outcome feature network
        if c.attention:
            dH3 = att[:, :, None] * dE[:, None, :]
            ds = att * np.einsum("pd,pjd->pj", dE, H3 - E[:, None, :])
            dh_att = self.attention_scores_bwd(cs, ds.ravel(), grads)
            dhA = dH3.reshape(P * bm, -1) + dh_att
        else:
            dhA = np.repeat(dE / bm, bm, axis=0)
        self.features_bwd("ha", mature, cA, dhA, grads)

        if c.has_fitness:
            d_out = np.concatenate([d_rho, d_beta[:, None]], axis=1)
            d_diff = mlp_backward(p, ("enc1", "enc2"), enc_cache, d_out, grads)
            d_he = np.concatenate([np.repeat(d_diff / bm, bm, axis=0), np.repeat(-d_diff / bz, bz, axis=0)])
            self.features_bwd("enc0", both, ce, d_he, grads)
            d_f0 = mlp_backward(p, self.hr_prefixes, hr_cache, d_hr, grads)
            self.features_bwd("hr0", both, c0, d_f0, grads)

        grads = {k: -v for k, v in grads.items()}
        aux = {"E": E, "rho": rho, "beta": beta, "mu": mu}
        return -obj, grads, aux

    def propensity_loss(self, E: np.ndarray, rho: np.ndarray, patient_scale: float = 1.0):
        """Negative scaled propensity log-likelihood plus priors, gradient in (W, B, log_tau_e) only."""
        p = self.params
        tau = self.tau_e
        mean = rho @ p["W"].T + p["B"]
        obj = patient_scale * float(np.sum(ndiff.gaussian_loglik(E, mean, tau)))
        _, dmean, dtau = ndiff.gaussian_loglik_grad(E, mean, tau)
        dmean = patient_scale * dmean
        grads = {
            "W": dmean.T @ rho,
            "B": dmean.sum(axis=0),
            "log_tau_e": np.asarray(patient_scale * np.sum(dtau) * tau),
        }
        obj += p.log_prior(PROPENSITY_PARAMS)
        for name, g in p.log_prior_grad(PROPENSITY_PARAMS).items():
            grads[name] = grads[name] + g
        return -obj, {k: -v for k, v in grads.items()}

    # -- kink signature for finite-difference checks ---------------------
    def argmax_signature(self, mature: TokenBatch, pre: TokenBatch | None = None):
        if self.pooling != "max":
            return None
        sig = []
        prefixes = ["ha"] + (["enc0", "hr0"] if self.config.has_fitness else [])
        for prefix in prefixes:
            batch = mature if prefix == "ha" else TokenBatch.concat([mature, pre])
            _, (m, idx) = self.features_fwd(prefix, batch)
            sig.append(idx.tobytes())
        return tuple(sig)


# ---------------------------------------------------------------------------
# Standalone likelihood pieces


def classifier_loglik(
    model: CaireModel, batch: TokenBatch, s: np.ndarray, rep: FitnessRepresentation
) -> np.ndarray:
    """Per-sequence Bernoulli log-likelihood with logit rho . h_r(x) + beta."""
    logit = model.h_r(batch) @ rep.rho + rep.beta
    return ndiff.bernoulli_logit_loglik(s, logit)


def fitness(model: CaireModel, batch: TokenBatch, rho: np.ndarray, x0: TokenBatch) -> np.ndarray:
    """Relative fitness exp(rho . [h_r(x) - h_r(x0)])."""
    return np.exp((model.h_r(batch) - model.h_r(x0)[0]) @ rho)


def outcome_loglik(model: CaireModel, y, E: np.ndarray, rho: np.ndarray | None) -> np.ndarray:
    return ndiff.gaussian_loglik(y, model.outcome_mean(E, rho), model.tau_y)


def propensity_loglik(E: np.ndarray, rho: np.ndarray, W: np.ndarray, B: np.ndarray, tau_e: float) -> float:
    return float(np.sum(ndiff.gaussian_loglik(E, W @ rho + B, tau_e)))


def nonneural_forward(model: CaireModel, batch: TokenBatch) -> tuple[np.ndarray, np.ndarray]:
    """(h_a, h_r) of the linear model variant."""
    if not model.config.linear_features:
        raise ValueError("nonneural_forward requires the NonNeuralCAIRE variant")
    return model.h_a(batch), model.h_r(batch)
