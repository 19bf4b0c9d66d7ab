"""Average treatment effects of sequence dosage and ensemble uncertainty."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .models import CaireModel, TokenBatch
from .seqcore import Repertoire
from .train import FittedModel

DEFAULT_EPSILON = 0.1
EFFECT_FIELDS = ("sequence", "ate", "mu_hat", "sigma_hat", "p_tilde")


@dataclass(frozen=True)
class CohortSummary:
    """Training-fold averages needed to evaluate ATEs without the cohort.

    For attention variants ``patient_means`` holds each patient's attention-weighted
    embedding and ``log_norms`` the log of its mean attention weight.
    """

    mean_embedding: np.ndarray
    n_patients: int
    patient_means: np.ndarray | None = None
    log_norms: np.ndarray | None = None

    @classmethod
    def from_fitted(cls, fitted: FittedModel) -> "CohortSummary":
        if fitted.mean_embedding is None:
            raise ValueError("fitted model has no cohort summary")
        n = len(fitted.train_ids)
        if fitted.model.config.attention:
            items = [fitted.attention_summary[pid] for pid in fitted.train_ids]
            means = np.stack([m for m, _ in items])
            norms = np.array([z for _, z in items])
            return cls(fitted.mean_embedding, n, means, norms)
        return cls(fitted.mean_embedding, n)


@dataclass(frozen=True)
class EffectEstimate:
    sequence: str
    epsilon: float
    ate: float
    per_model: tuple[float, ...]
    mu_hat: float
    sigma_hat: float
    p_tilde: float


def _as_model(model) -> CaireModel:
    return model.model if isinstance(model, FittedModel) else model


def _summary(model, summary: CohortSummary | None) -> CohortSummary:
    if summary is not None:
        return summary
    if isinstance(model, FittedModel):
        return CohortSummary.from_fitted(model)
    raise ValueError("a CohortSummary is required for a bare model")


def mean_pooled_ate(gamma_a: np.ndarray, h_star: np.ndarray, mean_embedding: np.ndarray, epsilon: float):
    """epsilon * gamma_a . (h(a*) - cohort mean) for one or many sequences."""
    return epsilon * ((h_star - mean_embedding) @ gamma_a)


def attention_ate(
    gamma_a: np.ndarray,
    h_star: np.ndarray,
    log_g_star: np.ndarray,
    patient_means: np.ndarray,
    log_norms: np.ndarray,
    epsilon: float,
):
    """Per-patient attention mixture effect averaged over patients.

    Mixing an epsilon share of a* into patient i moves its embedding to
    A_i + w_i (h* - A_i) with w_i = eps g* / ((1 - eps) D_i + eps g*).
    """
    h_star = np.atleast_2d(h_star)
    log_g_star = np.atleast_1d(log_g_star)
    if epsilon == 0:
        return np.zeros(len(h_star))
    if epsilon == 1:
        return h_star @ gamma_a - np.mean(patient_means @ gamma_a)
    with np.errstate(divide="ignore"):
        log_a = math.log(epsilon) + log_g_star[:, None]  # (S, 1)
        log_b = math.log1p(-epsilon) + log_norms[None, :]  # (1, n)
    w = np.exp(log_a - np.logaddexp(log_a, log_b))  # (S, n)
    proj_star = h_star @ gamma_a  # (S,)
    proj_pat = patient_means @ gamma_a  # (n,)
    return np.mean(w * (proj_star[:, None] - proj_pat[None, :]), axis=1)


def ate_batch(model, seqs: Sequence[str], epsilon: float = DEFAULT_EPSILON, summary: CohortSummary | None = None):
    """ATE of each sequence at dosage ``epsilon`` (vector)."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    m = _as_model(model)
    summary = _summary(model, summary)
    batch = TokenBatch.from_sequences(seqs, m.config.l_max)
    if len(batch) == 0:
        return np.zeros(0)
    h = m.h_a(batch)
    ga = m.params["gamma_a"]
    if m.config.attention:
        s, _ = m.attention_scores(h)
        return attention_ate(ga, h, s, summary.patient_means, summary.log_norms, epsilon)
    return mean_pooled_ate(ga, h, summary.mean_embedding, epsilon)


def ate(model, a_star: str, epsilon: float = DEFAULT_EPSILON, summary: CohortSummary | None = None) -> float:
    return float(ate_batch(model, [a_star], epsilon, summary)[0])


def ensemble_stats(per_model: Sequence[float]) -> tuple[float, float, float]:
    """(mu_hat, sigma_hat, p_tilde) with a K-1 denominator and p_tilde = Phi(-|mu|/sigma)."""
    x = np.asarray(per_model, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("ensemble needs at least two models")
    mu = float(np.mean(x))
    # identical members must hit the degenerate rule exactly, not via rounding noise
    sigma = 0.0 if np.all(x == x[0]) else float(np.std(x, ddof=1))
    if sigma == 0.0:
        p = 0.5 if mu == 0.0 else 0.0
    else:
        p = NormalDist().cdf(-abs(mu) / sigma)
    return mu, sigma, p


def ensemble_ate_batch(ensemble: Sequence, seqs: Sequence[str], epsilon: float = DEFAULT_EPSILON):
    """EffectEstimate per sequence; each model uses its own training-fold summary."""
    if len(ensemble) < 2:
        raise ValueError("ensemble needs at least two models")
    per = np.stack([ate_batch(m, seqs, epsilon) for m in ensemble], axis=1) if seqs else np.zeros((0, len(ensemble)))
    out = []
    for seq, row in zip(seqs, per):
        mu, sigma, p = ensemble_stats(row)
        out.append(EffectEstimate(seq, epsilon, mu, tuple(float(v) for v in row), mu, sigma, p))
    return out


def ensemble_ate(ensemble: Sequence, a_star: str, epsilon: float = DEFAULT_EPSILON) -> EffectEstimate:
    return ensemble_ate_batch(ensemble, [a_star], epsilon)[0]


def repertoire_effect(model, rep: Repertoire, summary: CohortSummary | None = None) -> float:
    """Frequency-weighted mean full-dosage ATE over a repertoire's sequences."""
    return float(rep.weights @ ate_batch(model, rep.sequences, 1.0, summary))


def effect_decomposition(
    reps: Sequence[Repertoire], model, summary: CohortSummary | None = None
) -> tuple[float, float]:
    """(between_sd, within_sd) of full-dosage effects.

    between: population sd across patients of each patient's weighted mean effect;
    within: root of the patient-averaged weighted within-patient variance. Their squares
    add up to the variance of the effect of a sequence drawn by first picking a patient.
    """
    if len(reps) < 2:
        raise ValueError("effect decomposition needs at least two repertoires")
    means, variances = [], []
    for rep in reps:
        eff = ate_batch(model, rep.sequences, 1.0, summary)
        m = float(rep.weights @ eff)
        means.append(m)
        variances.append(float(rep.weights @ (eff - m) ** 2))
    return float(np.std(means)), float(math.sqrt(np.mean(variances)))


def write_effects_csv(rows: Sequence[dict], path: str | Path, extra_fields: Sequence[str] = ()) -> None:
    """Rows carry the effect fields; floats are written with repr for exact round trips."""
    header = list(EFFECT_FIELDS) + list(extra_fields)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(row.get(k)) for k in header])


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def estimate_rows(ensemble: Sequence, seqs: Sequence[str], epsilon: float = DEFAULT_EPSILON) -> list[dict]:
    """Batch scoring with per-row errors for sequences the models cannot encode."""
    from .seqcore import SequenceError, tokenize

    l_max = _as_model(ensemble[0]).config.l_max
    ok, errors = [], {}
    for i, s in enumerate(seqs):
        try:
            tokenize([s], l_max)
            ok.append(i)
        except SequenceError as exc:
            errors[i] = str(exc)
    good = [seqs[i] for i in ok]
    if len(ensemble) >= 2:
        est = {i: e for i, e in zip(ok, ensemble_ate_batch(ensemble, good, epsilon))}
    else:
        vals = ate_batch(ensemble[0], good, epsilon)
        est = {
            i: EffectEstimate(seqs[i], epsilon, float(v), (float(v),), float(v), float("nan"), float("nan"))
            for i, v in zip(ok, vals)
        }
    rows = []
    for i, s in enumerate(seqs):
        if i in errors:
            rows.append({"sequence": s, "error": errors[i]})
        else:
            e = est[i]
            rows.append(
                {"sequence": s, "ate": e.ate, "mu_hat": e.mu_hat, "sigma_hat": e.sigma_hat, "p_tilde": e.p_tilde, "error": ""}
            )
    return rows
