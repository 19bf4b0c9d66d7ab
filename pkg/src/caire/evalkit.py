"""Metrics, permutation tests and exact finite-space selection oracles."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Callable, Sequence

import numpy as np

from .seqcore import Repertoire
from .simsynth import GroundTruth, detect_motif

METRIC_FIELDS = ("metric", "value", "stderr", "n")


# ---------------------------------------------------------------------------
# Exact selection algebra on a finite sequence space


@dataclass(frozen=True)
class TinyWorld:
    q_z: np.ndarray
    q_a: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        for name in ("q_z", "q_a", "r"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, v)
        n = len(self.q_z)
        if not 1 <= n <= 64 or self.q_a.shape != (n,) or self.r.shape != (n,):
            raise ValueError("TinyWorld needs matching vectors of size 1..64")
        for name in ("q_z", "q_a"):
            v = getattr(self, name)
            if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-12:
                raise ValueError(f"{name} must be a probability vector")
        if np.any(self.r <= 0):
            raise ValueError("fitness must be positive")

    @classmethod
    def random(cls, rng: np.random.Generator, size: int | None = None) -> "TinyWorld":
        n = size or int(rng.integers(2, 65))
        q_z = rng.dirichlet(np.ones(n))
        r = np.exp(rng.normal(0.0, 1.0, n))
        return cls(q_z, oracle_select(q_z, r), r)


def oracle_select(q_z, r) -> np.ndarray:
    """Selected distribution proportional to r * q_z."""
    q_z = np.asarray(q_z, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("fitness must be positive")
    num = r * q_z
    return num / num.sum()


def oracle_fitness(q_z, q_a, x0: int) -> np.ndarray:
    """Fitness recovered as the density ratio q_a/q_z, normalized at the reference x0."""
    q_z = np.asarray(q_z, dtype=np.float64)
    q_a = np.asarray(q_a, dtype=np.float64)
    if q_z[x0] == 0 or q_a[x0] == 0:
        raise ValueError("reference sequence must have positive mass under both distributions")
    if np.any((q_a > 0) & (q_z == 0)):
        raise ValueError("q_a puts mass where q_z has none")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(q_z > 0, q_a / q_z, 0.0)
    return ratio / ratio[x0]


def oracle_reverse(q_a_star, r) -> np.ndarray:
    """Pre-selection distribution that selection under r maps onto q_a_star."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise ValueError("fitness must be positive")
    num = np.asarray(q_a_star, dtype=np.float64) / r
    return num / num.sum()


# ---------------------------------------------------------------------------
# Ranking metrics


def _check_binary(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("need at least one positive and one negative label")
    return labels.astype(np.float64)


def pr_auc(scores, labels) -> float:
    """Average precision with right-step interpolation; tied scores form one threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    k = np.arange(1, len(y) + 1)
    last = np.r_[s[1:] != s[:-1], True]
    tp, k = tp[last], k[last]
    recall = tp / tp[-1]
    precision = tp / k
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def roc_auc_unlabeled(scores_pos, scores_unlabeled) -> tuple[float, float]:
    """Mann-Whitney AUC of positives against unlabeled (ties count 1/2) and a conservative stderr."""
    from scipy.stats import rankdata

    pos = np.asarray(scores_pos, dtype=np.float64)
    unl = np.asarray(scores_unlabeled, dtype=np.float64)
    if len(pos) == 0 or len(unl) == 0:
        raise ValueError("both groups must be nonempty")
    ranks = rankdata(np.concatenate([pos, unl]))
    n_p, n_u = len(pos), len(unl)
    auc = (ranks[:n_p].sum() - n_p * (n_p + 1) / 2.0) / (n_p * n_u)
    return float(auc), 1.0 / (2.0 * math.sqrt(min(n_p, n_u)))


def expected_unlabeled_auc(true_auc: float, binder_fraction: float) -> float:
    """AUC against unlabeled data containing a binder fraction p: 0.5 p + A (1 - p)."""
    return 0.5 * binder_fraction + true_auc * (1.0 - binder_fraction)


def simulate_unlabeled_auc(true_auc: float, binder_fraction: float, n: int, rng: np.random.Generator):
    """Draws Gaussian scores with a known binder-vs-nonbinder AUC and measures it against unlabeled data.

    Returns (measured, stderr, expected).
    """
    shift = math.sqrt(2.0) * NormalDist().inv_cdf(true_auc)
    pos = rng.normal(shift, 1.0, n)
    is_binder = rng.random(n) < binder_fraction
    unl = np.where(is_binder, rng.normal(shift, 1.0, n), rng.normal(0.0, 1.0, n))
    auc, se = roc_auc_unlabeled(pos, unl)
    return auc, se, expected_unlabeled_auc(true_auc, binder_fraction)


def _t_stats(x: np.ndarray, n_a: int) -> np.ndarray:
    """Pooled-variance Student t of the first n_a columns vs the rest, per row; 0 when undefined."""
    a, b = x[:, :n_a], x[:, n_a:]
    n_b = b.shape[1]
    diff = a.mean(axis=1) - b.mean(axis=1)
    pooled = (a.var(axis=1, ddof=1) * (n_a - 1) + b.var(axis=1, ddof=1) * (n_b - 1)) / (n_a + n_b - 2)
    se = np.sqrt(pooled * (1.0 / n_a + 1.0 / n_b))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, diff / se, np.where(diff == 0, 0.0, np.sign(diff) * np.inf))
    return t


def permutation_ttest(group_a, group_b, n_perm: int = 10000, rng: np.random.Generator | None = None) -> float:
    """Two-sided permutation p-value of the t statistic, (b + 1) / (n_perm + 1)."""
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("both groups need at least two values")
    rng = rng if rng is not None else np.random.default_rng(0)
    pooled = np.concatenate([a, b])
    t_obs = abs(_t_stats(pooled[None, :], len(a))[0])
    hits = 0
    chunk = 2000
    done = 0
    while done < n_perm:
        k = min(chunk, n_perm - done)
        perms = rng.permuted(np.broadcast_to(pooled, (k, len(pooled))), axis=1)
        t = np.abs(_t_stats(perms, len(a)))
        hits += int(np.sum(t >= t_obs * (1 - 1e-12)))
        done += k
    return (hits + 1) / (n_perm + 1)


# ---------------------------------------------------------------------------
# Motif recovery on simulated cohorts


def per_patient_motif_prauc(
    model,
    heldout: Sequence[Repertoire],
    truth: GroundTruth,
    epsilon: float = 0.01,
    scorer: Callable[[Sequence[str]], np.ndarray] | None = None,
) -> tuple[float, list[float]]:
    """Mean PR-AUC for recovering causal-motif sequences within each motif-injected held-out patient.

    ``model`` is a fitted model or a list of them (scores are the ensemble mean ATE);
    ``scorer`` overrides the model. Returns (mean, per-patient values).
    """
    if scorer is None:
        from .effects import ate_batch

        members = model if isinstance(model, (list, tuple)) else [model]

        def scorer(seqs):
            return np.mean([ate_batch(m, seqs, epsilon) for m in members], axis=0)

    values = []
    candidates = [r for r in heldout if truth.zeta.get(r.patient_id) == 1]
    if not candidates:
        raise ValueError("held-out set contains no motif-injected patients")
    for rep in candidates:
        labels = np.array([detect_motif(s, truth.kappa_cau) for s in rep.sequences])
        if labels.sum() == 0 or labels.sum() == len(labels):
            warnings.warn(f"patient {rep.patient_id}: no positive and negative sequences; skipped", stacklevel=2)
            continue
        values.append(pr_auc(scorer(rep.sequences), labels))
    if not values:
        raise ValueError("no held-out patient has causal-motif sequences")
    return float(np.mean(values)), values


# ---------------------------------------------------------------------------
# Output


@dataclass(frozen=True)
class MetricRow:
    metric: str
    value: float
    stderr: float = float("nan")
    n: int = 0


def write_metrics_csv(rows: Sequence[MetricRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r.metric, repr(float(r.value)), "" if math.isnan(r.stderr) else repr(float(r.stderr)), r.n])


def read_metrics_csv(path: str | Path) -> list[MetricRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                MetricRow(rec["metric"], float(rec["value"]), float(rec["stderr"]) if rec["stderr"] else float("nan"), int(rec["n"]))
            )
    return rows
