"""Confounded semisynthetic repertoire cohorts with known causal and confounded motifs."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .seqcore import CohortDataset, Repertoire, assign_splits, spawn_rngs, validate_sequence

log = logging.getLogger(__name__)

MAX_REDRAWS = 1000

# Approximate residue usage in CDR3-beta junctions (cysteine/phenylalanine anchors trimmed).
CDR3_AA_FREQS = {
    "A": 0.075, "C": 0.002, "D": 0.050, "E": 0.070, "F": 0.030, "G": 0.120, "H": 0.012,
    "I": 0.020, "K": 0.025, "L": 0.055, "M": 0.010, "N": 0.045, "P": 0.045, "Q": 0.055,
    "R": 0.045, "S": 0.130, "T": 0.070, "V": 0.040, "W": 0.015, "Y": 0.086,
}

BaseSampler = Callable[[np.random.Generator, int], list[str]]


@dataclass(frozen=True)
class MotifSpec:
    motif: str
    position: int = 3

    def __post_init__(self):
        validate_sequence(self.motif)
        if self.position < 0:
            raise ValueError("motif position must be >= 0")


@dataclass
class SimConfig:
    n_patients: int = 240
    m_mature: int = 2000
    m_pool: int | None = None  # defaults to 2 * m_mature
    b_preselect: int = 2000
    eta: float = 0.01
    p_zeta: float = 0.4
    p_u: float = 0.4
    fitness_coeffs: tuple[float, float] = (6.0, -5.0)
    gamma_a: float = 0.4
    gamma_u: float = 2.0
    gamma_0: float = 0.0
    tau_y: float = 0.1
    motif_position: int = 3
    motif_length: int = 3
    val_fraction: float = 0.125
    test_fraction: float = 0.125
    seed: int = 0

    def __post_init__(self):
        for name in ("eta", "p_zeta", "p_u"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.eta * 2 > 1:
            raise ValueError("eta too large for the injection mixture")
        self.fitness_coeffs = tuple(float(c) for c in self.fitness_coeffs)

    @property
    def pool_size(self) -> int:
        return self.m_pool if self.m_pool is not None else 2 * self.m_mature


@dataclass
class GroundTruth:
    zeta: dict[str, int]
    u: dict[str, int]
    kappa_cau: MotifSpec
    kappa_con: MotifSpec
    eta: float
    seed: int
    cau_coincidence_rate: float = 0.0
    injected_counts: dict[str, int] = field(default_factory=dict)

    def causal_labels(self, seqs: Sequence[str]) -> np.ndarray:
        return np.array([detect_motif(s, self.kappa_cau) for s in seqs], dtype=np.int8)


def detect_motif(x: str, kappa: MotifSpec | str) -> int:
    motif = kappa.motif if isinstance(kappa, MotifSpec) else kappa
    return int(motif in x)


def inject_motif(x: str, kappa: MotifSpec) -> str:
    end = kappa.position + len(kappa.motif)
    if len(x) < end:
        raise ValueError(f"sequence {x!r} too short to carry motif at position {kappa.position}")
    return x[: kappa.position] + kappa.motif + x[end:]


# ---------------------------------------------------------------------------
# Base (pre-injection) samplers


def synthetic_sampler(
    min_len: int = 8, max_len: int = 18, freqs: dict[str, float] | None = None
) -> BaseSampler:
    """Lengths uniform on [min_len, max_len], residues i.i.d. from fixed frequencies."""
    freqs = freqs or CDR3_AA_FREQS
    letters = np.frombuffer("".join(freqs).encode(), dtype=np.uint8)
    p = np.array(list(freqs.values()), dtype=np.float64)
    p = p / p.sum()

    def sample(rng: np.random.Generator, n: int) -> list[str]:
        lengths = rng.integers(min_len, max_len + 1, size=n)
        idx = rng.choice(len(letters), size=(n, max_len), p=p)
        chars = letters[idx]
        return [chars[j, : lengths[j]].tobytes().decode() for j in range(n)]

    return sample


def corpus_sampler(corpus: Sequence[str]) -> BaseSampler:
    """Resample with replacement from a seed corpus of sequences."""
    corpus = [validate_sequence(s) for s in corpus]
    if not corpus:
        raise ValueError("empty seed corpus")

    def sample(rng: np.random.Generator, n: int) -> list[str]:
        idx = rng.integers(0, len(corpus), size=n)
        return [corpus[i] for i in idx]

    return sample


def load_corpus(path: str | Path) -> list[str]:
    from .seqcore import read_sequence_file

    return read_sequence_file(path)


# ---------------------------------------------------------------------------


def choose_motifs(
    base_corpus: Sequence[str],
    rng: np.random.Generator,
    length: int = 3,
    position: int = 3,
    band: tuple[float, float] = (10.0, 20.0),
) -> tuple[MotifSpec, MotifSpec]:
    """Draw (causal, confounded) motifs from k-mers in a low-frequency percentile band."""
    counts: Counter[str] = Counter()
    for s in base_corpus:
        for j in range(len(s) - length + 1):
            counts[s[j : j + length]] += 1
    total = sum(counts.values())
    if total < 1000:
        raise ValueError(f"corpus has only {total} length-{length} subsequences (need >= 1000)")
    kmers = sorted(counts)
    freq = np.array([counts[k] for k in kmers], dtype=np.float64)
    lo_pct, hi_pct = band
    while True:
        lo, hi = np.percentile(freq, [lo_pct, hi_pct])
        if hi_pct >= 100.0:
            inband = freq >= lo
        else:
            inband = (freq >= lo) & (freq < hi)
        candidates = [k for k, ok in zip(kmers, inband) if ok]
        if len(candidates) >= 2:
            break
        if hi_pct >= 100.0:
            raise ValueError("fewer than two distinct motifs available in corpus")
        log.warning("percentile band [%g, %g) holds %d motif(s); widening", lo_pct, hi_pct, len(candidates))
        hi_pct = min(hi_pct + 1.0, 100.0)
    pick = rng.choice(len(candidates), size=2, replace=False)
    return MotifSpec(candidates[pick[0]], position), MotifSpec(candidates[pick[1]], position)


def apply_selection(pool: Sequence[str], r: Callable[[str], float]) -> np.ndarray:
    """Finite-sample selection: weight of pool element j is r(z_j) / sum_k r(z_k)."""
    if len(pool) == 0:
        raise ValueError("empty selection pool")
    fit = np.array([r(x) for x in pool], dtype=np.float64)
    if np.any(~np.isfinite(fit)) or np.any(fit <= 0):
        raise ValueError("fitness must be strictly positive and finite on the pool")
    return fit / fit.sum()


def motif_fitness(u: int, kappa_con: MotifSpec, coeffs: tuple[float, float] = (6.0, -5.0)) -> Callable[[str], float]:
    log_r = coeffs[0] * u + coeffs[1]
    return lambda x: math.exp(log_r * detect_motif(x, kappa_con))


def _draw_long_enough(base: BaseSampler, rng: np.random.Generator, n: int, min_len: int) -> list[str]:
    out: list[str] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > MAX_REDRAWS:
            raise RuntimeError(f"base sampler failed to yield sequences of length >= {min_len}")
        draw = base(rng, n - len(out))
        out.extend(s for s in draw if len(s) >= min_len)
    return out


def sample_preselection(
    n: int,
    base: BaseSampler,
    rng: np.random.Generator,
    eta: float,
    zeta: int,
    kappa_con: MotifSpec,
    kappa_cau: MotifSpec,
) -> tuple[list[str], int, int]:
    """Draws from the injected mixture (1-eta-eta*zeta) base + eta con + eta*zeta cau.

    Returns the sequences and the number of confounded and causal injections.
    """
    probs = np.array([1.0 - eta - eta * zeta, eta, eta * zeta])
    comp = rng.choice(3, size=n, p=probs)
    seqs = base(rng, n)
    for c, kappa in ((1, kappa_con), (2, kappa_cau)):
        idx = np.flatnonzero(comp == c)
        if len(idx) == 0:
            continue
        need = kappa.position + len(kappa.motif)
        fresh = _draw_long_enough(base, rng, len(idx), need)
        for j, s in zip(idx, fresh):
            seqs[j] = inject_motif(s, kappa)
    return seqs, int(np.sum(comp == 1)), int(np.sum(comp == 2))


def simulate_patient(
    pid: str,
    cfg: SimConfig,
    base: BaseSampler,
    rng: np.random.Generator,
    kappa_cau: MotifSpec,
    kappa_con: MotifSpec,
) -> tuple[Repertoire, int, int, dict]:
    zeta = int(rng.random() < cfg.p_zeta)
    pre, n_con, n_cau = sample_preselection(cfg.b_preselect, base, rng, cfg.eta, zeta, kappa_con, kappa_cau)
    u = int(rng.random() < cfg.p_u)
    pool, _, _ = sample_preselection(cfg.pool_size, base, rng, cfg.eta, zeta, kappa_con, kappa_cau)
    weights = apply_selection(pool, motif_fitness(u, kappa_con, cfg.fitness_coeffs))
    cdf = np.cumsum(weights)
    pick = np.minimum(np.searchsorted(cdf, rng.random(cfg.m_mature) * cdf[-1], side="right"), len(pool) - 1)
    mature = [pool[j] for j in pick]
    cau_frac = float(np.mean([detect_motif(s, kappa_cau) for s in mature]))
    mean_y = cfg.gamma_a * float(cau_frac > cfg.eta / 2) + cfg.gamma_u * u + cfg.gamma_0
    y = float(rng.normal(mean_y, cfg.tau_y))
    rep = Repertoire(pid, tuple(mature), np.full(len(mature), 1.0 / len(mature)), y, tuple(pre))
    stats = {"n_con": n_con, "n_cau": n_cau}
    return rep, zeta, u, stats


def simulate_cohort(
    cfg: SimConfig, base_sampler: BaseSampler | None = None, rng: np.random.Generator | None = None
) -> tuple[CohortDataset, GroundTruth]:
    """Semisynthetic cohort: motif-injected pre-selection repertoires, confounded selection, outcomes."""
    base = base_sampler or synthetic_sampler()
    ss = np.random.SeedSequence(cfg.seed)
    motif_ss, patient_ss = ss.spawn(2)
    motif_rng = rng if rng is not None else spawn_rngs(motif_ss, 1)[0]
    corpus = base(motif_rng, 20000)
    kappa_cau, kappa_con = choose_motifs(corpus, motif_rng, cfg.motif_length, cfg.motif_position)

    reps, zetas, us = [], {}, {}
    injected = {"con": 0, "cau": 0}
    coincident = total_z0 = 0
    width = len(str(cfg.n_patients - 1))
    for i, prng in enumerate(spawn_rngs(patient_ss, cfg.n_patients)):
        pid = f"P{i:0{width}d}"
        rep, zeta, u, stats = simulate_patient(pid, cfg, base, prng, kappa_cau, kappa_con)
        reps.append(rep)
        zetas[pid], us[pid] = zeta, u
        injected["con"] += stats["n_con"]
        injected["cau"] += stats["n_cau"]
        if zeta == 0:
            seqs = rep.sequences + rep.preselection_sequences
            coincident += sum(detect_motif(s, kappa_cau) for s in seqs)
            total_z0 += len(seqs)
    splits = assign_splits(
        [r.patient_id for r in reps], [r.outcome_y for r in reps], cfg.val_fraction, cfg.test_fraction, cfg.seed
    )
    truth = GroundTruth(
        zeta=zetas,
        u=us,
        kappa_cau=kappa_cau,
        kappa_con=kappa_con,
        eta=cfg.eta,
        seed=cfg.seed,
        cau_coincidence_rate=coincident / total_z0 if total_z0 else 0.0,
        injected_counts=injected,
    )
    return CohortDataset(tuple(reps), splits), truth


def write_ground_truth(truth: GroundTruth, truth_csv: str | Path, manifest_path: str | Path) -> None:
    with open(truth_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "zeta", "u"])
        for pid in truth.zeta:
            w.writerow([pid, truth.zeta[pid], truth.u[pid]])
    manifest = {
        "kappa_cau": truth.kappa_cau.motif,
        "kappa_con": truth.kappa_con.motif,
        "position": truth.kappa_cau.position,
        "eta": truth.eta,
        "seed": truth.seed,
        "cau_coincidence_rate": truth.cau_coincidence_rate,
        "injected_counts": truth.injected_counts,
    }
    Path(manifest_path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_ground_truth(truth_csv: str | Path, manifest_path: str | Path) -> GroundTruth:
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    zeta, u = {}, {}
    with open(truth_csv, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            zeta[row["patient_id"]] = int(row["zeta"])
            u[row["patient_id"]] = int(row["u"])
    pos = int(manifest["position"])
    return GroundTruth(
        zeta=zeta,
        u=u,
        kappa_cau=MotifSpec(manifest["kappa_cau"], pos),
        kappa_con=MotifSpec(manifest["kappa_con"], pos),
        eta=float(manifest["eta"]),
        seed=int(manifest["seed"]),
        cau_coincidence_rate=float(manifest.get("cau_coincidence_rate", 0.0)),
        injected_counts=dict(manifest.get("injected_counts", {})),
    )


def sim_config_dict(cfg: SimConfig) -> dict:
    d = asdict(cfg)
    d["fitness_coeffs"] = list(cfg.fitness_coeffs)
    return d
