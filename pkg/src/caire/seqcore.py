"""Amino-acid sequences, encodings, repertoire data model and minibatch sampling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
AA_INDEX = {aa: i for i, aa in enumerate(ALPHABET)}
END_TOKEN = 20
PAD_TOKEN = 21
N_TOKENS = 22
N_FEATURES = 24  # 20 residues + end token + 3 position features
SPLITS = ("train", "validation", "test")

# Published BLOSUM50 matrix, rows and columns in ALPHABET order.
BLOSUM50 = np.array(
    [
        [5, -1, -2, -1, -3, 0, -2, -1, -1, -2, -1, -1, -1, -1, -2, 1, 0, 0, -3, -2],
        [-1, 13, -4, -3, -2, -3, -3, -2, -3, -2, -2, -2, -4, -3, -4, -1, -1, -1, -5, -3],
        [-2, -4, 8, 2, -5, -1, -1, -4, -1, -4, -4, 2, -1, 0, -2, 0, -1, -4, -5, -3],
        [-1, -3, 2, 6, -3, -3, 0, -4, 1, -3, -2, 0, -1, 2, 0, -1, -1, -3, -3, -2],
        [-3, -2, -5, -3, 8, -4, -1, 0, -4, 1, 0, -4, -4, -4, -3, -3, -2, -1, 1, 4],
        [0, -3, -1, -3, -4, 8, -2, -4, -2, -4, -3, 0, -2, -2, -3, 0, -2, -4, -3, -3],
        [-2, -3, -1, 0, -1, -2, 10, -4, 0, -3, -1, 1, -2, 1, 0, -1, -2, -4, -3, 2],
        [-1, -2, -4, -4, 0, -4, -4, 5, -3, 2, 2, -3, -3, -3, -4, -3, -1, 4, -3, -1],
        [-1, -3, -1, 1, -4, -2, 0, -3, 6, -3, -2, 0, -1, 2, 3, 0, -1, -3, -3, -2],
        [-2, -2, -4, -3, 1, -4, -3, 2, -3, 5, 3, -4, -4, -2, -3, -3, -1, 1, -2, -1],
        [-1, -2, -4, -2, 0, -3, -1, 2, -2, 3, 7, -2, -3, 0, -2, -2, -1, 1, -1, 0],
        [-1, -2, 2, 0, -4, 0, 1, -3, 0, -4, -2, 7, -2, 0, -1, 1, 0, -3, -4, -2],
        [-1, -4, -1, -1, -4, -2, -2, -3, -1, -4, -3, -2, 10, -1, -3, -1, -1, -3, -4, -3],
        [-1, -3, 0, 2, -4, -2, 1, -3, 2, -2, 0, 0, -1, 7, 1, 0, -1, -3, -1, -1],
        [-2, -4, -2, 0, -3, -3, 0, -4, 3, -3, -2, -1, -3, 1, 7, -1, -1, -3, -3, -1],
        [1, -1, 0, -1, -3, 0, -1, -3, 0, -3, -2, 1, -1, 0, -1, 5, 2, -2, -4, -2],
        [0, -1, -1, -1, -2, -2, -2, -1, -1, -1, -1, 0, -1, -1, -1, 2, 5, 0, -3, -2],
        [0, -1, -4, -3, -1, -4, -4, 4, -3, 1, 1, -3, -3, -3, -3, -2, 0, 5, -3, -1],
        [-3, -5, -5, -3, 1, -3, -3, -3, -3, -2, -1, -4, -4, -1, -3, -4, -3, -3, 15, 2],
        [-2, -3, -3, -2, 4, -3, 2, -1, -2, -1, 0, -2, -3, -1, -1, -2, -2, -1, 2, 8],
    ],
    dtype=np.float64,
)


class SequenceError(ValueError):
    """Invalid amino-acid sequence or one that does not fit the encoding width."""


class CohortParseError(ValueError):
    """Malformed cohort input file."""


def validate_sequence(seq: str, where: str = "") -> str:
    if not seq:
        raise SequenceError(f"empty sequence{where}")
    bad = [c for c in seq if c not in AA_INDEX]
    if bad:
        raise SequenceError(f"non-alphabet character {bad[0]!r} in {seq!r}{where}")
    return seq


# Row embeddings of the token alphabet (residues, end token, padding) in the
# first 21 encoding columns.
ONEHOT_EMBED = np.zeros((N_TOKENS, 21))
ONEHOT_EMBED[np.arange(21), np.arange(21)] = 1.0
BLOSUM_EMBED = np.zeros((N_TOKENS, 21))
BLOSUM_EMBED[:20, :20] = BLOSUM50
BLOSUM_EMBED[END_TOKEN, 20] = 1.0
EMBEDDINGS = {"onehot": ONEHOT_EMBED, "blosum": BLOSUM_EMBED}


def position_features(n_rows: int) -> np.ndarray:
    """Start/end/center indicators for the occupied rows of one sequence.

    ``n_rows`` counts the end token. Returns an (n_rows, 3) array in [0, 1].
    """
    if n_rows == 1:
        return np.zeros((1, 3))
    i = np.arange(n_rows, dtype=np.float64)
    denom = n_rows - 1
    start = i / denom
    end = (denom - i) / denom
    center = 1.0 - np.abs(2.0 * i / denom - 1.0)
    return np.stack([start, end, center], axis=1)


@dataclass(frozen=True)
class EncodedSequence:
    matrix: np.ndarray  # (L_max, 24)
    true_length: int


def tokenize(seqs: Sequence[str], l_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Token matrix (N, l_max) and residue counts for a batch of sequences.

    Residues map to 0..19, the end token to 20 and padding to 21.
    """
    n = len(seqs)
    tokens = np.full((n, l_max), PAD_TOKEN, dtype=np.int8)
    lengths = np.empty(n, dtype=np.int16)
    for j, s in enumerate(seqs):
        if not s:
            raise SequenceError("empty sequence")
        if len(s) + 1 > l_max:
            raise SequenceError(f"sequence {s!r} of length {len(s)} exceeds L_max-1={l_max - 1}")
        try:
            tokens[j, : len(s)] = [AA_INDEX[c] for c in s]
        except KeyError as exc:
            raise SequenceError(f"non-alphabet character {exc.args[0]!r} in {s!r}") from None
        tokens[j, len(s)] = END_TOKEN
        lengths[j] = len(s)
    return tokens, lengths


def detokenize(tokens: np.ndarray, lengths: np.ndarray) -> list[str]:
    return ["".join(ALPHABET[t] for t in row[:n]) for row, n in zip(tokens, lengths)]


def dense_encode(tokens: np.ndarray, lengths: np.ndarray, mode: str = "onehot") -> np.ndarray:
    """Dense (N, L_max, 24) encoding of a token batch."""
    embed = EMBEDDINGS[mode]
    n, l_max = tokens.shape
    out = np.zeros((n, l_max, N_FEATURES))
    out[:, :, :21] = embed[tokens.astype(np.intp)]
    for occ in np.unique(lengths):
        rows = lengths == occ
        out[rows, : occ + 1, 21:] = position_features(int(occ) + 1)
    return out


def _encode(seq: str, l_max: int, mode: str) -> EncodedSequence:
    validate_sequence(seq)
    tokens, lengths = tokenize([seq], l_max)
    return EncodedSequence(dense_encode(tokens, lengths, mode)[0], len(seq))


def encode_onehot(seq: str, l_max: int) -> EncodedSequence:
    return _encode(seq, l_max, "onehot")


def encode_blosum(seq: str, l_max: int) -> EncodedSequence:
    return _encode(seq, l_max, "blosum")


def decode_onehot(enc: EncodedSequence) -> str:
    rows = enc.matrix[: enc.true_length, :20]
    return "".join(ALPHABET[i] for i in rows.argmax(axis=1))


@dataclass(frozen=True, eq=False)
class Repertoire:
    """One patient's weighted mature repertoire, outcome and pre-selection samples.

    ``weights`` are normalized on construction.
    """

    patient_id: str
    sequences: tuple[str, ...]
    weights: np.ndarray
    outcome_y: float
    preselection_sequences: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.sequences:
            raise ValueError(f"patient {self.patient_id}: no mature sequences")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (len(self.sequences),) or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError(f"patient {self.patient_id}: invalid weights")
        total = w.sum()
        if total <= 0:
            raise ValueError(f"patient {self.patient_id}: weights sum to zero")
        w = w / total
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "sequences", tuple(self.sequences))
        object.__setattr__(self, "preselection_sequences", tuple(self.preselection_sequences))

    @property
    def max_length(self) -> int:
        return max(len(s) for s in self.sequences + self.preselection_sequences)


@dataclass(frozen=True, eq=False)
class CohortDataset:
    repertoires: tuple[Repertoire, ...]
    split_assignment: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.patient_id for r in self.repertoires]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate patient_id in cohort")
        if self.split_assignment:
            if set(self.split_assignment) != set(ids):
                raise ValueError("split assignment must cover exactly the cohort patients")
            if not set(self.split_assignment.values()) <= set(SPLITS):
                raise ValueError("unknown split name")

    def split(self, name: str) -> list[Repertoire]:
        return [r for r in self.repertoires if self.split_assignment.get(r.patient_id) == name]

    def by_id(self, patient_id: str) -> Repertoire:
        for r in self.repertoires:
            if r.patient_id == patient_id:
                return r
        raise KeyError(patient_id)

    @property
    def l_max(self) -> int:
        return max(r.max_length for r in self.repertoires) + 1

    def with_splits(self, assignment: Mapping[str, str]) -> "CohortDataset":
        return CohortDataset(self.repertoires, dict(assignment))


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Philox counter-based generator; the single RNG family used throughout."""
    return np.random.Generator(np.random.Philox(seed))


def spawn_rngs(seed: int | np.random.SeedSequence, n: int) -> list[np.random.Generator]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [make_rng(child) for child in ss.spawn(n)]


def outcome_strata(y: np.ndarray, n_bins: int = 3) -> np.ndarray:
    """Quantile bin index of each outcome (ties share a bin)."""
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        return np.zeros(0, dtype=int)
    edges = np.quantile(y, np.linspace(0, 1, n_bins + 1)[1:-1])
    return np.searchsorted(edges, y, side="right")


def assign_splits(
    patient_ids: Sequence[str],
    outcomes: Sequence[float],
    val_fraction: float = 0.125,
    test_fraction: float = 0.125,
    seed: int = 0,
) -> dict[str, str]:
    """Seeded, outcome-stratified split with floor rounding; remainder goes to train."""
    n = len(patient_ids)
    n_val = math.floor(val_fraction * n)
    n_test = math.floor(test_fraction * n)
    if n_val + n_test > n:
        raise ValueError("validation and test fractions exceed the cohort")
    rng = make_rng(seed)
    strata = outcome_strata(np.asarray(outcomes, dtype=np.float64))
    # Interleave strata so any prefix of the ordering is stratified.
    keys = np.empty(n)
    for s in np.unique(strata):
        members = np.flatnonzero(strata == s)
        perm = rng.permutation(len(members))
        keys[members[perm]] = (np.arange(len(members)) + rng.random()) / len(members)
    order = np.lexsort((rng.random(n), keys))
    assignment = {}
    for rank, idx in enumerate(order):
        if rank < n_val:
            assignment[patient_ids[idx]] = "validation"
        elif rank < n_val + n_test:
            assignment[patient_ids[idx]] = "test"
        else:
            assignment[patient_ids[idx]] = "train"
    return assignment


def sample_indices(weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k i.i.d. indices drawn with probability proportional to ``weights``."""
    if k < 1:
        raise ValueError("minibatch size must be >= 1")
    n = len(weights)
    if n == 1:
        return np.zeros(k, dtype=np.intp)
    cdf = np.cumsum(weights)
    u = rng.random(k) * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)


def sample_minibatch(rep: Repertoire, k: int, rng: np.random.Generator) -> list[str]:
    idx = sample_indices(rep.weights, k, rng)
    return [rep.sequences[i] for i in idx]


# ---------------------------------------------------------------------------
# File formats


def _read_rows(path: Path, delimiter: str, required: Sequence[str]) -> Iterable[tuple[int, dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortParseError(f"{path}: missing header row") from None
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise CohortParseError(f"{path}: header lacks columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CohortParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, dict(zip(header, (c.strip() for c in row)))


def load_cohort(
    repertoire_path: str | Path,
    outcomes_path: str | Path,
    val_fraction: float = 0.125,
    test_fraction: float = 0.125,
    seed: int = 0,
) -> CohortDataset:
    repertoire_path, outcomes_path = Path(repertoire_path), Path(outcomes_path)
    outcomes: dict[str, float] = {}
    for lineno, row in _read_rows(outcomes_path, ",", ("patient_id", "y")):
        pid = row["patient_id"]
        if pid in outcomes:
            raise CohortParseError(f"{outcomes_path}:{lineno}: duplicate patient_id {pid!r}")
        try:
            outcomes[pid] = float(row["y"])
        except ValueError:
            raise CohortParseError(f"{outcomes_path}:{lineno}: bad outcome {row['y']!r}") from None

    mature: dict[str, tuple[list[str], list[float]]] = {}
    pre: dict[str, list[str]] = {}
    for lineno, row in _read_rows(repertoire_path, "\t", ("patient_id", "cdr3_aa", "weight", "compartment")):
        pid, seq, comp = row["patient_id"], row["cdr3_aa"], row["compartment"]
        try:
            validate_sequence(seq, f" (patient {pid})")
        except SequenceError as exc:
            raise CohortParseError(f"{repertoire_path}:{lineno}: {exc}") from None
        if comp == "mature":
            try:
                w = float(row["weight"])
            except ValueError:
                raise CohortParseError(f"{repertoire_path}:{lineno}: bad weight {row['weight']!r}") from None
            if not (w >= 0 and math.isfinite(w)):
                raise CohortParseError(f"{repertoire_path}:{lineno}: weight must be nonnegative")
            seqs, ws = mature.setdefault(pid, ([], []))
            seqs.append(seq)
            ws.append(w)
        elif comp == "preselection":
            pre.setdefault(pid, []).append(seq)
        else:
            raise CohortParseError(f"{repertoire_path}:{lineno}: unknown compartment {comp!r}")

    for pid in outcomes:
        if pid not in mature:
            raise CohortParseError(f"patient {pid!r} has an outcome but no mature sequences")
    unknown = sorted(set(mature) - set(outcomes))
    if unknown:
        raise CohortParseError(f"patients without outcomes: {unknown[:5]}")

    reps = tuple(
        Repertoire(pid, tuple(mature[pid][0]), np.array(mature[pid][1]), outcomes[pid], tuple(pre.get(pid, ())))
        for pid in outcomes
    )
    ids = [r.patient_id for r in reps]
    splits = assign_splits(ids, [r.outcome_y for r in reps], val_fraction, test_fraction, seed)
    return CohortDataset(reps, splits)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_cohort(dataset: CohortDataset, repertoire_path: str | Path, outcomes_path: str | Path) -> None:
    """Serialize a cohort to the repertoire TSV and outcomes CSV formats."""
    with open(repertoire_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["patient_id", "cdr3_aa", "weight", "compartment"])
        for rep in dataset.repertoires:
            for seq, wt in zip(rep.sequences, rep.weights):
                w.writerow([rep.patient_id, seq, _fmt(wt), "mature"])
            for seq in rep.preselection_sequences:
                w.writerow([rep.patient_id, seq, "0", "preselection"])
    with open(outcomes_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "y"])
        for rep in dataset.repertoires:
            w.writerow([rep.patient_id, _fmt(rep.outcome_y)])


def read_sequence_file(path: str | Path) -> list[str]:
    """One sequence per line; a header line ``sequence`` or ``cdr3_aa`` is skipped."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            s = line.strip().split("\t")[0].split(",")[0]
            if not s or (i == 0 and s in ("sequence", "cdr3_aa")):
                continue
            out.append(s)
    return out
