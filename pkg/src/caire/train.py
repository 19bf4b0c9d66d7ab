"""Stochastic MAP training, validation scoring and cross-validated ensembles."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndiff
from .models import CaireModel, ModelConfig, TokenBatch, canonical_variant
from .seqcore import CohortDataset, Repertoire, make_rng, outcome_strata, sample_indices

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "loss", "val_score", "component_accuracy", "component_r2")


@dataclass(frozen=True)
class TrainConfig:
    batch_patients: int = 8
    batch_seqs: int = 512  # per patient, half mature and half pre-selection
    lr: float = 0.01
    weight_decay: float = 0.01
    total_steps: int = 3000
    anneal_fraction: float = 0.6
    propensity_period: int = 10
    eval_period: int = 500
    val_fraction: float = 0.125
    seed: int = 0
    d_a: int = 8
    d_r: int = 4
    kernel: int = 5
    encoding: str = "onehot"
    precision: str = "float64"  # float32 is allowed for max-pooled conv stages; gradients and heads stay float64

    def __post_init__(self):
        if not 0 < self.anneal_fraction <= 1:
            raise ValueError("anneal_fraction must lie in (0, 1]")
        if self.propensity_period < 1 or self.eval_period < 1:
            raise ValueError("propensity_period and eval_period must be >= 1")
        if self.batch_seqs < 2 or self.batch_seqs % 2:
            raise ValueError("batch_seqs must be an even number >= 2")
        if self.batch_patients < 1 or self.total_steps < 1:
            raise ValueError("batch_patients and total_steps must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    def model_config(self, variant: str, l_max: int) -> ModelConfig:
        variant = canonical_variant(variant)
        if variant == "NonNeuralCAIRE":
            return ModelConfig(variant, d_a=4, d_r=4, kernel=3, l_max=l_max, encoding="blosum")
        return ModelConfig(variant, self.d_a, self.d_r, self.kernel, l_max, self.encoding)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in values.items():
            if k not in known:
                continue
            default = getattr(cls, k)
            out[k] = type(default)(v) if not isinstance(v, type(default)) else v
        return cls(**out)


def anneal_weight(step: int, cfg: TrainConfig) -> float:
    """Prior weight on (rho, beta): 0 at step 0, rising linearly to 1 at anneal_fraction * total_steps."""
    horizon = cfg.anneal_fraction * cfg.total_steps
    return 1.0 if step >= horizon else step / horizon


@dataclass
class PatientData:
    patient_id: str
    y: float
    mature: TokenBatch
    weights: np.ndarray
    pre: TokenBatch

    @property
    def m(self) -> int:
        return len(self.mature)


def prepare(reps: Sequence[Repertoire], l_max: int) -> list[PatientData]:
    out = []
    for r in reps:
        if not r.preselection_sequences:
            raise ValueError(f"patient {r.patient_id} has no pre-selection sequences")
        out.append(
            PatientData(
                r.patient_id,
                float(r.outcome_y),
                TokenBatch.from_sequences(r.sequences, l_max),
                np.asarray(r.weights),
                TokenBatch.from_sequences(r.preselection_sequences, l_max),
            )
        )
    return out


@dataclass
class FittedModel:
    model: CaireModel
    train_config: TrainConfig
    log: list[dict] = field(default_factory=list)
    best_score: float = -math.inf
    best_step: int = -1
    mean_embedding: np.ndarray | None = None
    train_ids: tuple[str, ...] = ()
    representations: dict[str, tuple[np.ndarray, float]] = field(default_factory=dict)
    attention_summary: dict[str, tuple[np.ndarray, float]] = field(default_factory=dict)

    @property
    def variant(self) -> str:
        return self.model.config.variant

    def write_log(self, path: str | Path) -> None:
        write_training_log(self.log, path)


def write_training_log(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow([row["step"]] + [_fmt(row[k]) for k in LOG_FIELDS[1:]])


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


# ---------------------------------------------------------------------------
# Per-patient full-repertoire quantities


def patient_embedding(model: CaireModel, pd: PatientData) -> np.ndarray:
    return model.pool(model.h_a(pd.mature), pd.weights)


def patient_representation(model: CaireModel, pd: PatientData):
    rep = model.encode_patient(pd.mature, pd.pre, pd.weights)
    return rep.rho, rep.beta


def r_squared(y: np.ndarray, pred: np.ndarray) -> float:
    """Coefficient of determination; 0 when the outcomes have zero variance."""
    y = np.asarray(y, dtype=np.float64)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 0.0
    return 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot


def classifier_accuracy(model: CaireModel, pd: PatientData, rho, beta) -> float:
    """Accuracy on a balanced mature/pre-selection draw, computed exactly over the full repertoires."""
    acc_m = float(pd.weights @ (model.h_r(pd.mature) @ rho + beta > 0))
    acc_z = float(np.mean(model.h_r(pd.pre) @ rho + beta <= 0))
    return 0.5 * (acc_m + acc_z)


def predict(model: CaireModel, patients: Sequence[PatientData]) -> np.ndarray:
    E = np.stack([patient_embedding(model, pd) for pd in patients])
    rho = None
    if model.config.has_fitness:
        rho = np.stack([patient_representation(model, pd)[0] for pd in patients])
    return model.outcome_mean(E, rho)


def validation_score(model: CaireModel, patients: Sequence[PatientData]) -> tuple[float, float, float]:
    """(score, accuracy, r2); variants without a fitness model score by R^2 alone."""
    if not patients:
        raise ValueError("validation split is empty")
    y = np.array([pd.y for pd in patients])
    E = np.stack([patient_embedding(model, pd) for pd in patients])
    if not model.config.has_fitness:
        r2 = r_squared(y, model.outcome_mean(E, None))
        return r2, float("nan"), r2
    reps = [patient_representation(model, pd) for pd in patients]
    rho = np.stack([r[0] for r in reps])
    r2 = r_squared(y, model.outcome_mean(E, rho))
    acc = float(np.mean([classifier_accuracy(model, pd, *r) for pd, r in zip(patients, reps)]))
    return acc + r2, acc, r2


# ---------------------------------------------------------------------------
# Training loop


def _minibatch(patients: Sequence[PatientData], idx, half: int, rng: np.random.Generator):
    mature, pre = [], []
    for i in idx:
        pd = patients[i]
        mature.append(pd.mature.take(sample_indices(pd.weights, half, rng)))
        pre.append(pd.pre.take(rng.integers(0, len(pd.pre), size=half)))
    return TokenBatch.concat(mature), TokenBatch.concat(pre)


def _param_diagnostics(model: CaireModel) -> str:
    parts = []
    for name, v in model.params.items():
        bad = int(np.sum(~np.isfinite(v)))
        finite = v[np.isfinite(v)]
        mx = float(np.max(np.abs(finite))) if finite.size else float("nan")
        parts.append(f"{name}: max|v|={mx:.3g} nonfinite={bad}")
    return "; ".join(parts)


class TrainSession:
    """One training run that can pause after any step and resume bit-identically."""

    def __init__(
        self,
        dataset: CohortDataset,
        variant: str,
        cfg: TrainConfig,
        rng: np.random.Generator | None = None,
        train_ids: Sequence[str] | None = None,
        val_ids: Sequence[str] | None = None,
    ):
        rng = rng if rng is not None else make_rng(cfg.seed)
        l_max = dataset.l_max
        train_reps = [dataset.by_id(i) for i in train_ids] if train_ids is not None else dataset.split("train")
        val_reps = [dataset.by_id(i) for i in val_ids] if val_ids is not None else dataset.split("validation")
        if not train_reps:
            raise ValueError("train split is empty")
        if not val_reps:
            raise ValueError("validation split is empty")
        self.cfg = cfg
        self.train_data = prepare(train_reps, l_max)
        self.val_data = prepare(val_reps, l_max)
        self.mcfg = cfg.model_config(variant, l_max)
        init_rng, self.rng = rng.spawn(2)
        self.model = CaireModel.initialize(self.mcfg, init_rng, np.dtype(cfg.precision))
        self.main_state = ndiff.AmsGradState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.prop_state = ndiff.AmsGradState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.step = 0
        self.fitted = FittedModel(
            self.model.copy(), cfg, train_ids=tuple(pd.patient_id for pd in self.train_data)
        )
        self.val_ids = tuple(pd.patient_id for pd in self.val_data)

    @property
    def done(self) -> bool:
        return self.step >= self.cfg.total_steps

    def run(self, until: int | None = None) -> "TrainSession":
        """Advance to step ``until`` (default: the full budget)."""
        cfg, mcfg, model = self.cfg, self.mcfg, self.model
        stop = cfg.total_steps if until is None else min(until, cfg.total_steps)
        tr = self.train_data
        n_train = len(tr)
        bp = min(cfg.batch_patients, n_train)
        half = cfg.batch_seqs // 2
        patient_scale = n_train / bp
        while self.step < stop:
            step = self.step
            idx = self.rng.choice(n_train, size=bp, replace=False)
            mature, pre = _minibatch(tr, idx, half, self.rng)
            y = np.array([tr[i].y for i in idx])
            seq_scale = np.array([2.0 * tr[i].m / cfg.batch_seqs for i in idx])
            loss, grads, aux = model.main_loss(
                mature, pre if mcfg.has_fitness else None, y, anneal_weight(step, cfg), patient_scale, seq_scale
            )
            if not math.isfinite(loss):
                raise ndiff.NonFiniteError(f"non-finite loss at step {step}: {_param_diagnostics(model)}")
            try:
                ndiff.amsgrad_step(model.params, grads, self.main_state)
                if mcfg.has_propensity and step % cfg.propensity_period == 0:
                    _, pgrads = model.propensity_loss(aux["E"], aux["rho"], patient_scale)
                    ndiff.amsgrad_step(model.params, pgrads, self.prop_state)
            except ndiff.NonFiniteError as exc:
                raise ndiff.NonFiniteError(f"step {step}: {exc}; {_param_diagnostics(model)}") from None
            self.step = step + 1
            if self.step % cfg.eval_period == 0 or self.step == cfg.total_steps:
                self._evaluate(loss)
        return self

    def _evaluate(self, loss: float) -> None:
        score, acc, r2 = validation_score(self.model, self.val_data)
        f = self.fitted
        f.log.append({"step": self.step, "loss": loss, "val_score": score, "component_accuracy": acc, "component_r2": r2})
        log.debug("step %d loss %.4g score %.4f", self.step, loss, score)
        if score > f.best_score:
            f.best_score, f.best_step = score, self.step
            f.model = self.model.copy()

    def finish(self) -> FittedModel:
        if not self.done:
            self.run()
        summarize(self.fitted, self.train_data)
        return self.fitted

    # -- persistence -----------------------------------------------------
    def save(self, path: str | Path) -> None:
        store = ndiff.ParamStore()
        for name, v in self.model.params.items():
            store[f"cur/{name}"] = v
        for name, v in self.fitted.model.params.items():
            store[f"best/{name}"] = v
        for tag, st in (("main", self.main_state), ("prop", self.prop_state)):
            for name in st.m:
                store[f"{tag}.m/{name}"] = st.m[name]
                store[f"{tag}.v/{name}"] = st.v[name]
                store[f"{tag}.vhat/{name}"] = st.v_hat[name]
        meta = {
            "kind": "train_session",
            "variant": self.mcfg.variant,
            "train_config": asdict(self.cfg),
            "model_config": self.mcfg.to_dict(),
            "step": self.step,
            "opt_t": {"main": self.main_state.t, "prop": self.prop_state.t},
            "rng_state": _jsonable(self.rng.bit_generator.state),
            "best_score": _json_float(self.fitted.best_score),
            "best_step": self.fitted.best_step,
            "log": [{k: _json_float(v) for k, v in row.items()} for row in self.fitted.log],
            "train_ids": list(self.fitted.train_ids),
            "val_ids": list(self.val_ids),
        }
        ndiff.save_checkpoint(path, store, meta)

    @classmethod
    def load(cls, path: str | Path, dataset: CohortDataset) -> "TrainSession":
        store, meta = ndiff.load_checkpoint(path)
        if meta.get("kind") != "train_session":
            raise ValueError(f"{path} is not a resumable training checkpoint")
        cfg = TrainConfig(**meta["train_config"])
        sess = cls(dataset, meta["variant"], cfg, make_rng(0), meta["train_ids"], meta["val_ids"])
        if sess.mcfg.to_dict() != meta["model_config"]:
            raise ValueError("checkpoint model configuration does not match the cohort")
        for name in sess.model.params.names():
            sess.model.params[name] = store[f"cur/{name}"]
            sess.fitted.model.params[name] = store[f"best/{name}"]
        for tag, st in (("main", sess.main_state), ("prop", sess.prop_state)):
            st.t = int(meta["opt_t"][tag])
            for key in store.names():
                if key.startswith(f"{tag}.m/"):
                    name = key.split("/", 1)[1]
                    st.m[name] = store[key]
                    st.v[name] = store[f"{tag}.v/{name}"]
                    st.v_hat[name] = store[f"{tag}.vhat/{name}"]
        sess.rng.bit_generator.state = _from_jsonable(meta["rng_state"])
        sess.step = int(meta["step"])
        sess.fitted.best_score = _from_json_float(meta["best_score"])
        sess.fitted.best_step = int(meta["best_step"])
        sess.fitted.log = [{k: _from_json_float(v) for k, v in row.items()} for row in meta["log"]]
        return sess


def _json_float(x):
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    return None if math.isnan(x) else ("-inf" if x == -math.inf else ("inf" if x == math.inf else x))


def _from_json_float(x):
    if x is None:
        return float("nan")
    if isinstance(x, str):
        return float(x)
    return x


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def train(
    dataset: CohortDataset,
    variant: str,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    train_ids: Sequence[str] | None = None,
    val_ids: Sequence[str] | None = None,
) -> FittedModel:
    """Fits one model on the train split (or ``train_ids``), early-stopping on the validation split."""
    return TrainSession(dataset, variant, cfg, rng, train_ids, val_ids).finish()


def summarize(fitted: FittedModel, patients: Sequence[PatientData]) -> None:
    """Caches the training-fold mean embedding, attention summaries and per-patient (rho, beta)."""
    model = fitted.model
    embeddings = []
    fitted.attention_summary = {}
    for pd in patients:
        h = model.h_a(pd.mature)
        if model.config.attention:
            s, _ = model.attention_scores(h)
            shift = s.max()
            a = pd.weights * np.exp(s - shift)
            denom = a.sum()
            weighted = (a @ h) / denom
            fitted.attention_summary[pd.patient_id] = (weighted, float(np.log(denom) + shift))
            embeddings.append(weighted)
        else:
            embeddings.append(pd.weights @ h)
    fitted.mean_embedding = np.mean(embeddings, axis=0)
    fitted.representations = {}
    if model.config.has_fitness:
        for pd in patients:
            fitted.representations[pd.patient_id] = patient_representation(model, pd)


def model_manifest(model: CaireModel) -> dict:
    c = model.config
    return {
        "variant": c.variant,
        "d_a": c.d_a,
        "d_r": c.d_r,
        "kernel": c.kernel,
        "l_max": c.l_max,
        "encoding": c.encoding,
        "precision": model.compute_dtype.name,
        "params": model.params.names(),
    }


def save_fitted(path: str | Path, fitted: FittedModel, extra: dict | None = None) -> None:
    """Self-describing checkpoint: best parameters, cohort summary and training log."""
    store = ndiff.ParamStore()
    for name, v in fitted.model.params.items():
        store[f"param/{name}"] = v
    store["summary/mean_embedding"] = fitted.mean_embedding
    ids = list(fitted.train_ids)
    if fitted.attention_summary:
        store["summary/patient_means"] = np.stack([fitted.attention_summary[i][0] for i in ids])
        store["summary/log_norms"] = np.array([fitted.attention_summary[i][1] for i in ids])
    if fitted.representations:
        store["summary/rho"] = np.stack([fitted.representations[i][0] for i in ids])
        store["summary/beta"] = np.array([fitted.representations[i][1] for i in ids])
    meta = {
        "kind": "fitted_model",
        "manifest": model_manifest(fitted.model),
        "model_config": fitted.model.config.to_dict(),
        "train_config": asdict(fitted.train_config),
        "best_score": _json_float(fitted.best_score),
        "best_step": fitted.best_step,
        "log": [{k: _json_float(v) for k, v in row.items()} for row in fitted.log],
        "train_ids": ids,
    }
    if extra:
        meta["extra"] = extra
    ndiff.save_checkpoint(path, store, meta)


def load_fitted(path: str | Path) -> FittedModel:
    store, meta = ndiff.load_checkpoint(path)
    if meta.get("kind") != "fitted_model":
        raise ValueError(f"{path} is not a fitted-model checkpoint")
    mcfg = ModelConfig(**meta["model_config"])
    params = ndiff.ParamStore({k.split("/", 1)[1]: v for k, v in store.items() if k.startswith("param/")})
    model = CaireModel(mcfg, params, np.dtype(meta["manifest"]["precision"]))
    ids = tuple(meta["train_ids"])
    fitted = FittedModel(
        model,
        TrainConfig(**meta["train_config"]),
        log=[{k: _from_json_float(v) for k, v in row.items()} for row in meta["log"]],
        best_score=_from_json_float(meta["best_score"]),
        best_step=int(meta["best_step"]),
        mean_embedding=store["summary/mean_embedding"],
        train_ids=ids,
    )
    if "summary/patient_means" in store:
        means, norms = store["summary/patient_means"], store["summary/log_norms"]
        fitted.attention_summary = {pid: (means[i], float(norms[i])) for i, pid in enumerate(ids)}
    if "summary/rho" in store:
        rho, beta = store["summary/rho"], store["summary/beta"]
        fitted.representations = {pid: (rho[i], float(beta[i])) for i, pid in enumerate(ids)}
    return fitted


# ---------------------------------------------------------------------------
# Ensembles


def stratified_folds(
    patient_ids: Sequence[str], y: Sequence[float], folds: int, rng: np.random.Generator
) -> np.ndarray:
    """Fold index per patient, balanced within outcome strata (3 quantile bins)."""
    y = np.asarray(y, dtype=np.float64)
    strata = outcome_strata(y, 3)
    labels = np.unique(strata)
    sizes = {s: int(np.sum(strata == s)) for s in labels}
    if any(v < folds for v in sizes.values()):
        warnings.warn("outcome stratum smaller than the fold count; merging strata", stacklevel=2)
        strata = np.zeros(len(y), dtype=int)
        if len(y) < folds:
            raise ValueError(f"{len(y)} patients cannot fill {folds} folds")
    out = np.empty(len(y), dtype=int)
    offset = 0
    for s in np.unique(strata):
        members = np.flatnonzero(strata == s)
        members = members[rng.permutation(len(members))]
        out[members] = (np.arange(len(members)) + offset) % folds
        offset += len(members)
    return out


def ensemble_plan(dataset: CohortDataset, folds: int, repeats: int, seed: int):
    """List of (repeat, fold, train_ids, heldout_ids) over the non-test patients."""
    pool = [r for r in dataset.repertoires if dataset.split_assignment.get(r.patient_id, "train") != "test"]
    ids = [r.patient_id for r in pool]
    y = [r.outcome_y for r in pool]
    plan = []
    fold_rng = make_rng(np.random.SeedSequence([seed, 1]))
    for rep in range(repeats):
        assign = stratified_folds(ids, y, folds, fold_rng)
        for f in range(folds):
            held = [i for i, a in zip(ids, assign) if a == f]
            kept = [i for i, a in zip(ids, assign) if a != f]
            plan.append((rep, f, kept, held))
    return plan


def train_ensemble(
    dataset: CohortDataset, variant: str, cfg: TrainConfig, folds: int = 8, repeats: int = 3
) -> list[FittedModel]:
    """folds x repeats models, each validated (early-stopped) on its held-out fold."""
    plan = ensemble_plan(dataset, folds, repeats, cfg.seed)
    seeds = np.random.SeedSequence([cfg.seed, 2]).spawn(len(plan))
    models = []
    for (rep, f, kept, held), ss in zip(plan, seeds):
        models.append(train(dataset, variant, cfg, make_rng(ss), train_ids=kept, val_ids=held))
    return models
