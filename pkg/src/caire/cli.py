"""Command-line pipeline: simulate -> train -> estimate -> evaluate -> report.

Every command reads a flat ``key = value`` config file plus flag overrides, and writes
``config.txt`` (values with their provenance) and ``manifest.json`` (config, seed,
input and output digests) into its output directory.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .effects import ate_batch, estimate_rows, write_effects_csv
from .evalkit import MetricRow, per_patient_motif_prauc, permutation_ttest, pr_auc, read_metrics_csv
from .evalkit import roc_auc_unlabeled, write_metrics_csv
from .ndiff import NonFiniteError
from .seqcore import CohortDataset, CohortParseError, SequenceError, load_cohort, make_rng, read_sequence_file
from .seqcore import write_cohort
from .simsynth import SimConfig, corpus_sampler, detect_motif, load_corpus, read_ground_truth
from .simsynth import simulate_cohort, write_ground_truth
from .train import TrainConfig, TrainSession, ensemble_plan, load_fitted, save_fitted
from .train import write_training_log

log = logging.getLogger("caire")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2

REPERTOIRE_FILE = "repertoires.tsv"
OUTCOME_FILE = "outcomes.csv"
SPLIT_FILE = "splits.csv"
TRUTH_FILE = "truth.csv"
MOTIF_FILE = "motifs.json"


class ConfigError(ValueError):
    """Bad or missing configuration; reported with the usage exit code."""


# ---------------------------------------------------------------------------
# Configuration


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_pair(text) -> tuple[float, float]:
    if isinstance(text, tuple):
        return text
    parts = [p for p in str(text).replace(" ", "").split(",") if p]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _parse_optional_int(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return int(text)


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    default: object
    help: str


def _dataclass_keys(cls, skip=()) -> list[Key]:
    out = []
    for f in fields(cls):
        if f.name in skip:
            continue
        default = f.default
        if f.name == "m_pool":
            parse = _parse_optional_int
        elif f.name == "fitness_coeffs":
            parse = _parse_pair
        else:
            parse = type(default)
        out.append(Key(f.name, parse, default, f"{cls.__name__}.{f.name}"))
    return out


KEYS: dict[str, Key] = {}
for _k in (
    _dataclass_keys(SimConfig)
    + _dataclass_keys(TrainConfig, skip=("seed", "val_fraction"))
    + [
        Key("variant", str, "CAIRE", "model variant"),
        Key("ensemble", _parse_bool, False, "train folds x repeats cross-validated models"),
        Key("folds", int, 8, "ensemble folds"),
        Key("repeats", int, 3, "ensemble repeats"),
        Key("stop_after", _parse_optional_int, None, "pause single-model training after this step"),
        Key("corpus", str, "", "seed corpus file for the base sampler (empty: synthetic sampler)"),
        Key("epsilon", float, 0.1, "dosage fraction for effect estimates"),
        Key("eval_epsilon", float, 0.01, "dosage fraction for motif-recovery evaluation"),
        Key("mode", str, "simulated", "evaluation mode: simulated | generic"),
        Key("n_perm", int, 10000, "permutations for the t-test"),
        Key("hist_bins", int, 30, "histogram bins in reports"),
    ]
):
    KEYS[_k.name] = _k


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)

    @classmethod
    def build(cls, config_path: str | None, overrides: dict) -> "PipelineConfig":
        cfg = cls({k.name: k.default for k in KEYS.values()}, {k: "default" for k in KEYS})
        if config_path:
            for key, raw in read_config_file(config_path).items():
                cfg.set(key, raw, "file")
        for key, raw in overrides.items():
            if raw is not None:
                cfg.set(key, raw, "flag")
        return cfg

    def set(self, key: str, raw, source: str) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = KEYS[key].parse(raw) if isinstance(raw, str) or key == "fitness_coeffs" else raw
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
        self.values[key] = value
        self.sources[key] = source

    def __getitem__(self, key):
        return self.values[key]

    def sim_config(self) -> SimConfig:
        kw = {f.name: self.values[f.name] for f in fields(SimConfig)}
        try:
            return SimConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        kw = {f.name: self.values[f.name] for f in fields(TrainConfig)}
        try:
            return TrainConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def as_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            lines.append(f"{key} = {_fmt_value(self.values[key])}  # {self.sources[key]}")
        return "\n".join(lines) + "\n"

    def as_dict(self) -> dict:
        return {k: {"value": _json_value(self.values[k]), "source": self.sources[k]} for k in sorted(self.values)}


def _fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _json_value(v):
    return list(v) if isinstance(v, tuple) else v


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


# ---------------------------------------------------------------------------
# Manifests and file helpers


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_outputs_manifest(out_dir: Path, command: str, cfg: PipelineConfig, inputs: Sequence[Path], argv) -> None:
    (out_dir / "config.txt").write_text(cfg.as_text(), encoding="utf-8")
    outputs = sorted(
        p.relative_to(out_dir).as_posix() for p in out_dir.rglob("*") if p.is_file() and p.name != "manifest.json"
    )
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": cfg["seed"],
        "config": cfg.as_dict(),
        "inputs": {str(p): sha256_file(p) for p in sorted(set(inputs), key=str)},
        "outputs": {name: sha256_file(out_dir / name) for name in outputs},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"missing {what}: {path}")
    return path


def load_cohort_dir(cohort_dir: Path, cfg: PipelineConfig) -> tuple[CohortDataset, list[Path]]:
    rep = _require_file(cohort_dir / REPERTOIRE_FILE, "repertoire file")
    out = _require_file(cohort_dir / OUTCOME_FILE, "outcome file")
    ds = load_cohort(rep, out, cfg["val_fraction"], cfg["test_fraction"], cfg["seed"])
    inputs = [rep, out]
    split_path = cohort_dir / SPLIT_FILE
    if split_path.is_file():
        with open(split_path, newline="", encoding="utf-8") as fh:
            assignment = {row["patient_id"]: row["split"] for row in csv.DictReader(fh)}
        ds = ds.with_splits(assignment)
        inputs.append(split_path)
    return ds, inputs


def write_splits(ds: CohortDataset, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "split"])
        for r in ds.repertoires:
            w.writerow([r.patient_id, ds.split_assignment[r.patient_id]])


def load_model_dir(path: Path) -> tuple[list, list[Path]]:
    if path.is_file():
        files = [path]
    else:
        files = sorted(p for p in path.glob("*.ckpt") if p.name != "session.ckpt")
    if not files:
        raise ConfigError(f"no model checkpoints in {path}")
    return [load_fitted(p) for p in files], files


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(cfg: PipelineConfig, out_dir: Path) -> list[Path]:
    sim = cfg.sim_config()
    inputs = []
    sampler = None
    if cfg["corpus"]:
        corpus_path = _require_file(Path(cfg["corpus"]), "corpus file")
        sampler = corpus_sampler(load_corpus(corpus_path))
        inputs.append(corpus_path)
    ds, truth = simulate_cohort(sim, sampler)
    write_cohort(ds, out_dir / REPERTOIRE_FILE, out_dir / OUTCOME_FILE)
    write_splits(ds, out_dir / SPLIT_FILE)
    write_ground_truth(truth, out_dir / TRUTH_FILE, out_dir / MOTIF_FILE)
    log.info("simulated %d patients into %s", len(ds.repertoires), out_dir)
    return inputs


def cmd_train(cfg: PipelineConfig, out_dir: Path, cohort_dir: Path, resume: Path | None) -> list[Path]:
    ds, inputs = load_cohort_dir(cohort_dir, cfg)
    tcfg = cfg.train_config()
    variant = cfg["variant"]
    if cfg["ensemble"]:
        if resume is not None or cfg["stop_after"] is not None:
            raise ConfigError("pause/resume is supported for single-model training only")
        plan = ensemble_plan(ds, cfg["folds"], cfg["repeats"], tcfg.seed)
        seeds = np.random.SeedSequence([tcfg.seed, 2]).spawn(len(plan))
        for (rep, fold, kept, held), ss in zip(plan, seeds):
            fitted = TrainSession(ds, variant, tcfg, make_rng(ss), kept, held).finish()
            tag = f"r{rep}_f{fold}"
            save_fitted(out_dir / f"model_{tag}.ckpt", fitted, {"repeat": rep, "fold": fold, "heldout_ids": held})
            write_training_log(fitted.log, out_dir / f"train_log_{tag}.csv")
            log.info("model %s best score %.4f at step %d", tag, fitted.best_score, fitted.best_step)
        return inputs
    if resume is not None:
        sess = TrainSession.load(_require_file(resume, "resume checkpoint"), ds)
        inputs.append(resume)
    else:
        sess = TrainSession(ds, variant, tcfg)
    if cfg["stop_after"] is not None and cfg["stop_after"] < tcfg.total_steps:
        sess.run(until=cfg["stop_after"])
        sess.save(out_dir / "session.ckpt")
        write_training_log(sess.fitted.log, out_dir / "train_log.csv")
        log.info("paused at step %d", sess.step)
        return inputs
    fitted = sess.finish()
    save_fitted(out_dir / "model.ckpt", fitted)
    write_training_log(fitted.log, out_dir / "train_log.csv")
    log.info("best score %.4f at step %d", fitted.best_score, fitted.best_step)
    return inputs


def cmd_estimate(cfg: PipelineConfig, out_dir: Path, model_dir: Path, sequences: Path) -> tuple[list[Path], int]:
    models, files = load_model_dir(model_dir)
    seqs = read_sequence_file(_require_file(sequences, "sequence file"))
    rows = estimate_rows(models, seqs, cfg["epsilon"]) if seqs else []
    write_effects_csv(rows, out_dir / "effects.csv", extra_fields=("error",))
    n_fail = sum(1 for r in rows if r.get("error"))
    if rows and n_fail == len(rows):
        log.error("no input sequence could be scored")
        return files + [sequences], EXIT_DOMAIN
    return files + [sequences], EXIT_OK


def _method_labels(model_dirs: Sequence[Path], groups: Sequence[list]) -> list[str]:
    variants = [g[0].variant for g in groups]
    labels = []
    for d, v in zip(model_dirs, variants):
        labels.append(v if variants.count(v) == 1 else f"{v}@{d.name}")
    return labels


def cmd_evaluate(
    cfg: PipelineConfig,
    out_dir: Path,
    model_dirs: Sequence[Path],
    cohort_dir: Path | None,
    truth_dir: Path | None,
    binders: Path | None,
    unlabeled: Path | None,
) -> list[Path]:
    if not model_dirs:
        raise ConfigError("evaluate needs at least one --models directory")
    groups, inputs = [], []
    for d in model_dirs:
        models, files = load_model_dir(d)
        groups.append(models)
        inputs += files
    labels = _method_labels(model_dirs, groups)
    rows: list[MetricRow] = []
    score_rows: list[tuple] = []
    mode = cfg["mode"]
    if mode == "simulated":
        if cohort_dir is None:
            raise ConfigError("simulated mode needs --cohort")
        tdir = truth_dir or cohort_dir
        if not (tdir / TRUTH_FILE).is_file() or not (tdir / MOTIF_FILE).is_file():
            raise ConfigError(f"simulated mode needs ground truth ({TRUTH_FILE}, {MOTIF_FILE}) in {tdir}")
        truth = read_ground_truth(tdir / TRUTH_FILE, tdir / MOTIF_FILE)
        inputs += [tdir / TRUTH_FILE, tdir / MOTIF_FILE]
        ds, cohort_inputs = load_cohort_dir(cohort_dir, cfg)
        inputs += cohort_inputs
        heldout = ds.split("test")
        per_method = {}
        for label, models in zip(labels, groups):
            recorded = {}

            def scorer(seqs, models=models, recorded=recorded):
                s = np.mean([ate_batch(m, seqs, cfg["eval_epsilon"]) for m in models], axis=0)
                recorded[tuple(seqs)] = s
                return s

            mean, values = per_patient_motif_prauc(models, heldout, truth, cfg["eval_epsilon"], scorer=scorer)
            per_method[label] = values
            rows.append(MetricRow(f"prauc/{label}", mean, _sem(values), len(values)))
            rocs = []
            for rep in heldout:
                s = recorded.get(tuple(rep.sequences))
                if s is None:
                    continue
                lab = np.array([detect_motif(x, truth.kappa_cau) for x in rep.sequences])
                rocs.append(roc_auc_unlabeled(s[lab == 1], s[lab == 0])[0])
                score_rows += [(label, rep.patient_id, x, float(v), int(l)) for x, v, l in zip(rep.sequences, s, lab)]
            rows.append(MetricRow(f"rocauc/{label}", float(np.mean(rocs)), _sem(rocs), len(rocs)))
        rng = make_rng(cfg["seed"])
        for i in range(len(labels)):
            for j in range(i + 1, len(labels)):
                a, b = per_method[labels[i]], per_method[labels[j]]
                if len(a) >= 2 and len(b) >= 2:
                    p = permutation_ttest(a, b, cfg["n_perm"], rng)
                    rows.append(MetricRow(f"perm_ttest_p/{labels[i]}_vs_{labels[j]}", p, float("nan"), cfg["n_perm"]))
    elif mode == "generic":
        if binders is None or unlabeled is None:
            raise ConfigError("generic mode needs --binders and --unlabeled sequence files")
        pos_seqs = read_sequence_file(_require_file(binders, "binder file"))
        unl_seqs = read_sequence_file(_require_file(unlabeled, "unlabeled file"))
        inputs += [binders, unlabeled]
        for label, models in zip(labels, groups):
            sp = np.mean([ate_batch(m, pos_seqs, cfg["epsilon"]) for m in models], axis=0)
            su = np.mean([ate_batch(m, unl_seqs, cfg["epsilon"]) for m in models], axis=0)
            auc, se = roc_auc_unlabeled(sp, su)
            rows.append(MetricRow(f"rocauc_unlabeled/{label}", auc, se, min(len(sp), len(su))))
            scores = np.concatenate([sp, su])
            lab = np.r_[np.ones(len(sp)), np.zeros(len(su))]
            rows.append(MetricRow(f"prauc_unlabeled/{label}", pr_auc(scores, lab), float("nan"), len(scores)))
            score_rows += [(label, "binders", x, float(v), 1) for x, v in zip(pos_seqs, sp)]
            score_rows += [(label, "unlabeled", x, float(v), 0) for x, v in zip(unl_seqs, su)]
    else:
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    write_metrics_csv(rows, out_dir / "metrics.csv")
    write_scores_csv(score_rows, out_dir / "scores.csv")
    render_report(out_dir / "metrics.csv", out_dir / "scores.csv", out_dir / "report", cfg["hist_bins"])
    return inputs


def _sem(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else float("nan")


# ---------------------------------------------------------------------------
# Reports


SCORE_FIELDS = ("method", "group", "sequence", "score", "label")


def write_scores_csv(rows, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_FIELDS)
        for method, group, seq, score, label in rows:
            w.writerow([method, group, seq, repr(float(score)), label])


def read_scores_csv(path: Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    data: dict[str, tuple[list, list]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            s, l = data.setdefault(row["method"], ([], []))
            s.append(float(row["score"]))
            l.append(int(row["label"]))
    return {k: (np.array(v[0]), np.array(v[1])) for k, v in data.items()}


def _safe_name(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in label)


def histogram_rows(scores: np.ndarray, labels: np.ndarray, bins: int):
    lo, hi = (float(scores.min()), float(scores.max())) if len(scores) else (0.0, 1.0)
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    pos, _ = np.histogram(scores[labels == 1], edges)
    neg, _ = np.histogram(scores[labels == 0], edges)
    return edges, pos, neg


def _svg_bars(title: str, names: Sequence[str], series: Sequence[Sequence[float]], colors: Sequence[str], ymax=None) -> str:
    width, height, margin = 640, 360, 40
    n = len(names)
    top = ymax if ymax is not None else max([max(s) for s in series if len(s)] + [1e-12])
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    slot = plot_w / max(n, 1)
    bar_w = slot / (len(series) + 0.5)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{_esc(title)}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{margin - 4}" y="{margin + 4}" text-anchor="end" font-family="sans-serif" font-size="10">{top:.3g}</text>',
    ]
    for i in range(n):
        for j, s in enumerate(series):
            v = s[i]
            h = 0.0 if top <= 0 else plot_h * max(v, 0.0) / top
            x = margin + i * slot + j * bar_w + bar_w * 0.25
            y = height - margin - h
            parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w:.2f}" height="{h:.2f}" fill="{colors[j]}"/>')
    step = max(1, n // 6)
    for i in range(0, n, step):
        x = margin + (i + 0.5) * slot
        parts.append(
            f'<text x="{x:.2f}" y="{height - margin + 14}" text-anchor="middle" font-family="sans-serif" font-size="10">{_esc(names[i])}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_report(metrics_csv: Path, scores_csv: Path | None, out_dir: Path, bins: int = 30) -> None:
    """Histogram CSVs and static SVGs; output depends only on the input CSVs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = read_metrics_csv(metrics_csv)
    auc_rows = [m for m in metrics if m.metric.startswith(("prauc", "rocauc"))]
    if auc_rows:
        svg = _svg_bars("metrics", [m.metric for m in auc_rows], [[m.value for m in auc_rows]], ["#4477aa"], ymax=1.0)
        (out_dir / "metrics.svg").write_text(svg, encoding="utf-8")
    if scores_csv is None or not Path(scores_csv).is_file():
        return
    for method, (scores, labels) in sorted(read_scores_csv(Path(scores_csv)).items()):
        edges, pos, neg = histogram_rows(scores, labels, bins)
        name = _safe_name(method)
        with open(out_dir / f"hist_{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_lo", "bin_hi", "count_label1", "count_label0"])
            for i in range(len(pos)):
                w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(pos[i]), int(neg[i])])
        # label-0 counts dwarf label-1 counts; plot each as a share of its own group
        fp = pos / max(pos.sum(), 1)
        fn = neg / max(neg.sum(), 1)
        centers = [f"{(edges[i] + edges[i + 1]) / 2:.3g}" for i in range(len(pos))]
        svg = _svg_bars(f"effect distribution: {method}", centers, [fn.tolist(), fp.tolist()], ["#bbbbbb", "#cc3311"])
        (out_dir / f"hist_{name}.svg").write_text(svg, encoding="utf-8")


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="caire", description="Causal repertoire effect estimation pipeline")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", required=True, help="output directory")
        for key in KEYS.values():
            p.add_argument(f"--{key.name}", dest=f"cfg_{key.name}", default=None, metavar="V", help=key.help)

    p = sub.add_parser("simulate", help="generate a semisynthetic cohort with ground truth")
    add_common(p)
    p = sub.add_parser("train", help="fit a model or a cross-validated ensemble")
    add_common(p)
    p.add_argument("--cohort", required=True, type=Path)
    p.add_argument("--resume", type=Path, help="resumable session checkpoint written with --stop_after")
    p = sub.add_parser("estimate", help="score sequences by their average treatment effect")
    add_common(p)
    p.add_argument("--models", required=True, type=Path)
    p.add_argument("--sequences", required=True, type=Path)
    p = sub.add_parser("evaluate", help="metrics, tests and a report for one or more model sets")
    add_common(p)
    p.add_argument("--models", action="append", type=Path, default=[])
    p.add_argument("--cohort", type=Path)
    p.add_argument("--truth", type=Path, help="directory with truth.csv and motifs.json (default: cohort)")
    p.add_argument("--binders", type=Path)
    p.add_argument("--unlabeled", type=Path)
    p = sub.add_parser("report", help="re-render a report from metrics and score CSVs")
    add_common(p)
    p.add_argument("--metrics", required=True, type=Path)
    p.add_argument("--scores", type=Path)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    out_dir = Path(args.out)
    try:
        cfg = PipelineConfig.build(args.config, overrides)
        inputs = [Path(args.config)] if args.config else []
        out_dir.mkdir(parents=True, exist_ok=True)
        code = EXIT_OK
        if args.command == "simulate":
            inputs += cmd_simulate(cfg, out_dir)
        elif args.command == "train":
            inputs += cmd_train(cfg, out_dir, args.cohort, args.resume)
        elif args.command == "estimate":
            more, code = cmd_estimate(cfg, out_dir, args.models, args.sequences)
            inputs += more
        elif args.command == "evaluate":
            inputs += cmd_evaluate(cfg, out_dir, args.models, args.cohort, args.truth, args.binders, args.unlabeled)
        elif args.command == "report":
            render_report(_require_file(args.metrics, "metrics CSV"), args.scores, out_dir, cfg["hist_bins"])
            inputs += [args.metrics] + ([args.scores] if args.scores else [])
        write_outputs_manifest(out_dir, args.command, cfg, inputs, argv)
        return code
    except ConfigError as exc:
        print(f"caire: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, NonFiniteError, CohortParseError, SequenceError, KeyError) as exc:
        print(f"caire: error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
