import itertools
import math

import numpy as np
import pytest

from caire import ndiff
from caire.models import BETA_PRIOR, PROPENSITY_PARAMS, RHO_PRIOR, CaireModel, ModelConfig, TokenBatch
from caire.models import classifier_loglik, outcome_loglik
from caire.seqcore import CohortDataset, Repertoire, make_rng
from caire.train import (
    LOG_FIELDS,
    TrainConfig,
    TrainSession,
    anneal_weight,
    ensemble_plan,
    load_fitted,
    prepare,
    r_squared,
    save_fitted,
    stratified_folds,
    train,
    train_ensemble,
    validation_score,
    write_training_log,
)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(anneal_fraction=0.0)
    with pytest.raises(ValueError):
        TrainConfig(propensity_period=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_seqs=3)
    assert TrainConfig().precision == "float64"


@pytest.mark.parametrize("total,frac", [(3000, 0.6), (10, 1.0), (7, 0.3)])
def test_anneal_weight_pointwise(total, frac):
    cfg = TrainConfig(total_steps=total, anneal_fraction=frac)
    horizon = frac * total
    assert anneal_weight(0, cfg) == 0.0
    for step in range(total + 5):
        expected = 1.0 if step >= horizon else step / horizon
        assert anneal_weight(step, cfg) == expected
        if step >= horizon:
            assert anneal_weight(step, cfg) == 1.0


def test_r_squared():
    y = np.array([1.0, 2.0, 4.0])
    assert r_squared(y, y) == 1.0
    assert r_squared(y, np.full(3, y.mean())) == 0.0
    assert r_squared(np.array([2.0]), np.array([5.0])) == 0.0
    assert r_squared(np.full(3, 1.5), np.zeros(3)) == 0.0


def _loss_scaling_setup():
    # encoder and outcome do not depend on the sampled sequences, so the only
    # source of minibatch randomness is the classifier term being scaled
    l_max = 8
    reps = [
        Repertoire("a", ("CAS", "CWY"), np.array([0.3, 0.7]), 0.4, ("CAT", "WWK")),
        Repertoire("b", ("KLM", "CAS", "PQR"), np.array([0.2, 0.5, 0.3]), -0.2, ("DEF",)),
        Repertoire("c", ("WW",), np.array([1.0]), 1.1, ("ACD", "EFG", "HIK")),
        Repertoire("d", ("YYY", "GAG"), np.array([0.6, 0.4]), 0.0, ("MNP", "QRS")),
    ]
    cfg = ModelConfig("CAIRE", l_max=l_max)
    model = CaireModel.initialize(cfg, np.random.default_rng(3))
    model.params["enc0.W"] = np.zeros_like(model.params["enc0.W"])
    model.params["enc2.b"] = np.array([0.8, -0.4, 0.3, 0.5, -0.2])
    model.params["gamma_r"] = np.array([0.2, -0.1, 0.4, 0.3])
    model.params["gamma_y"] = np.array(0.1)
    model.params["W"] = np.ones_like(model.params["W"]) * 0.05
    return reps, model, l_max


def test_loss_scaling_by_exhaustive_enumeration():
    reps, model, l_max = _loss_scaling_setup()
    pds = prepare(reps, l_max)
    n, bp, batch_seqs, xi = 4, 2, 2, 0.7
    half = batch_seqs // 2

    expected = 0.0
    subsets = list(itertools.combinations(range(n), bp))
    for subset in subsets:
        choices = [
            [(j, k, pds[i].weights[j] / len(pds[i].pre)) for j in range(pds[i].m) for k in range(len(pds[i].pre))]
            for i in subset
        ]
        for combo in itertools.product(*choices):
            prob = np.prod([c[2] for c in combo]) / len(subsets)
            mature = TokenBatch.concat([pds[i].mature.take(np.array([c[0]] * half)) for i, c in zip(subset, combo)])
            pre = TokenBatch.concat([pds[i].pre.take(np.array([c[1]] * half)) for i, c in zip(subset, combo)])
            y = np.array([pds[i].y for i in subset])
            seq_scale = np.array([2.0 * pds[i].m / batch_seqs for i in subset])
            loss, _, _ = model.main_loss(mature, pre, y, xi, n / bp, seq_scale)
            expected += prob * loss

    # full-data objective: each patient contributes m_i weighted mature terms and m_i pre-selection terms
    full = 0.0
    for pd in pds:
        rep = model.encode_patient(pd.mature, pd.pre)
        ll1 = classifier_loglik(model, pd.mature, np.ones(pd.m), rep)
        ll0 = classifier_loglik(model, pd.pre, np.zeros(len(pd.pre)), rep)
        full += pd.m * (pd.weights @ ll1 + ll0.mean())
        E = model.pool(model.h_a(pd.mature), pd.weights)
        full += float(outcome_loglik(model, pd.y, E[None], rep.rho[None])[0])
        full += xi * float(np.sum(ndiff.normal_logprior(rep.rho, RHO_PRIOR.loc, RHO_PRIOR.scale)))
        full += xi * float(ndiff.normal_logprior(rep.beta, BETA_PRIOR.loc, BETA_PRIOR.scale))
    full += model.params.log_prior(["gamma_a", "gamma_r", "gamma_y", "log_tau_y"])
    assert expected == pytest.approx(-full, rel=1e-12)


def _session(dataset, variant, cfg, **kw):
    return TrainSession(dataset, variant, cfg, **kw)


def test_propensity_and_main_steps_touch_disjoint_params(tiny_cohort, tiny_train_config):
    ds, _ = tiny_cohort
    cfg = TrainConfig(**{**tiny_train_config.__dict__, "propensity_period": 1000, "total_steps": 6})
    sess = _session(ds, "CAIRE", cfg)
    before = sess.model.params.copy()
    sess.run(until=1)  # step 0 runs both updates
    after_first = sess.model.params.copy()
    for name in PROPENSITY_PARAMS:
        assert not np.array_equal(before[name], after_first[name]), name
    sess.run(until=6)  # main steps only
    for name in sess.model.params.names():
        same = np.array_equal(after_first[name], sess.model.params[name])
        assert same == (name in PROPENSITY_PARAMS), name

    mature = ds.repertoires[0]
    _, grads, aux = sess.model.main_loss(
        TokenBatch.from_sequences(mature.sequences[:4], ds.l_max),
        TokenBatch.from_sequences(mature.preselection_sequences[:4], ds.l_max), np.array([0.3]))
    assert not set(grads) & set(PROPENSITY_PARAMS)
    _, pgrads = sess.model.propensity_loss(aux["E"], aux["rho"])
    assert set(pgrads) == set(PROPENSITY_PARAMS)


def test_uncorrected_has_no_fitness_or_propensity_params(tiny_cohort, tiny_train_config):
    ds, _ = tiny_cohort
    fm = train(ds, "Uncorrected", tiny_train_config)
    names = set(fm.model.params.names())
    assert not names & {"W", "B", "log_tau_e", "gamma_r"}
    assert not any(n.startswith(("hr", "enc")) for n in names)


@pytest.mark.parametrize("variant", ["CAIRE", "Uncorrected", "AttentionCAIRE"])
def test_training_is_deterministic_and_keeps_best(tiny_cohort, tiny_train_config, variant):
    ds, _ = tiny_cohort
    a = train(ds, variant, tiny_train_config)
    b = train(ds, variant, tiny_train_config)
    assert a.model.params.equal(b.model.params)
    assert a.log == b.log or all(
        x == y or (math.isnan(x) and math.isnan(y)) for ra, rb in zip(a.log, b.log) for x, y in zip(ra.values(), rb.values())
    )
    scores = [r["val_score"] for r in a.log]
    assert len(scores) == 3
    assert a.best_score == max(scores)
    assert a.log[[r["step"] for r in a.log].index(a.best_step)]["val_score"] == a.best_score
    val = prepare(ds.split("validation"), ds.l_max)
    assert validation_score(a.model, val)[0] == a.best_score


def test_pause_and_resume_is_bit_identical(tmp_path, tiny_cohort, tiny_train_config):
    ds, _ = tiny_cohort
    full = train(ds, "CAIRE", tiny_train_config)
    sess = _session(ds, "CAIRE", tiny_train_config).run(until=5)
    sess.save(tmp_path / "s.ckpt")
    resumed = TrainSession.load(tmp_path / "s.ckpt", ds).finish()
    assert resumed.model.params.equal(full.model.params)
    assert resumed.best_step == full.best_step


def test_fitted_checkpoint_round_trip(tmp_path, tiny_cohort, tiny_train_config):
    ds, _ = tiny_cohort
    for variant in ("CAIRE", "AttentionCAIRE"):
        fm = train(ds, variant, tiny_train_config)
        save_fitted(tmp_path / "m.ckpt", fm, {"fold": 1})
        back = load_fitted(tmp_path / "m.ckpt")
        assert back.model.params.equal(fm.model.params)
        np.testing.assert_array_equal(back.mean_embedding, fm.mean_embedding)
        assert back.best_score == fm.best_score and back.train_ids == fm.train_ids
        save_fitted(tmp_path / "m2.ckpt", back, {"fold": 1})
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_training_log_csv(tmp_path, tiny_cohort, tiny_train_config):
    ds, _ = tiny_cohort
    fm = train(ds, "Uncorrected", tiny_train_config)
    write_training_log(fm.log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOG_FIELDS)
    assert len(lines) == 1 + len(fm.log)


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_loss_reports_step(tiny_cohort, tiny_train_config):
    ds, _ = tiny_cohort
    reps = tuple(
        Repertoire(r.patient_id, r.sequences, r.weights, 1e200, r.preselection_sequences) for r in ds.repertoires
    )
    bad = CohortDataset(reps, ds.split_assignment)
    with pytest.raises(ndiff.NonFiniteError, match="step 0"):
        train(bad, "Uncorrected", tiny_train_config)


def test_validation_score_random_classifier_constant_predictor(tiny_cohort):
    ds, _ = tiny_cohort
    # mature and pre-selection sequences drawn from one distribution: nothing to classify
    rng = np.random.default_rng(0)
    reps = []
    for r in ds.repertoires[:8]:
        pool = list(r.preselection_sequences)
        mature = tuple(pool[i] for i in rng.integers(0, len(pool), 40))
        reps.append(Repertoire(r.patient_id, mature, np.ones(40), r.outcome_y, tuple(pool)))
    val = prepare(reps, ds.l_max)
    model = CaireModel.initialize(ModelConfig("CAIRE", l_max=ds.l_max), make_rng(4))
    model.params["enc2.b"] = rng.normal(size=5)
    model.params["gamma_y"] = np.array(np.mean([pd.y for pd in val]))
    score, acc, r2 = validation_score(model, val)
    assert r2 == pytest.approx(0.0, abs=1e-12)
    assert abs(acc - 0.5) < 0.1
    assert score == acc + r2


def test_validation_score_perfect_model():
    # W marks mature sequences; a linear count feature separates them exactly
    reps_seq = [("CWA", "WKK"), ("AWW", "CWC", "KWA")]
    pres = [("CAA", "KKK"), ("ACD", "EFG")]
    l_max = 5
    model = CaireModel.initialize(ModelConfig("NonNeuralCAIRE", l_max=l_max), make_rng(0))
    p = model.params
    for name in p.names():
        if name.startswith(("hr", "enc", "ha")):
            p[name] = np.zeros_like(p[name])
    p["hr0.W"] = np.zeros_like(p["hr0.W"])
    w_idx = "ACDEFGHIKLMNPQRSTVWY".index("W")
    p["hr0.W"][0, w_idx, 0] = 1.0
    p["hr1.W"] = np.eye(4)
    p["enc2.b"] = np.array([1.0, 0.0, 0.0, 0.0, -0.5])
    p["ha.W"] = p["hr0.W"].copy()
    p["gamma_a"] = np.array([1.0, 0.0, 0.0, 0.0])
    p["W"] = np.zeros_like(p["W"])
    p["B"] = np.zeros_like(p["B"])
    p["gamma_r"] = np.zeros(4)
    reps = [Repertoire(f"p{i}", s, np.ones(len(s)), 0.0, z) for i, (s, z) in enumerate(zip(reps_seq, pres))]
    pds = prepare(reps, l_max)
    preds = [float(model.outcome_mean(model.pool(model.h_a(pd.mature), pd.weights)[None], np.array([[1.0, 0, 0, 0]]))[0])
             for pd in pds]
    assert preds[0] != preds[1]
    reps = [Repertoire(r.patient_id, r.sequences, r.weights, y, r.preselection_sequences) for r, y in zip(reps, preds)]
    score, acc, r2 = validation_score(model, prepare(reps, l_max))
    assert acc == 1.0
    assert r2 == pytest.approx(1.0, abs=1e-12)
    assert score == pytest.approx(2.0, abs=1e-12)


def test_stratified_folds_cover_and_balance():
    rng = make_rng(0)
    ids = [f"p{i}" for i in range(48)]
    y = np.random.default_rng(1).normal(size=48)
    folds = stratified_folds(ids, y, 8, rng)
    assert sorted(np.bincount(folds)) == [6] * 8
    with pytest.warns(UserWarning, match="merging"):
        merged = stratified_folds(ids[:12], y[:12], 8, make_rng(0))
    assert set(merged) == set(range(8))


def test_ensemble_plan_structure(tiny_cohort):
    ds, _ = tiny_cohort
    plan = ensemble_plan(ds, 8, 3, seed=2)
    assert len(plan) == 24
    pool = {r.patient_id for r in ds.repertoires if ds.split_assignment[r.patient_id] != "test"}
    held_counts = {pid: 0 for pid in pool}
    for rep, fold, kept, held in plan:
        assert set(kept) | set(held) == pool and not set(kept) & set(held)
        for pid in held:
            held_counts[pid] += 1
    assert set(held_counts.values()) == {3}
    again = ensemble_plan(ds, 8, 3, seed=2)
    assert [p[3] for p in again] == [p[3] for p in plan]


def test_train_ensemble_size(tiny_cohort):
    ds, _ = tiny_cohort
    cfg = TrainConfig(batch_patients=4, batch_seqs=8, total_steps=2, eval_period=2, seed=1)
    models = train_ensemble(ds, "Uncorrected", cfg, folds=3, repeats=2)
    assert len(models) == 6
    assert len({m.train_ids for m in models}) == 6
