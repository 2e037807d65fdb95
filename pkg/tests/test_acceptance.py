"""Acceptance suite: one test per release criterion, one printed verdict each.

Run with `pytest tests/test_acceptance.py -v -s` to see the verdict lines.
"""

import itertools
import sys
import time

import numpy as np
import pytest

from otrec import data_model as dm
from otrec import gmm as gm
from otrec import neural_core as nc
from otrec import pipeline as pl
from otrec import preference as pref
from otrec import transport as tp
from synthgen import WorldConfig, make_world
from test_pipeline import write_config, write_world


def verdict(name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f"  ({detail})" if detail else "")
    print(line, file=sys.__stdout__, flush=True)
    assert ok, line


def random_spd(rng, d, scale=1.0):
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T + d * np.eye(d))


# --------------------------------------------------------------------------
# Sinkhorn marginals
# --------------------------------------------------------------------------


def test_sinkhorn_marginals_100_matrices():
    rng = np.random.default_rng(1000)
    shapes = [(26, 6), (26, 32)]
    shapes += [
        (int(rng.integers(2, 48)), int(rng.integers(2, 48))) for _ in range(98)
    ]
    start = time.perf_counter()
    worst = 0.0
    for shape in shapes:
        cost = tp.CostMatrix(rng.uniform(0.0, 10.0, size=shape))
        plan = tp.sinkhorn(cost, tp.default_epsilon(cost))
        m, n = shape
        violation = float(
            np.max(np.abs(plan.values.sum(axis=1) - 1.0 / m))
            + np.max(np.abs(plan.values.sum(axis=0) - 1.0 / n))
        )
        worst = max(worst, violation)
    elapsed = time.perf_counter() - start
    verdict(
        "sinkhorn marginals: 100 matrices, violation < 1e-9, < 1s",
        worst < 1e-9 and elapsed < 1.0,
        f"worst violation {worst:.2e}, {elapsed:.2f}s",
    )


# --------------------------------------------------------------------------
# Gaussian W2 correctness
# --------------------------------------------------------------------------


def test_gaussian_w2_correctness():
    rng = np.random.default_rng(2000)
    start = time.perf_counter()

    self_ok = True
    for _ in range(20):
        d = int(rng.integers(1, 9))
        g = gm.GaussianComponent(rng.standard_normal(d), random_spd(rng, d))
        self_ok &= abs(tp.w2_gaussian(g, g)) < 1e-8

    closed_form_err = 0.0
    for _ in range(1000):
        m1, m2 = rng.uniform(-10, 10, size=2)
        s1, s2 = rng.uniform(0.05, 5.0, size=2)
        got = tp.w2_gaussian(
            gm.GaussianComponent(np.array([m1]), np.array([[s1**2]])),
            gm.GaussianComponent(np.array([m2]), np.array([[s2**2]])),
        )
        closed_form_err = max(closed_form_err, abs(got - ((m1 - m2) ** 2 + (s1 - s2) ** 2)))

    sym_err = 0.0
    for _ in range(50):
        g1 = gm.GaussianComponent(rng.standard_normal(8), random_spd(rng, 8))
        g2 = gm.GaussianComponent(rng.standard_normal(8), random_spd(rng, 8))
        sym_err = max(sym_err, abs(tp.w2_gaussian(g1, g2) - tp.w2_gaussian(g2, g1)))

    elapsed = time.perf_counter() - start
    verdict(
        "gaussian W2: self-dist < 1e-8, 1-D closed form < 1e-10, symmetry < 1e-8, < 5s",
        self_ok and closed_form_err < 1e-10 and sym_err < 1e-8 and elapsed < 5.0,
        f"closed-form err {closed_form_err:.2e}, symmetry err {sym_err:.2e}, {elapsed:.2f}s",
    )


# --------------------------------------------------------------------------
# Exact-OT agreement at tiny epsilon
# --------------------------------------------------------------------------


def test_exact_ot_agreement_on_3x3():
    rng = np.random.default_rng(3000)
    checked = 0
    worst_gap = 0.0
    while checked < 10:
        values = rng.uniform(0.0, 1.0, size=(3, 3))
        vertex_costs = sorted(
            sum(values[i, p[i]] for i in range(3)) / 3.0
            for p in itertools.permutations(range(3))
        )
        if vertex_costs[1] - vertex_costs[0] < 0.05:
            continue  # needs a unique optimal vertex with a clear margin
        checked += 1
        plan = tp.sinkhorn(
            tp.CostMatrix(values),
            epsilon=1e-3 * float(values.max()),
            max_iter=300_000,
            tol=1e-4,
        )
        got = float(np.sum(plan.values * values))
        worst_gap = max(worst_gap, (got - vertex_costs[0]) / vertex_costs[0])
    verdict(
        "exact-OT agreement: sinkhorn cost within 1% of LP vertex optimum",
        worst_gap < 0.01,
        f"worst relative gap {worst_gap:.2e} over {checked} matrices",
    )


# --------------------------------------------------------------------------
# EM monotonicity and BIC recovery
# --------------------------------------------------------------------------


def test_em_monotonicity_50_mixtures():
    rng = np.random.default_rng(4000)
    worst_drop = 0.0
    for trial in range(50):
        d = int(rng.integers(1, 9))
        k = int(rng.integers(1, 5))
        means = rng.uniform(-5, 5, size=(k, d))
        covs = [random_spd(rng, d, scale=0.5) for _ in range(k)]
        weights = rng.dirichlet(np.ones(k))
        labels = rng.choice(k, size=150, p=weights)
        points = np.array([rng.multivariate_normal(means[l], covs[l]) for l in labels])
        model = gm.fit_gmm_em(points, k, seed=trial, config=gm.GmmConfig(n_init=1))
        diffs = np.diff(np.array(model.mean_ll_trace))
        if diffs.size:
            worst_drop = min(worst_drop, float(diffs.min()))
    verdict(
        "EM monotonicity: mean log-likelihood never drops more than 1e-9",
        worst_drop >= -1e-9,
        f"worst step {worst_drop:.2e}",
    )


def test_bic_recovers_true_k():
    rng = np.random.default_rng(5000)
    hits = 0
    for trial in range(50):
        direction = rng.standard_normal(2)
        direction *= 6.0 / np.linalg.norm(direction)
        n = 150
        labels = rng.integers(0, 2, size=n)
        points = (labels[:, None] * direction) + rng.standard_normal((n, 2)) * 0.7
        k, _ = gm.select_k_bic(points, [1, 2, 3], seed=trial, config=gm.GmmConfig(n_init=2))
        hits += k == 2
    verdict(
        "BIC selection: recovers K=2 on separated data in >= 45/50 trials",
        hits >= 45,
        f"{hits}/50 recovered",
    )


# --------------------------------------------------------------------------
# End-to-end gradient fidelity
# --------------------------------------------------------------------------


@pytest.mark.parametrize("k", [4, 16])
def test_rating_gradient_fidelity(k):
    # Mild component separation keeps density features well away from 0/1
    # saturation, so no relu pre-activation sits within the h=1e-5 step of
    # a kink and no gradient coordinate underflows.
    d = 16
    rng = np.random.default_rng(6000 + k)
    means = np.zeros((k, d))
    for j in range(k):
        means[j, j % d] = 1.0
    comps = tuple(gm.GaussianComponent(means[j], np.eye(d)) for j in range(k))
    mixture = gm.GmmModel(comps, np.full(k, 1.0 / k), fit_log_likelihood=0.0)

    batch = 6
    user_codes = rng.standard_normal((batch, d))
    item_feats = pref.density_features(mixture, rng.standard_normal((batch, d)))
    ratings = rng.uniform(1, 5, size=batch)
    w_learner = nc.init_mlp([d, d, k], ["relu", "softmax"], rng)
    r_predictor = nc.init_mlp([k, k, 1], ["relu", "linear"], rng)

    def w_loss(p):
        loss, w_grads, _ = pref.rating_loss_and_grads(p, r_predictor, user_codes, item_feats, ratings)
        return loss, w_grads

    def r_loss(p):
        loss, _, r_grads = pref.rating_loss_and_grads(w_learner, p, user_codes, item_feats, ratings)
        return loss, r_grads

    err_w = nc.gradient_check(w_learner, w_loss, h=1e-5)
    err_r = nc.gradient_check(r_predictor, r_loss, h=1e-5)
    verdict(
        f"gradient fidelity (K={k}, d=16): max relative error < 1e-4",
        max(err_w, err_r) < 1e-4,
        f"w-learner {err_w:.2e}, r-predictor {err_r:.2e}",
    )


# --------------------------------------------------------------------------
# Transfer simplex preservation
# --------------------------------------------------------------------------


def test_transfer_simplex_preservation():
    rng = np.random.default_rng(7000)
    plans = []
    for _ in range(10):
        m, n = int(rng.integers(2, 12)), int(rng.integers(2, 12))
        cost = tp.CostMatrix(rng.uniform(0, 5, size=(m, n)))
        plans.append(tp.sinkhorn(cost, tp.default_epsilon(cost)))
    worst_sum = 0.0
    min_entry = 0.0
    for i in range(10_000):
        plan = plans[i % len(plans)]
        w = pref.PreferenceWeights(rng.dirichlet(np.ones(plan.shape[0])))
        out = tp.transfer_weights(w, plan)
        worst_sum = max(worst_sum, abs(float(out.values.sum()) - 1.0))
        min_entry = min(min_entry, float(out.values.min()))

    w = pref.PreferenceWeights(rng.dirichlet(np.ones(6)))
    identity = tp.TransportPlan(np.eye(6) / 6, epsilon=1.0, iterations=0, marginal_error=0.0)
    exact = np.array_equal(tp.transfer_weights(w, identity).values, w.values)
    verdict(
        "transfer simplex preservation: 10^4 vectors stay on the simplex; identity coupling exact",
        worst_sum < 1e-9 and min_entry >= 0.0 and exact,
        f"worst |sum-1| {worst_sum:.2e}, min entry {min_entry:.2e}",
    )


# --------------------------------------------------------------------------
# Synthetic end-to-end transfer benefit
# --------------------------------------------------------------------------


def run_pipeline_seed(tmp_path, seed: int) -> tuple[float, float, float]:
    """Full pipeline on the rotated synthetic world; returns (ours, uniform, global-mean) RMSE."""
    world = make_world(seed, WorldConfig(n_users=36, n_items=60, per_user=16, raw_dim=48))
    data_paths = write_world(world, tmp_path / f"data_{seed}")
    config_path = write_config(
        tmp_path / f"run_{seed}.conf",
        data_paths,
        tmp_path / f"artifacts_{seed}",
        seed=seed,
        **{
            "autoencoder.input_dim": 48,
            "autoencoder.hidden_dim": 48,
            "train.epochs": 200,
            "train.patience": 200,
            "train.learning_rate": 0.01,
            "train.restarts": 8,
            "sinkhorn.tol": 1e-7,
        },
    )
    config = pl.parse_config(config_path)
    pl.cmd_split(config)
    pl.cmd_train_ae(config)
    pl.cmd_fit_gmm(config, "source")
    pl.cmd_fit_gmm(config, "target")
    pl.cmd_train_domain(config, "source")
    pl.cmd_train_domain(config, "target")
    pl.cmd_transport(config)
    pl.cmd_predict(config)
    report = pl.cmd_evaluate(config)

    paths = pl.artifact_paths(config.artifacts_dir)
    split = dm.read_split(paths["split_dir"])
    target_model = pl.load_domain_model(config, "target")
    items = dm.load_embeddings(paths["encoded_target_items"])
    uniform = pref.PreferenceWeights(np.full(target_model.gmm.k, 1.0 / target_model.gmm.k))
    uniform_errs = [
        pref.predict_rating(target_model, uniform, items.vector(r.item_id)) - r.rating
        for r in split.test
    ]
    uniform_rmse = float(np.sqrt(np.mean(np.square(uniform_errs))))
    global_mean = float(np.mean([r.rating for r in split.train_target]))
    mean_rmse = float(np.sqrt(np.mean([(global_mean - r.rating) ** 2 for r in split.test])))
    return report.rmse, uniform_rmse, mean_rmse


def test_synthetic_transfer_benefit(tmp_path):
    start = time.perf_counter()
    rows = [run_pipeline_seed(tmp_path, seed) for seed in (101, 102, 103, 104, 105)]
    elapsed = time.perf_counter() - start
    ours, uniform, mean = np.array(rows).mean(axis=0)
    gain_uniform = 1.0 - ours / uniform
    gain_mean = 1.0 - ours / mean
    verdict(
        "synthetic end-to-end transfer: beats uniform-weight and global-mean by >= 10%, < 5 min",
        gain_uniform >= 0.10 and gain_mean >= 0.10 and elapsed < 300.0,
        f"RMSE ours {ours:.3f} vs uniform {uniform:.3f} (+{100*gain_uniform:.0f}%), "
        f"mean {mean:.3f} (+{100*gain_mean:.0f}%), {elapsed:.0f}s over 5 seeds",
    )


# --------------------------------------------------------------------------
# Determinism
# --------------------------------------------------------------------------


def test_pipeline_determinism(tmp_path):
    world = make_world(42, WorldConfig(n_users=10, n_items=15, per_user=8))
    data_paths = write_world(world, tmp_path / "data")
    dirs = []
    for run in ("a", "b"):
        config_path = write_config(
            tmp_path / f"{run}.conf",
            data_paths,
            tmp_path / f"artifacts_{run}",
            seed=42,
            **{"train.epochs": 15, "autoencoder.epochs": 15, "train.restarts": 2},
        )
        config = pl.parse_config(config_path)
        pl.cmd_split(config)
        pl.cmd_train_ae(config)
        pl.cmd_fit_gmm(config, "source")
        pl.cmd_fit_gmm(config, "target")
        pl.cmd_train_domain(config, "source")
        pl.cmd_train_domain(config, "target")
        pl.cmd_transport(config)
        pl.cmd_predict(config)
        pl.cmd_evaluate(config)
        dirs.append(config.artifacts_dir)
    files_a = sorted(p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(dirs[1]) for p in dirs[1].rglob("*") if p.is_file())
    identical = files_a == files_b and all(
        (dirs[0] / rel).read_bytes() == (dirs[1] / rel).read_bytes() for rel in files_a
    )
    verdict(
        "determinism: two identical pipeline runs produce byte-identical artifacts",
        identical,
        f"{len(files_a)} artifacts compared",
    )
