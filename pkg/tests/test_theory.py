import math

import numpy as np
import pytest

from lrc import model as M
from lrc import theory as T
from lrc.data import Batch, Corpus, generate_markov_corpus
from lrc.errors import InsufficientDataError, InvalidInputError
from lrc.matcore import RngState
from lrc.optim import ConstantEstimates, SgdConfig, TrainTrace, train
from oracles import naive_ksg

CFG = M.ModelConfig(vocab_size=10, num_layers=1, hidden_dim=8, num_heads=2, seq_len=6)


def _batch(seed):
    toks = RngState(seed).integers(0, 10, (2, 7))
    return Batch(toks[:, :-1], toks[:, 1:])


# ---- BoundReport

def test_bound_report_pass_flag_and_json():
    rep = T.BoundReport("x", [1.0, 2.0], [1.5, 2.0], {"c": 1.0})
    assert rep.margin == 0.0 and rep.passed
    rep2 = T.BoundReport("y", [1.0, 2.1], [1.5, 2.0], tolerance=0.05)
    assert not rep2.passed
    rep3 = T.BoundReport("z", [1.0, 2.1], [1.5, 2.0], required_fraction=0.5)
    assert rep3.passed and rep3.fraction_satisfied == 0.5
    d = rep.to_dict()
    assert d["pass"] is True and d["points"][0] == {"measured": 1.0, "bound": 1.5}
    assert rep.to_json() == rep.to_json()


# ---- gradient deviation

def test_lemma1_full_rank_zero():
    t = M.init_teacher(CFG, RngState(0))
    s = M.init_student(t, 4, "random", RngState(1))
    eps, dev = T.lemma1_deviation(t, s, _batch(2), 8)
    assert eps == 0.0 and dev == 0.0


def test_lemma1_exactly_low_rank_teacher_zero():
    t = M.init_teacher(CFG, RngState(3))
    rng = RngState(4)
    for k, v in list(t.params.items()):
        if k.split(".")[-1] in M.LAYER_MAPS:
            t.params[k] = rng.normal((v.shape[0], 2)) @ rng.normal((2, v.shape[1]))
    s = M.init_student(t, 4, "random", RngState(5))
    for r in (2, 3, 5):
        eps, dev = T.lemma1_deviation(t, s, _batch(6), r)
        assert eps == 0.0 and dev == 0.0
    eps, dev = T.lemma1_deviation(t, s, _batch(6), 1)
    assert eps > 0 and dev > 0


def test_lemma1_calibration_and_report():
    sweeps = [[(1, 2.0, 1.0), (2, 1.0, 0.6), (8, 0.0, 0.0)]]
    c = T.calibrate_lemma1_constant(sweeps)
    assert c == pytest.approx(0.6)
    rep = T.lemma1_report(sweeps, c)
    assert rep.passed
    bad = T.lemma1_report([[(1, 2.0, 0.5), (2, 1.0, 0.6), (8, 0.0, 0.0)]], 1.0)
    assert not bad.passed
    with pytest.raises(InsufficientDataError):
        T.calibrate_lemma1_constant([[(8, 0.0, 0.0)]])


# ---- convergence

def test_convergence_bound_examples():
    assert T.convergence_bound(1, 1, 1, 100) == pytest.approx(0.03, abs=1e-15)
    assert T.convergence_bound(2, 3, 0.5, 1, eps=2, c=1) == pytest.approx(2 * 2 * 3 + 0.5 + 4)
    b = T.convergence_bound(1.3, 0.7, 0.2, np.array([10.0, 20.0]))
    assert b[1] == pytest.approx(b[0] / 2)
    with pytest.raises(InvalidInputError):
        T.convergence_bound(1, 1, 1, 0)


def test_quadratic_gd_satisfies_bound_every_prefix():
    prob = T.QuadraticProblem.random(15, 50.0, RngState(0))
    tr = prob.run_gd(2000)
    rep = T.verify_convergence(tr, ConstantEstimates(prob.smoothness, 0.0, 0.0, prob.value(prob.x0)))
    assert rep.passed and len(rep.measured) == 2000


def test_verify_convergence_short_trace():
    prob = T.QuadraticProblem.random(3, 2.0, RngState(0))
    with pytest.raises(InsufficientDataError):
        T.verify_convergence(prob.run_gd(50), ConstantEstimates(1.0, 0.0, 0.0, 1.0))


def test_verify_convergence_invariant_to_loss_offset():
    prob = T.QuadraticProblem.random(5, 10.0, RngState(1))
    tr = prob.run_gd(200)
    consts = ConstantEstimates(prob.smoothness, 0.0, 0.0, prob.value(prob.x0))
    shifted = TrainTrace.from_csv(tr.to_csv())
    for r in shifted.records:
        r.loss.total += 123.0
    a, b = T.verify_convergence(tr, consts), T.verify_convergence(shifted, consts)
    assert a.measured == b.measured and a.passed == b.passed


def test_fit_convergence_constant_makes_bound_tight():
    rng = RngState(2)
    tr = TrainTrace()
    from lrc.optim import TrainRecord
    from lrc.losses import total_loss
    running = 0.0
    for t in range(300):
        g = 1.0 + 0.1 * float(rng.normal(1)[0])
        running += (g - running) / (t + 1)
        tr.records.append(TrainRecord(t, total_loss(0, 0, 0), g, running))
    consts = ConstantEstimates(1.0, 0.5, 0.3, 2.0)
    c = T.fit_convergence_constant(tr, consts)
    rep = T.verify_convergence(tr, consts, c=c, skip=100)
    assert rep.passed and abs(rep.margin) < 1e-9


def test_loglog_slope_power_law():
    t = np.arange(1, 500, dtype=float)
    assert T.loglog_slope(3.0 / t) == pytest.approx(-1.0)
    assert T.loglog_slope(2.0 / np.sqrt(t)) == pytest.approx(-0.5)


# ---- generalization

def test_covering_number_examples():
    assert T.covering_number_log(2, 3, 4, 1.5, 4.5) == 0.0
    assert T.covering_number_log(1, 1, 1, 1.0, 3 / math.e) == pytest.approx(3.0)
    assert T.covering_number_log(4, 3, 5, 2.0, 0.1) == pytest.approx(2 * T.covering_number_log(2, 3, 5, 2.0, 0.1))
    with pytest.raises(InvalidInputError):
        T.covering_number_log(1, 1, 1, 1.0, 4.0)
    with pytest.raises(InvalidInputError):
        T.covering_number_log(1, 1, 1, 0.0, 1.0)


def test_generalization_bound_examples():
    first = T.generalization_bound(2, 4, 4, math.e ** 2, 1.0, 1.0, 0.0)
    assert first == pytest.approx(32 / math.e)
    both = T.generalization_bound(2, 4, 4, math.e ** 2, math.exp(-math.e ** 2), 1.0, 1.0)
    assert both - first == pytest.approx(1.0)
    assert T.generalization_bound(6, 3, 5, 1000, 1.0, 1.0, 0.0) == pytest.approx(
        2 * T.generalization_bound(3, 3, 5, 1000, 1.0, 1.0, 0.0))
    assert T.generalization_bound(1, 1, 1, 100, 1.0, 0.0, 5.0) == 0.0
    for bad in ((0.0, 100), (1.5, 100), (0.5, 1)):
        with pytest.raises(InvalidInputError):
            T.generalization_bound(1, 1, 1, bad[1], bad[0])


@pytest.fixture(scope="module")
def gap_setup():
    t = M.init_teacher(CFG, RngState(7))
    corpus = generate_markov_corpus(1, 1, 10, 4000, chain_seed=2)
    return t, corpus


def test_gap_zero_on_same_set(gap_setup):
    t, corpus = gap_setup
    s = M.init_student(t, 4)
    assert T.measure_generalization_gap(s, t, corpus, corpus) == 0.0
    with pytest.raises(InvalidInputError):
        T.measure_generalization_gap(s, t, corpus, Corpus(np.zeros(0), 10, "e"))


def test_gap_small_for_untrained_student(gap_setup):
    t, corpus = gap_setup
    tr, ho = corpus.split()
    rel = []
    for seed in range(5):
        s = M.init_student(t, 4, "random", RngState(seed))
        from lrc.optim import lm_eval
        from lrc.data import sequential_batches
        gap = T.measure_generalization_gap(s, t, tr, ho)
        rel.append(abs(gap) / lm_eval(s, t, sequential_batches(tr, 64, 6)))
    assert np.mean(rel) < 0.05


def test_gap_grows_with_overfitting(gap_setup):
    t, corpus = gap_setup
    small = corpus.head(512)
    ho = generate_markov_corpus(9, 1, 10, 4000, chain_seed=2)
    gaps = []
    for steps in (100, 5000):
        s = M.init_student(t, 8)
        train(s, t, small, SgdConfig(lr=1e-2, steps=steps, batch_size=8, optimizer="adam",
                                      use_kd=False, use_clone=False))
        gaps.append(T.measure_generalization_gap(s, t, small, ho))
    assert gaps[1] > gaps[0]


# ---- mutual information

def test_gaussian_mi_examples():
    assert T.gaussian_mi(0.0, 5) == 0.0
    assert T.gaussian_mi(0.8, 1) == pytest.approx(-0.5 * math.log(0.36))
    assert T.gaussian_mi(0.8, 1) == pytest.approx(0.51083, abs=1e-5)
    assert T.gaussian_mi(-0.3, 4) == T.gaussian_mi(0.3, 4)
    with pytest.raises(InvalidInputError):
        T.gaussian_mi(1.0, 1)


def test_clone_loss_from_correlation_examples():
    assert T.clone_loss_from_correlation(1.0, 1.0, 7) == 0.0
    assert T.clone_loss_from_correlation(1.0, 0.5, 4) == 4.0
    with pytest.raises(InvalidInputError):
        T.clone_loss_from_correlation(0.0, 0.5, 4)


def test_clone_loss_matches_monte_carlo():
    m = T.GaussianMIModel(8, 1.0, 0.3)
    x, y = m.sample(100_000, RngState(0))
    mse = np.mean(np.sum((x - y) ** 2, axis=1))
    assert mse == pytest.approx(m.clone_loss(), rel=0.02)


def test_gaussian_model_covariances():
    m = T.GaussianMIModel(3, 2.0, 0.4)
    assert np.all(np.linalg.eigvalsh(m.joint) > 0)
    x, y = m.sample(50_000, RngState(1))
    emp = np.cov(np.hstack([x, y]).T)
    assert np.max(np.abs(emp - m.joint)) < 0.05
    with pytest.raises(InvalidInputError):
        T.GaussianMIModel(3, 1.0, 1.0)


def test_mi_lower_bound_examples():
    assert T.mi_lower_bound(0.0, 6, 0.25) == pytest.approx(math.log(6) + 0.25)
    vals = [T.mi_lower_bound(c, 6) for c in (0.0, 1.0, 2.0)]
    assert np.allclose(np.diff(vals), -3.0)
    with pytest.raises(InvalidInputError):
        T.mi_lower_bound(0.0, 0)


def test_mi_chain_with_infimum_calibration():
    rep = T.mi_chain_report()
    assert rep.passed
    # the infimum is attained: the bound touches the MI near rho*
    d = 8
    rho = (-1 + math.sqrt(1 + 4 * d * d)) / (2 * d)
    c = T.calibrate_mi_const(d)
    gap = T.gaussian_mi(rho, d) - T.mi_lower_bound(T.clone_loss_from_correlation(1, rho, d), d, c)
    assert abs(gap) < 1e-9


def test_mi_chain_tight_at_zero_calibration_fails():
    # documented alternative: equality at rho = 0 leaves the bound above the MI for rho > 0
    rep = T.mi_chain_report(mode="tight_at_zero")
    assert not rep.passed


def test_ksg_matches_naive_oracle():
    m = T.GaussianMIModel(2, 1.0, 0.6)
    x, y = m.sample(400, RngState(3))
    xs = (x - x.mean(0)) / x.std(0)
    ys = (y - y.mean(0)) / y.std(0)
    fast = T.estimate_mi_knn(xs, ys, k=3, jitter=0.0)
    assert fast == pytest.approx(naive_ksg(xs, ys, 3), abs=1e-12)


def test_ksg_independent_near_zero():
    rng = RngState(4)
    assert abs(T.estimate_mi_knn(rng.normal((10_000, 2)), rng.normal((10_000, 2)))) < 0.05


def test_ksg_gaussian_closed_form_rho08():
    x, y = T.GaussianMIModel(1, 1.0, 0.8).sample(100_000, RngState(5))
    assert abs(T.estimate_mi_knn(x, y) - T.gaussian_mi(0.8, 1)) < 0.02


def test_ksg_invariant_to_monotone_rescaling():
    x, y = T.GaussianMIModel(2, 1.0, 0.5).sample(5_000, RngState(6))
    base = T.estimate_mi_knn(x, y)
    x2 = x * np.array([3.0, 0.2]) - 1.0
    y2 = np.column_stack([7 * y[:, 0] + 2, -0.5 * y[:, 1]])
    assert abs(T.estimate_mi_knn(x2, y2) - base) < 0.02


def test_ksg_errors():
    rng = RngState(7)
    with pytest.raises(InvalidInputError):
        T.estimate_mi_knn(np.ones((200, 2)), rng.normal((200, 2)))
    with pytest.raises(InvalidInputError):
        T.estimate_mi_knn(rng.normal((50, 1)), rng.normal((50, 1)))
    with pytest.raises(InvalidInputError):
        T.estimate_mi_knn(rng.normal((200, 1)), rng.normal((200, 1)), k=2)


def test_top_principal_components():
    rng = RngState(8)
    a = rng.normal((500, 3)) * np.array([5.0, 1.0, 0.1])
    pcs = T.top_principal_components(a @ np.linalg.qr(rng.normal((3, 3)))[0], 2)
    assert pcs.shape == (500, 2)
    var = pcs.var(axis=0)
    assert var[0] > var[1] > 0.5


# ---- Corollary 1

def test_optimal_rank_examples():
    assert T.optimal_rank(4, 1, 25) == pytest.approx(10.0)
    assert T.optimal_rank(3, 2, 400) == pytest.approx(2 * T.optimal_rank(3, 2, 100))
    with pytest.raises(InvalidInputError):
        T.optimal_rank(0, 1, 1)


def test_optimal_rank_minimizes_objective():
    rng = RngState(9)
    for _ in range(100):
        c1, c2, n = np.exp(rng.uniform(3) * 6 - 3)
        n *= 1000
        r = T.optimal_rank(c1, c2, n)
        grid = np.geomspace(r / 100, r * 100, 20001)
        f = T.rank_objective(grid, c1, c2, n)
        fr = T.rank_objective(r, c1, c2, n)
        assert fr <= f.min() + 1e-12 * abs(fr)
        assert fr <= T.rank_objective(r / 2, c1, c2, n) and fr <= T.rank_objective(2 * r, c1, c2, n)


def test_fit_rank_law_exact_sqrt():
    ns = [1e3, 4e3, 1.6e4, 6.4e4]
    fit = T.fit_rank_law([(n, 3 * math.sqrt(n)) for n in ns])
    assert fit.slope == pytest.approx(0.5) and fit.correlation == pytest.approx(1.0)
    assert fit.c1 == pytest.approx(9.0)


def test_fit_rank_law_constant_and_errors():
    fit = T.fit_rank_law([(n, 5.0) for n in (1e3, 1e4, 1e5, 1e6)])
    assert fit.slope == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InsufficientDataError):
        T.fit_rank_law([(1, 1), (2, 2), (3, 3)])
    with pytest.raises(InvalidInputError):
        T.fit_rank_law([(1, 1), (2, 0), (3, 3), (4, 4)])


def test_fit_rank_law_noisy_monte_carlo():
    rng = RngState(10)
    ns = np.array([2e3, 8e3, 3.2e4, 1.28e5])
    slopes = []
    for _ in range(100):
        r = 2 * np.sqrt(ns) * (1 + 0.1 * rng.uniform(4) * 2 - 0.1)
        slopes.append(T.fit_rank_law(list(zip(ns, r))).slope)
    assert all(abs(s - 0.5) <= 0.1 for s in slopes)


def test_spearman_exact_on_rational_values():
    assert T.spearman([2, 4, 8, 16], [0.0251, 0.012, 0.0272, 0.0578]) == 0.8
    assert T.spearman([1, 2, 3], [3, 2, 1]) == -1.0
