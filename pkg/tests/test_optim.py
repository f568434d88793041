import numpy as np
import pytest

from lrc import model as M
from lrc import optim as O
from lrc.data import Batch, generate_markov_corpus, sequential_batches
from lrc.errors import DivergenceError, InsufficientDataError, InvalidInputError
from lrc.matcore import RngState

CFG = M.ModelConfig(vocab_size=8, num_layers=1, hidden_dim=8, num_heads=2, seq_len=8)


@pytest.fixture(scope="module")
def toy():
    teacher = M.init_teacher(CFG, RngState(0))
    corpus = generate_markov_corpus(1, 1, 8, 4000, chain_seed=3)
    return teacher, corpus


def test_smoothness_of_scaled_quadratic():
    lam = 3.7
    theta = RngState(0).normal(20)
    assert O.estimate_smoothness(lambda th: lam * th, theta) == pytest.approx(lam, abs=1e-6)


def test_smoothness_of_least_squares_scales_by_four():
    rng = RngState(1)
    x, y = rng.normal((30, 6)), rng.normal(30)
    top = np.linalg.eigvalsh(x.T @ x)[-1]
    theta = rng.normal(6)
    l1 = O.estimate_smoothness(lambda th: x.T @ (x @ th - y), theta, num_probes=30)
    l2 = O.estimate_smoothness(lambda th: 4 * x.T @ (x @ th - y / 2), theta, num_probes=30)
    assert l1 <= top * (1 + 1e-9) and l1 == pytest.approx(top, rel=1e-3)
    assert l2 == pytest.approx(4 * l1, rel=1e-6)


def test_smoothness_needs_ten_probes():
    with pytest.raises(InvalidInputError):
        O.estimate_smoothness(lambda t: t, np.ones(3), num_probes=5)


def test_model_smoothness_seed_stability(toy):
    teacher, corpus = toy
    s = M.init_student(teacher, 4)
    cfg = O.SgdConfig()
    probe = O.concat_batches(sequential_batches(corpus, 16, 8, max_windows=16))
    vals = [O.estimate_model_smoothness(s, teacher, probe, cfg, rng=RngState(k)) for k in range(5)]
    med = np.median(vals)
    assert all(abs(v - med) <= 0.2 * med for v in vals)


def test_grad_variance_full_batch_zero_and_errors(toy):
    teacher, corpus = toy
    s = M.init_student(teacher, 4)
    prob = O.DistillProblem(s, teacher, O.SgdConfig())
    full = O.concat_batches(sequential_batches(corpus, 8, 8, max_windows=8))
    g = prob.grad(prob.theta(), full)
    assert O.estimate_grad_variance(lambda b: prob.grad(prob.theta(), b), [full, full], g) == 0.0
    with pytest.raises(InsufficientDataError):
        O.estimate_grad_variance(lambda b: g, [full], g)


def test_duplicated_dataset_same_full_gradient(toy):
    teacher, corpus = toy
    prob = O.DistillProblem(M.init_student(teacher, 4), teacher, O.SgdConfig())
    full = O.concat_batches(sequential_batches(corpus, 8, 8, max_windows=8))
    dup = Batch(np.concatenate([full.inputs] * 2), np.concatenate([full.targets] * 2))
    th = prob.theta()
    assert np.allclose(prob.grad(th, full), prob.grad(th, dup), atol=1e-12, rtol=1e-10)


def test_grad_variance_decreases_with_batch_size(toy):
    teacher, corpus = toy
    s = M.init_student(teacher, 4)
    full = O.concat_batches(sequential_batches(corpus, 64, 8, max_windows=128))
    means = []
    for bs in (1, 4, 16):
        cfg = O.SgdConfig(batch_size=bs)
        means.append(np.mean([O.estimate_model_grad_variance(s, teacher, corpus, cfg, num_batches=4,
                                                             rng=RngState(k), full_batch=full)
                              for k in range(5)]))
    assert means[0] > means[1] > means[2]


def test_sgd_step_examples():
    p = {"a": np.array([1.0])}
    assert O.sgd_step(p, {"a": np.array([2.0])}, 0.25)["a"][0] == 0.5
    assert np.array_equal(O.sgd_step(p, {"a": np.array([2.0])}, 0.0)["a"], p["a"])
    g = {"a": np.array([0.3])}
    two = O.sgd_step(O.sgd_step(p, g, 0.1), g, 0.1)
    one = O.sgd_step(p, {"a": 2 * g["a"]}, 0.1)
    assert two["a"][0] == pytest.approx(one["a"][0], abs=1e-15)
    with pytest.raises(InvalidInputError):
        O.sgd_step(p, {"a": np.zeros(2)}, 0.1)


def test_self_distillation_fixed_point(toy):
    teacher, corpus = toy
    s = M.init_student(teacher, CFG.hidden_dim, "identity")
    cfg = O.SgdConfig(lr=0.1, steps=20, batch_size=4, lam=0.0, use_lm=False)
    tr = O.train(s, teacher, corpus, cfg)
    assert all(r.loss.kd == 0.0 for r in tr.records)


def test_training_reduces_loss_and_is_deterministic(toy):
    teacher, corpus = toy
    cfg = O.SgdConfig(lr=0.05, steps=500, batch_size=8)
    s1 = M.init_student(teacher, 4, "random", RngState(5))
    s2 = M.init_student(teacher, 4, "random", RngState(5))
    before = teacher.checksum()
    t1 = O.train(s1, teacher, corpus, cfg)
    t2 = O.train(s2, teacher, corpus, cfg)
    assert teacher.checksum() == before
    assert np.mean(t1.totals()[-20:]) < t1.totals()[0]
    assert t1.to_csv() == t2.to_csv()


def test_full_batch_descent_with_inverse_smoothness():
    # trained toy teacher, default svd init, lr = 1/L_hat resolved once
    from lrc.experiments import TOY, _toy_teacher
    teacher, corpus = _toy_teacher()
    full = O.concat_batches(sequential_batches(corpus, 64, TOY.seq_len, 64))
    s = M.init_student(teacher, 4, "svd")
    tr = O.train(s, teacher, corpus, O.SgdConfig(lr="auto", steps=300), full_batch=full)
    tot = tr.totals()
    assert np.mean(np.diff(tot) <= 0) >= 0.95
    rm = tr.running_mean()
    half = rm[len(rm) // 2:]
    assert np.polyfit(np.arange(len(half)), half, 1)[0] <= 0


def test_divergence_guard(toy):
    teacher, corpus = toy
    s = M.init_student(teacher, 4, "random", RngState(7))
    with pytest.raises(DivergenceError) as exc:
        O.train(s, teacher, corpus, O.SgdConfig(lr=1e6, steps=50, batch_size=4))
    assert exc.value.step >= 0


def test_trace_csv_round_trip(toy):
    teacher, corpus = toy
    s = M.init_student(teacher, 4)
    val = sequential_batches(corpus, 8, 8, max_windows=8)
    tr = O.train(s, teacher, corpus, O.SgdConfig(lr=0.05, steps=6, batch_size=4, eval_every=3),
                 val_batches=val)
    text = tr.to_csv()
    assert text.splitlines()[0] == ",".join(O.TRACE_COLUMNS)
    back = O.TrainTrace.from_csv(text)
    assert back.to_csv() == text
    assert [s for s, _ in back.val_points()] == [0, 3, 5]


def test_sgd_config_validation():
    with pytest.raises(InvalidInputError):
        O.SgdConfig(optimizer="lbfgs")
    with pytest.raises(InvalidInputError):
        O.SgdConfig(lr=-1.0)
    with pytest.raises(InvalidInputError):
        O.SgdConfig(steps=0)
