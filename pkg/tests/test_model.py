import numpy as np
import pytest

from lrc import model as M
from lrc.data import Batch
from lrc.errors import InvalidInputError
from lrc.losses import kd_loss
from lrc.matcore import RngState
from oracles import softmax_rows

CFG = M.ModelConfig(vocab_size=11, num_layers=2, hidden_dim=8, num_heads=2, seq_len=8)


def _teacher(seed=0, cfg=CFG):
    return M.init_teacher(cfg, RngState(seed))


def _batch(seed, b=2, t=6, vocab=11):
    rng = RngState(seed)
    toks = rng.integers(0, vocab, (b, t + 1))
    return Batch(toks[:, :-1], toks[:, 1:])


def test_zero_weights_single_token_by_hand():
    t = _teacher()
    p = {k: (np.zeros_like(v) if k not in ("tok", "head") and not k.endswith("_g") else v)
         for k, v in t.params.items()}
    tr = M.forward(p, CFG, [3])
    x = t.params["tok"][3]
    xhat = (x - x.mean()) / np.sqrt(x.var() + M.LN_EPS)
    assert np.allclose(tr.logits[0, 0], xhat @ t.params["head"], atol=1e-12)


def test_attention_rows_sum_to_one():
    t = _teacher()
    tr = M.forward(t.params, CFG, _batch(1).inputs)
    for lc in tr.cache["layers"]:
        assert np.max(np.abs(lc["p"].sum(-1) - 1)) < 1e-12
        assert np.all(np.triu(lc["p"][0, 0], 1) == 0)


def test_causal_mask_prefix_unchanged():
    t = _teacher()
    toks = _batch(2).inputs[0].copy()
    base = M.teacher_forward(t, toks).logits
    for j in range(1, len(toks)):
        pert = toks.copy()
        pert[j] = (pert[j] + 1) % CFG.vocab_size
        out = M.teacher_forward(t, pert).logits
        assert np.array_equal(out[0, :j], base[0, :j])
        assert not np.array_equal(out[0, j], base[0, j])


def test_layer_norm_stats():
    x = RngState(3).normal((4, 5, 16)) * 7 + 2
    y, _ = M._ln_fwd(x, np.ones(16), np.zeros(16))
    assert np.max(np.abs(y.mean(-1))) < 1e-6
    assert np.max(np.abs(y.var(-1) - 1)) < 1e-6


def test_forward_errors():
    t = _teacher()
    with pytest.raises(InvalidInputError):
        M.teacher_forward(t, [0, 11])
    with pytest.raises(InvalidInputError):
        M.teacher_forward(t, np.zeros(9, dtype=int))


def test_full_rank_identity_is_bit_identical():
    t = _teacher(4)
    s = M.init_student(t, CFG.hidden_dim, "identity")
    b = _batch(5)
    lt = M.teacher_forward(t, b.inputs).logits
    ls = M.student_forward(s, t, b.inputs).logits
    assert np.array_equal(lt, ls)
    assert kd_loss(lt, ls)[0] == 0.0


def test_student_forward_shapes_and_determinism():
    t = _teacher(6)
    s = M.init_student(t, 4, "random", RngState(1))
    s2 = M.init_student(t, 4, "random", RngState(1))
    toks = RngState(7).integers(0, 11, 8)
    a = M.student_forward(s, t, toks)
    b = M.student_forward(s2, t, toks)
    assert np.all(np.isfinite(a.logits))
    assert [h.shape for h in a.hidden] == [(1, 8, 4)] * 2
    assert [x.shape for x in a.attn] == [(1, 8, 4)] * 2
    assert np.array_equal(a.logits, b.logits)
    assert all(np.array_equal(x, y) for x, y in zip(a.hidden, b.hidden))


def test_student_heads_gcd():
    assert M.student_heads(4, 8) == 4
    assert M.student_heads(4, 6) == 2
    assert M.student_heads(4, 3) == 1


def test_zero_upstream_gradient():
    t = _teacher()
    s = M.init_student(t, 4)
    b = _batch(8)
    tr = M.student_forward(s, t, b.inputs)
    g = M.backward(s, t, tr, M.LossGrads(np.zeros_like(tr.logits)))
    assert set(g) == set(s.params)
    assert all(np.all(v == 0) for v in g.values())


def test_backward_rejects_other_tokens():
    t = _teacher()
    s = M.init_student(t, 4)
    b = _batch(9)
    tr = M.student_forward(s, t, b.inputs)
    with pytest.raises(InvalidInputError):
        M.backward(s, t, tr, M.LossGrads(np.zeros_like(tr.logits)), tokens=(b.inputs + 1) % 11)


def test_gradcheck_all_groups_small_model():
    t = _teacher(10)
    s = M.init_student(t, 4, "random", RngState(2))
    err = M.grad_check(s, t, _batch(11), h=1e-5)
    assert err < 1e-5


def test_gradcheck_error_shrinks_like_h_squared():
    t = _teacher(12)
    s = M.init_student(t, 4, "random", RngState(3))
    b = _batch(13, b=1, t=4)
    groups = ["0.wq.L", "1.w1.R", "head"]
    e3, e4, e5 = (M.grad_check(s, t, b, h=h, groups=groups) for h in (1e-3, 1e-4, 1e-5))
    assert 10 < e3 / e4 < 1000
    assert e5 < e3


def test_teacher_untouched_by_gradient_step():
    t = _teacher(14)
    before = t.checksum()
    s = M.init_student(t, 4)
    _, g, _ = M.distill_objective(s, t, _batch(15))
    s.params = {k: v - 0.1 * g[k] for k, v in s.params.items()}
    M.distill_objective(s, t, _batch(15))
    assert t.checksum() == before


def test_compression_ratio_attention_maps():
    cfg = M.ModelConfig(vocab_size=16, num_layers=2, hidden_dim=32, num_heads=4, seq_len=8)
    t = _teacher(0, cfg)
    for r in (2, 4, 8):
        s = M.init_student(t, r)
        counts = M.trainable_map_counts(s)
        for key, (stored, full) in counts.items():
            if key.endswith(("wq", "wk", "wv", "wo")):
                assert abs(stored / full - r * 64 / 32 ** 2) <= 0.02 * r * 64 / 32 ** 2


def test_checkpoint_round_trip(tmp_path):
    t = _teacher(16)
    s = M.init_student(t, 4, "random", RngState(4))
    M.save_checkpoint(t, tmp_path / "t.ckpt")
    M.save_checkpoint(s, tmp_path / "s.ckpt")
    t2 = M.load_checkpoint(tmp_path / "t.ckpt")
    s2 = M.load_checkpoint(tmp_path / "s.ckpt")
    toks = _batch(17).inputs
    assert np.array_equal(M.student_forward(s, t, toks).logits, M.student_forward(s2, t2, toks).logits)
    assert t2.checksum() == t.checksum()
    M.save_checkpoint(s2, tmp_path / "s2.ckpt")
    assert (tmp_path / "s.ckpt").read_bytes() == (tmp_path / "s2.ckpt").read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"nope" + bytes(100))
    with pytest.raises(InvalidInputError):
        M.load_checkpoint(p)


def test_softmax_oracle_agrees_with_attention():
    t = _teacher(18)
    tr = M.forward(t.params, CFG, _batch(19).inputs)
    lc = tr.cache["layers"][0]
    s = (lc["q"] @ lc["k"].transpose(0, 1, 3, 2)) / np.sqrt(4)
    s = np.where(np.tril(np.ones(s.shape[-2:], bool)), s, -np.inf)
    assert np.allclose(softmax_rows(s), lc["p"], atol=1e-14)
