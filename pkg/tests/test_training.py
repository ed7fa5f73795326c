import math

import numpy as np
import pytest

from fouriernat import training as Tr
from fouriernat.data import EOS, PAD, TaskSpec, generate
from fouriernat.model import FourierNAT, ModelConfig, VocabularyError, build_model
from fouriernat.tensor import ConfigError, Parameter


def small_cfg(**kw):
    base = dict(d=16, n_layers=1, n_heads=2, d_ff=32, vocab=14, t_max=8, s_max=16)
    base.update(kw)
    return ModelConfig(**base)


def small_data(n=64, kind="copy", seed=0):
    return generate(TaskSpec(kind=kind, content_vocab=10, min_len=2, max_len=5, seed=seed, t_max=8), n)


def test_lr_schedule_values():
    assert Tr.lr_at(4000, 512, 4000) == pytest.approx(6.98771242968684e-4, rel=1e-12)
    # linear warmup, then inverse square root
    assert Tr.lr_at(2000, 512, 4000) == pytest.approx(0.5 * Tr.lr_at(4000, 512, 4000))
    assert Tr.lr_at(16000, 512, 4000) == pytest.approx(0.5 * Tr.lr_at(4000, 512, 4000))
    with pytest.raises(ValueError):
        Tr.lr_at(0, 512, 4000)


def test_adam_constant_gradient_closed_form():
    # with a constant gradient the bias-corrected moments are exactly g and g^2,
    # so each step moves by lr * g / (|g| + eps)
    p = Parameter("x", np.array([1.0]))
    st = Tr.OptimState()
    g, lr, eps = 0.5, 0.01, 1e-9
    for _ in range(3):
        p.grad = np.array([g])
        Tr.adam_step([p], st, lr, eps=eps)
    assert p.data[0] == pytest.approx(1.0 - 3 * lr * g / (g + eps), abs=1e-14)
    assert st.step == 3


def test_adam_first_step_is_sign_times_lr():
    p = Parameter("w", np.array([0.0, 0.0]))
    p.grad = np.array([3.0, -1e-3])
    Tr.adam_step([p], Tr.OptimState(), 0.1)
    np.testing.assert_allclose(p.data, [-0.1, 0.1], rtol=1e-5)


def test_adam_aborts_without_touching_params():
    a, b = Parameter("a", np.ones(2)), Parameter("b", np.ones(2))
    a.grad = np.array([1.0, 1.0])
    b.grad = np.array([np.nan, 0.0])
    st = Tr.OptimState()
    with pytest.raises(Tr.NumericalAbort, match="b"):
        Tr.adam_step([a, b], st, 0.1)
    assert np.all(a.data == 1.0) and st.step == 0


def test_clip_grad_norm():
    p = Parameter("p", np.zeros(2))
    p.grad = np.array([3.0, 4.0])
    assert Tr.clip_grad_norm([p], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(p.grad, [0.6, 0.8])


def test_nat_loss_uniform_logits():
    logits = np.zeros((1, 2, 4))
    assert float(Tr.nat_loss(logits, [[1, 2]], [[False, False]]).data) == pytest.approx(2 * math.log(4))


def test_nat_loss_ignores_padded_positions():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(1, 4, 6))
    gold = np.array([[4, 5, EOS, PAD]])
    pad = gold == PAD
    base = float(Tr.nat_loss(logits, gold, pad).data)
    logits[0, 3] = 1e6 * rng.normal(size=6)
    assert float(Tr.nat_loss(logits, gold, pad).data) == pytest.approx(base)
    # a gold sequence shorter than the decoder is padded implicitly
    assert float(Tr.nat_loss(logits, gold[:, :3], pad[:, :3]).data) == pytest.approx(base)


def test_nat_loss_errors():
    with pytest.raises(ValueError):
        Tr.nat_loss(np.zeros((1, 2, 4)), [[4, 4, 4]], [[False] * 3])
    with pytest.raises(VocabularyError):
        Tr.nat_loss(np.zeros((1, 2, 4)), [[1, 7]], [[False, False]])


def test_zero_steps_records_once(tmp_path):
    m = FourierNAT(small_cfg(), seed=0)
    before = m.state_dict()
    res = Tr.train_loop(m, small_data(), Tr.TrainConfig(max_steps=0, val_size=8), out_dir=tmp_path)
    assert [r["step"] for r in res.records] == [0]
    assert all(np.array_equal(before[n], p.data) for n, p in m.params.items())
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert lines[0] == "step,train_loss,val_metric,wall_clock_s" and len(lines) == 2


def test_empty_training_set_is_error():
    with pytest.raises(ValueError):
        Tr.train_loop(FourierNAT(small_cfg()), [], Tr.TrainConfig(max_steps=1))


def test_bad_train_config():
    with pytest.raises(ConfigError):
        Tr.TrainConfig(warmup_steps=0).validate()


def _run(tmp_path, name, seed=0, steps=12):
    m = FourierNAT(small_cfg(), seed=seed)
    tc = Tr.TrainConfig(max_steps=steps, warmup_steps=4, eval_interval=5, tokens_per_batch=64,
                        val_size=8, seed=seed)
    res = Tr.train_loop(m, small_data(), tc, out_dir=tmp_path / name)
    return m, res


def test_training_is_deterministic(tmp_path):
    m1, r1 = _run(tmp_path, "a")
    m2, r2 = _run(tmp_path, "b")
    assert (tmp_path / "a" / "curves.csv").read_bytes() == (tmp_path / "b" / "curves.csv").read_bytes()
    for n, p in m1.params.items():
        assert p.data.tobytes() == m2.params[n].data.tobytes()
    assert [r["step"] for r in r1.records] == [0, 5, 10, 12]
    assert (tmp_path / "a" / "last.fnat").exists() and (tmp_path / "a" / "best.fnat").exists()


def test_different_seed_changes_run(tmp_path):
    _run(tmp_path, "a", seed=0)
    _run(tmp_path, "b", seed=1)
    assert (tmp_path / "a" / "curves.csv").read_bytes() != (tmp_path / "b" / "curves.csv").read_bytes()


def test_gates_receive_gradient_and_move(tmp_path):
    m, res = _run(tmp_path, "g", steps=10)
    assert res.gate_grad_norm_total > 0
    moved = sum(int((np.abs(g.data - 1.0) > 1e-4).sum()) for g in m.gate_parameters())
    assert moved > 0


def test_nogate_arch_keeps_gates_fixed(tmp_path):
    m = FourierNAT(small_cfg(arch="fouriernat-nogate"), seed=0)
    tc = Tr.TrainConfig(max_steps=5, warmup_steps=2, tokens_per_batch=64, val_size=4)
    res = Tr.train_loop(m, small_data(), tc)
    assert res.gate_grad_norm_total == 0.0
    assert all(not g.data.any() for g in m.gate_parameters())


def test_loss_falls_on_copy():
    m = FourierNAT(small_cfg(dropout=0.0), seed=0)
    tc = Tr.TrainConfig(max_steps=120, warmup_steps=30, eval_interval=60, tokens_per_batch=128,
                        val_size=16, dropout=0.0)
    res = Tr.train_loop(m, small_data(256), tc)
    assert res.records[-1]["train_loss"] < 0.6 * res.records[0]["train_loss"]


def test_ar_training_runs(tmp_path):
    m = build_model(small_cfg(arch="ar-baseline"), seed=0)
    tc = Tr.TrainConfig(max_steps=4, warmup_steps=2, tokens_per_batch=64, val_size=4)
    res = Tr.train_loop(m, small_data(), tc)
    assert res.steps == 4 and math.isfinite(res.records[-1]["train_loss"])


def test_reveal_mask_keeps_one_masked():
    from fouriernat.data import make_batches
    from fouriernat.tensor import Rng
    (batch,) = make_batches(small_data(16), 8, 16, Rng(0))
    masked = Tr._reveal_mask(batch, 8, 1.0, Rng(1))
    for i in range(len(batch)):
        n = int(batch.gold_lengths[i]) - 1
        assert masked[i, :n].any()
        assert masked[i, n:].all()


def test_distill_replaces_targets():
    teacher = build_model(small_cfg(arch="ar-baseline"), seed=3)
    exs = small_data(10)
    out, truncated = Tr.distill_generate(teacher, exs, batch_size=4)
    assert [e.src for e in out] == [e.src for e in exs]
    assert all(e.tgt[-1] == EOS and len(e.tgt) <= 8 for e in out)
    assert 0 <= truncated <= 10
