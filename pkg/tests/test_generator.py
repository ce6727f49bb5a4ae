import numpy as np
import pytest

from wdistill import generator as G
from wdistill import model as M
from wdistill import tensor as tn
from wdistill.generator import GeneratorParams
from wdistill.model import ModelConfig, WeightKey
from wdistill.tensor import Tensor

from oracles import naive_subset_transform, naive_vector_transform, numeric_grad, rel_error

TEACHER = ModelConfig(2, 2, 16, heads=2, vocab=10, max_len=6)
STUDENT = ModelConfig(2, 1, 8, heads=2, vocab=10, max_len=6)


def _gp(rng, it, ot, is_, os_, nl, random_wb=True):
    return GeneratorParams(
        W_I=tn.parameter(rng.uniform(-1, 1, (it, is_))) if it != is_ else None,
        W_O=tn.parameter(rng.uniform(-1, 1, (ot, os_))) if ot != os_ else None,
        W_L=tn.parameter(rng.uniform(-1, 1, (nl, 1))) if nl > 1 else None,
        W=tn.parameter(rng.uniform(-1, 1, (is_, os_)) if random_wb else np.ones((is_, os_))),
        B=tn.parameter(rng.uniform(-1, 1, (is_, os_)) if random_wb else np.zeros((is_, os_))),
    )


def _np(t):
    return None if t is None else t.data


def test_transform_subset_base_to_half_shapes():
    rng = np.random.default_rng(0)
    gp = _gp(rng, 512, 2048, 256, 1024, 3)
    subset = Tensor(rng.normal(scale=0.02, size=(512, 2048, 3)))
    a = tn.mode_product(subset, gp.W_I, 0)
    assert a.shape == (256, 2048, 3)
    b = tn.mode_product(a, gp.W_O, 1)
    assert b.shape == (256, 1024, 3)
    assert tn.mode_product(b, gp.W_L, 2).shape == (256, 1024, 1)
    assert G.transform_subset(subset, gp).shape == (256, 1024)


def test_zero_subset_gives_zero_at_init(rng):
    gp = _gp(rng, 8, 16, 4, 8, 3, random_wb=False)
    out = G.transform_subset(Tensor(np.zeros((8, 16, 3))), gp)
    assert np.array_equal(out.data, np.zeros((4, 8)))


def test_transform_subset_matches_naive_oracle(rng):
    gp = _gp(rng, 8, 16, 4, 8, 3)
    subset = rng.uniform(-1, 1, (8, 16, 3))
    got = G.transform_subset(Tensor(subset), gp).data
    want = naive_subset_transform(subset, *(map(_np, (gp.W_I, gp.W_O, gp.W_L, gp.W, gp.B))))
    assert np.max(np.abs(got - want)) <= 1e-12


def test_sequential_equals_fused_contraction(rng):
    gp = _gp(rng, 6, 5, 3, 4, 2)
    subset = rng.uniform(-1, 1, (6, 5, 2))
    fused = np.einsum("jkl,ja,kb,lc->ab", subset, gp.W_I.data, gp.W_O.data, gp.W_L.data)
    seq = tn.mode_product(tn.mode_product(tn.mode_product(Tensor(subset), gp.W_I, 0), gp.W_O, 1), gp.W_L, 2)
    assert np.max(np.abs(seq.data[..., 0] - fused)) <= 1e-12


def test_init_output_is_tanh_of_contraction(rng):
    gp = _gp(rng, 6, 5, 3, 4, 2, random_wb=False)
    subset = rng.uniform(-1, 1, (6, 5, 2))
    direct = np.tanh(np.einsum("jkl,ja,kb,l->ab", subset, gp.W_I.data, gp.W_O.data, gp.W_L.data[:, 0]))
    np.testing.assert_allclose(G.transform_subset(Tensor(subset), gp).data, direct, rtol=0, atol=1e-12)


def test_zero_subset_returns_shift_exactly(rng):
    gp = _gp(rng, 6, 5, 3, 4, 2)
    out = G.transform_subset(Tensor(np.zeros((6, 5, 2))), gp)
    assert np.array_equal(out.data, gp.B.data)


def test_transform_subset_shape_mismatch(rng):
    gp = _gp(rng, 8, 16, 4, 8, 3)
    with pytest.raises(tn.ShapeError):
        G.transform_subset(Tensor(np.zeros((8, 16, 2))), gp)
    with pytest.raises(tn.ShapeError):
        G.transform_subset(Tensor(np.zeros((7, 16, 3))), gp)


def test_transform_vector_zero_bias(rng):
    gp = _gp(rng, 1, 6, 1, 3, 2, random_wb=False)
    out = G.transform_vector(Tensor(np.zeros((6, 2))), GeneratorParams(W=tn.parameter(np.ones(3)), B=tn.parameter(np.zeros(3)), W_O=gp.W_O, W_L=gp.W_L))
    assert np.array_equal(out.data, np.zeros(3))


def test_transform_vector_same_size_uses_layer_map_only(rng):
    wl = rng.uniform(-1, 1, (2, 1))
    gp = GeneratorParams(W=tn.parameter(np.ones(4)), B=tn.parameter(np.zeros(4)), W_L=tn.parameter(wl))
    subset = rng.uniform(-1, 1, (4, 2))
    np.testing.assert_allclose(G.transform_vector(Tensor(subset), gp).data, np.tanh(subset @ wl[:, 0]), atol=1e-15)


def test_transform_vector_matches_naive_oracle(rng):
    wo, wl = rng.uniform(-1, 1, (6, 3)), rng.uniform(-1, 1, (2, 1))
    w, b = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
    gp = GeneratorParams(W=tn.parameter(w), B=tn.parameter(b), W_O=tn.parameter(wo), W_L=tn.parameter(wl))
    subset = rng.uniform(-1, 1, (6, 2))
    got = G.transform_vector(Tensor(subset), gp).data
    assert np.max(np.abs(got - naive_vector_transform(subset, wo, wl, w, b))) <= 1e-12


def test_generator_param_gradients(rng):
    gp = _gp(rng, 5, 4, 3, 2, 2)
    subset = Tensor(rng.uniform(-1, 1, (5, 4, 2)))
    probe = Tensor(rng.uniform(-1, 1, (3, 2)))

    def loss():
        return tn.sum_all(tn.mul(G.transform_subset(subset, gp), probe))

    loss().backward()
    for name, t in gp.items():
        num = numeric_grad(lambda: loss().item(), t.data)
        assert rel_error(t.grad, num) < 1e-4, name


def test_build_initial_values():
    gen = G.build(TEACHER, STUDENT, "all", seed=7)
    for _, gp in gen.entries.values():
        assert np.all(gp.W.data == 1.0) and np.all(gp.B.data == 0.0)


def test_build_same_shape_only_scale_shift():
    gen = G.build(TEACHER, TEACHER, "all", seed=0)
    for _, gp in gen.entries.values():
        assert [name for name, _ in gp.items()] == ["W", "B"]


def test_build_shapes_for_width_and_depth_change():
    gen = G.build(TEACHER, STUDENT, "all", seed=0)
    sp, gp = gen.entries[WeightKey("decoder", 0, "ffn.W1")]
    assert sp.source_layers == (0, 1)
    assert gp.W_I.shape == (16, 8) and gp.W_O.shape == (64, 32) and gp.W_L.shape == (2, 1)
    assert gp.W.shape == (8, 32)
    _, emb = gen.entries[WeightKey("encoder", -1, "embed")]
    assert emb.W_I is None and emb.W_O.shape == (16, 8) and emb.W_L is None
    _, out = gen.entries[WeightKey("decoder", -1, "output_proj")]
    assert out.W_I.shape == (16, 8) and out.W_O is None
    _, enc_w1 = gen.entries[WeightKey("encoder", 1, "ffn.W1")]
    assert enc_w1.W_L is None


def test_build_is_seed_deterministic():
    a, b = G.build(TEACHER, STUDENT, seed=7), G.build(TEACHER, STUDENT, seed=7)
    sa, sb = a.state_dict(), b.state_dict()
    assert list(sa) == list(sb) and all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_build_rejects_non_divisible_depth():
    with pytest.raises(M.ConfigError):
        G.build(ModelConfig(3, 2, 8, heads=2, vocab=10), ModelConfig(2, 1, 8, heads=2, vocab=10))


def test_generate_all_gives_complete_student():
    teacher = M.init_params(TEACHER, 0)
    student = G.generate(G.build(TEACHER, STUDENT, "all"), teacher, STUDENT)
    assert set(student) == set(M.param_keys(STUDENT))
    M.validate_params(student, STUDENT)


def test_generate_encoder_only():
    teacher = M.init_params(TEACHER, 0)
    student = G.generate(G.build(TEACHER, STUDENT, "encoder"), teacher)
    assert student and all(k.part == "encoder" for k in student)
    assert not any(k.class_id in ("embed", "pos") for k in student)


def test_strict_mode_switches():
    gen = G.build(TEACHER, STUDENT, "all", transfer_vectors=False)
    assert all(len(gp.W.shape) == 2 for _, gp in gen.entries.values())
    gen = G.build(TEACHER, STUDENT, "all", transfer_norms=False)
    assert not any("norm" in k.class_id for k in gen.entries)
    assert WeightKey("encoder", 0, "ffn.b1") in gen.entries


def test_teacher_receives_no_gradient(rng):
    teacher = M.init_params(TEACHER, 0)
    gen = G.build(TEACHER, STUDENT, "all")
    student = G.generate(gen, teacher)
    src = rng.integers(3, 10, size=(2, 4))
    tgt = np.array([[1, 4, 5], [1, 6, 7]])
    logits = M.forward(student, STUDENT, src, tgt)
    tn.sum_all(logits).backward()
    assert all(t.grad is None for t in teacher.values())
    assert all(t.grad is not None for t in gen.parameters())
