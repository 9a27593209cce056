import numpy as np
import pytest

from core.co4_block import (ClassifierHead, Co4BlockConfig, Co4Layer, Co4Model, PatchEmbedding,
                            StandardLayer, StandardModel, attention, attention_map, build_model,
                            triadic_backward, triadic_forward, triadic_modulate)
from core.errors import ContractError, DimensionError, ParameterError
from core.metrics import cross_entropy
from core.modulation import ModulationKind
from core.tensor import (Parameter, Tensor, count_macs, gradient_check, layer_norm, sum_all,
                         track_kinks)


def _cfg(**kw):
    base = dict(embed_dim=16, latents=4, heads=1, layers=1, dropout_p=0.0, use_positional=False)
    base.update(kw)
    return Co4BlockConfig(**base).validate()


def test_config_validation():
    with pytest.raises(ParameterError):
        Co4BlockConfig(embed_dim=10, heads=3).validate()
    with pytest.raises(ParameterError):
        Co4BlockConfig(latents=0).validate()
    with pytest.raises(ParameterError):
        Co4BlockConfig.from_dict({"embed_dim": 8, "bogus": 1})
    cfg = Co4BlockConfig.from_dict({"embed_dim": 8, "modulation": "tm2"})
    assert cfg.modulation is ModulationKind.TM2
    assert Co4BlockConfig.from_dict(cfg.to_dict()) == cfg


def test_triadic_zero_inputs():
    zeros = Tensor(np.zeros((3, 4)))
    out = triadic_modulate(zeros, Tensor(np.zeros((5, 4))), Tensor(np.zeros((5, 4))))
    for t in (out.q_m, out.k_m, out.v_m):
        assert np.all(t.value == 0.0)


def test_triadic_hand_evaluated_recurrence():
    one = Tensor([[1.0]])
    out = triadic_modulate(one, one, one)
    assert out.k_m.item() == 5.0
    assert out.q_m.item() == 5.0
    assert out.v_m.item() == 6.0


def test_triadic_token_permutation():
    rng = np.random.default_rng(0)
    q, k, v = rng.normal(size=(3, 6)), rng.normal(size=(7, 6)), rng.normal(size=(7, 6))
    perm = rng.permutation(7)
    q_m, k_m, v_m, _ = triadic_forward(q, k, v, ModulationKind.COOPERATION)
    q_p, k_p, v_p, _ = triadic_forward(q, k[perm], v[perm], ModulationKind.COOPERATION)
    assert np.allclose(q_p, q_m, atol=1e-12)
    assert np.allclose(k_p, k_m[perm], atol=1e-12)
    assert np.allclose(v_p, v_m[perm], atol=1e-12)


def test_cooperation_outputs_bounded():
    rng = np.random.default_rng(1)
    outs = triadic_forward(rng.normal(0, 3, (4, 8)), rng.normal(0, 3, (9, 8)),
                           rng.normal(0, 3, (9, 8)), ModulationKind.COOPERATION)[:3]
    for a in outs:
        assert a.min() >= 0.0 and a.max() <= 6.0


def test_triadic_shape_mismatch():
    with pytest.raises(DimensionError):
        triadic_modulate(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))))


@pytest.mark.parametrize("kind", list(ModulationKind))
@pytest.mark.parametrize("seed", range(20))
def test_triadic_gradient(kind, seed):
    rng = np.random.default_rng([4, seed])
    for _ in range(50):
        latents, tokens, width = (int(n) for n in rng.integers(1, 6, 3))
        Q = Parameter(rng.uniform(-1, 1, (latents, width)), "Q")
        K = Parameter(rng.uniform(-1, 1, (tokens, width)), "K")
        V = Parameter(rng.uniform(-1, 1, (tokens, width)), "V")
        weights = [Tensor(rng.normal(size=p.shape)) for p in (Q, K, V)]

        def loss():
            out = triadic_modulate(Q, K, V, kind)
            return (sum_all(out.q_m * weights[0]) + sum_all(out.k_m * weights[1])
                    + sum_all(out.v_m * weights[2]))

        with track_kinks() as kinks:
            loss()
        if kinks.min_distance < 1e-3:
            continue
        result = gradient_check(loss, [Q, K, V])
        assert result.passed(1e-6), (latents, tokens, width, result)
        return
    pytest.fail("every drawn configuration sat next to a kink")


@pytest.mark.parametrize("kind", list(ModulationKind))
def test_triadic_partials_do_not_change_values(kind):
    rng = np.random.default_rng(12)
    q, k, v = rng.normal(0, 2, (2, 3, 5)), rng.normal(0, 2, (2, 6, 5)), rng.normal(0, 2, (2, 6, 5))
    plain = triadic_forward(q, k, v, kind)
    fused = triadic_forward(q, k, v, kind, keep_partials=True)
    for a, b in zip(plain[:3], fused[:3]):
        assert np.array_equal(a, b)
    assert plain[3].dk is None and fused[3].dk is not None


def test_triadic_backward_needs_saved_partials():
    q, k = np.ones((2, 3)), np.ones((4, 3))
    *outs, cache = triadic_forward(q, k, k, ModulationKind.COOPERATION)
    with pytest.raises(ContractError):
        triadic_backward(cache, *(np.ones_like(o) for o in outs))


def test_attention_single_token_weight_is_one():
    rng = np.random.default_rng(2)
    q, k, v = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(1, 4)))
    assert np.all(attention_map(q, k).value == 1.0)
    assert np.allclose(attention(q, k, v).value, np.repeat(v.value, 3, axis=0))


def test_attention_identical_keys_are_uniform():
    rng = np.random.default_rng(3)
    k = Tensor(np.tile(rng.normal(size=(1, 4)), (5, 1)))
    v = Tensor(rng.normal(size=(5, 4)))
    out = attention(Tensor(rng.normal(size=(2, 4))), k, v).value
    assert np.allclose(out, v.value.mean(axis=0))


def test_score_matrix_is_latents_by_tokens():
    rng = np.random.default_rng(0)
    scores = attention_map(Tensor(rng.normal(size=(8, 16))), Tensor(rng.normal(size=(64, 16))))
    assert scores.shape == [8, 64]


def test_co4_layer_shapes():
    rng = np.random.default_rng(0)
    layer = Co4Layer(_cfg(heads=2), rng)
    latents = Tensor(rng.normal(size=(4, 16)))
    for n in (1, 5, 33):
        assert layer(latents, Tensor(rng.normal(size=(n, 16)))).shape == [4, 16]
    batched = layer(Tensor(rng.normal(size=(3, 4, 16))), Tensor(rng.normal(size=(3, 9, 16))))
    assert batched.shape == [3, 4, 16]


def test_co4_layer_zero_weights_collapse_to_layer_norm():
    rng = np.random.default_rng(0)
    layer = Co4Layer(_cfg(), rng)
    for proj in (layer.q_proj, layer.k_proj, layer.v_proj):
        proj.weight.assign(np.zeros(proj.weight.shape))
    latents = Tensor(rng.normal(size=(4, 16)))
    out = layer(latents, Tensor(rng.normal(size=(6, 16))))
    expected = layer_norm(latents, layer.norm1.gain, layer.norm1.bias).value
    assert np.allclose(out.value, expected, atol=1e-12)


def test_co4_layer_token_permutation_invariance():
    rng = np.random.default_rng(5)
    layer = Co4Layer(_cfg(heads=2), rng)
    latents = Tensor(rng.normal(size=(4, 16)))
    tokens = rng.normal(size=(12, 16))
    base = layer(latents, Tensor(tokens)).value
    for _ in range(10):
        shuffled = layer(latents, Tensor(tokens[rng.permutation(12)])).value
        assert np.max(np.abs(shuffled - base)) <= 1e-9


def test_standard_layer_parameter_parity():
    cfg = _cfg(embed_dim=256)
    co4 = Co4Layer(cfg, np.random.default_rng(0))
    std = StandardLayer(cfg, np.random.default_rng(0))
    assert co4.parameter_count() == std.parameter_count()


def test_standard_layer_single_token():
    rng = np.random.default_rng(1)
    layer = StandardLayer(_cfg(), rng)
    x = Tensor(rng.normal(size=(1, 16)))
    expected = layer_norm(x + layer.v_proj(x), layer.norm1.gain, layer.norm1.bias).value
    assert np.allclose(layer(x).value, expected, atol=1e-12)
    with pytest.raises(TypeError):
        layer(x, x)


def test_modulation_elementwise_count():
    cfg = _cfg(embed_dim=32, latents=4)
    rng = np.random.default_rng(0)
    layer = Co4Layer(cfg, rng)
    with count_macs() as counter:
        layer(Tensor(rng.normal(size=(4, 32))), Tensor(rng.normal(size=(16, 32))))
    assert counter.elementwise["modulation"] == 3 * 4 * 16 * 32 == 6144


def test_cifar_parameter_counts():
    small = Co4Model(Co4BlockConfig(use_positional=False), patch_dim=48, num_tokens=64)
    assert small.parameter_count() == 215_050
    assert abs(small.parameter_count() - 215_000) / 215_000 < 0.01
    deep = Co4Model(Co4BlockConfig(layers=6, use_positional=False), patch_dim=48, num_tokens=64)
    assert abs(deep.parameter_count() - 1_200_000) / 1_200_000 < 0.01
    std = StandardModel(Co4BlockConfig(use_positional=False), patch_dim=48, num_tokens=64)
    assert abs(std.parameter_count() - small.parameter_count()) / small.parameter_count() < 0.01


def test_patch_embedding_zero_weights():
    cfg = _cfg(use_positional=True)
    embed = PatchEmbedding(cfg, 48, 64, np.random.default_rng(0))
    embed.proj.weight.assign(np.zeros((48, 16)))
    out = embed(np.ones((64, 48)))
    assert np.allclose(out.value, embed.positional.value)
    with pytest.raises(DimensionError):
        embed(np.ones((64, 47)))


def test_eval_mode_disables_dropout():
    model = Co4Model(_cfg(dropout_p=0.5), patch_dim=48, num_tokens=64, seed=3).eval()
    x = np.random.default_rng(0).normal(size=(2, 64, 48))
    assert np.array_equal(model(x).value, model(x).value)


def test_classifier_head():
    rng = np.random.default_rng(0)
    head = ClassifierHead(16, 10, rng)
    head.fc.weight.assign(np.zeros((16, 10)))
    head.fc.bias.assign(np.arange(10.0))
    assert head(Tensor(rng.normal(size=(4, 16)))).value.tolist() == list(np.arange(10.0))
    single = Tensor(rng.normal(size=(1, 16)))
    head2 = ClassifierHead(16, 3, rng)
    assert np.allclose(head2(single).value, head2.fc(single).value[0])


def test_model_patch_permutation_invariance_without_positional():
    model = Co4Model(_cfg(), patch_dim=48, num_tokens=64, seed=1).eval()
    rng = np.random.default_rng(2)
    x = rng.normal(size=(64, 48))
    base = model(x).value
    assert np.max(np.abs(model(x[rng.permutation(64)]).value - base)) <= 1e-9


def test_build_model_unknown_arch():
    with pytest.raises(ParameterError):
        build_model("rnn", _cfg(), patch_dim=48, num_tokens=64)


@pytest.mark.parametrize("seed", range(20))
def test_tiny_model_end_to_end_gradient(seed):
    rng = np.random.default_rng([9, seed])
    for attempt in range(40):
        latents, tokens, classes = (int(rng.integers(lo, hi)) for lo, hi in ((1, 3), (2, 5), (2, 4)))
        cfg = _cfg(embed_dim=4, latents=latents, num_classes=classes, use_positional=True)
        model = build_model("co4", cfg, patch_dim=3, num_tokens=tokens,
                            seed=100 * seed + attempt)
        x = rng.normal(size=(2, tokens, 3))
        labels = rng.integers(0, classes, 2)

        def loss():
            return cross_entropy(model(x), labels)

        with track_kinks() as kinks:
            loss()
        if kinks.min_distance < 1e-3:
            continue
        result = gradient_check(loss, model.parameters())
        assert result.passed(1e-5), (latents, tokens, classes, result)
        return
    pytest.fail("every drawn model sat next to a kink")
