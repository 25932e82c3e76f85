import numpy as np
import pytest
import torch

from octplaque.models import (
    BackboneConfig,
    FreezeSpec,
    FusionConfig,
    WeightLoadError,
    WeightStore,
    apply_freeze,
    build_single_path,
    build_two_path,
    count_parameters,
    frozen_parameter_names,
    init_fusion_compression,
    load_weights,
    replace_head,
)
from octplaque.models.fusion import randomize_fusion_layer

FAMILIES = ["residual", "dense"]


# analytic parameter counting, independent of the module code


def bottleneck_params(cin, width, cout, proj):
    return (
        2 * cin + cin * width + 2 * width + 9 * width * width + 2 * width + width * cout + (cin * cout if proj else 0)
    )


def dense_layer_params(cin, k):
    return 2 * cin + cin * 4 * k + 2 * 4 * k + 9 * 4 * k * k


def analytic_count(family, blocks, base, k, comp, in_ch, n_classes, full, concat_point=None):
    stem_w = base if family == "residual" else 2 * k
    stem = (49 if full else 9) * in_ch * stem_w
    stages = []  # (params, input width, callable to recount with a doubled input)
    ch = stem_w
    for i, n in enumerate(blocks):
        if family == "residual":
            w, out = base * 2**i, 4 * base * 2**i

            def count(cin, w=w, out=out, n=n, i=i):
                first = bottleneck_params(cin, w, out, i > 0 or cin != out)
                return first + (n - 1) * bottleneck_params(out, w, out, False)

        else:
            entry = ch if i == 0 else int(ch * comp)
            out = entry + n * k

            def count(cin, entry=entry, n=n, i=i):
                trans = 0 if i == 0 else 2 * cin + cin * entry
                return trans + sum(dense_layer_params(entry + j * k, k) for j in range(n))

        stages.append((count, ch))
        ch = out
    tail = 2 * ch + ch * n_classes + n_classes
    if concat_point is None:
        return stem + sum(c(cin) for c, cin in stages) + tail
    split = concat_point - 1
    prefix = stem + sum(c(cin) for c, cin in stages[:split])
    fused_count, fused_in = stages[split]
    suffix = fused_count(2 * fused_in) + sum(c(cin) for c, cin in stages[split + 1 :])
    return 2 * prefix + suffix + tail


def oracle_for(cfg, n_classes, concat_point=None):
    return analytic_count(
        cfg.family.value,
        cfg.stage_block_counts,
        cfg.base_width,
        cfg.growth_rate,
        cfg.compression,
        cfg.in_channels,
        n_classes,
        cfg.scale == "full",
        concat_point,
    )


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("scale", ["desk", "full"])
def test_parameter_count_matches_analytic_oracle(family, scale):
    cfg = getattr(BackboneConfig, scale)(family)
    assert count_parameters(build_single_path(cfg, 2)) == oracle_for(cfg, 2)
    for cc in (2, 3, 4):
        model = build_two_path(cfg, FusionConfig(concat_point=cc), 2)
        assert count_parameters(model) == oracle_for(cfg, 2, cc)


def test_full_residual_is_resnet50_sized():
    cfg = BackboneConfig.full("residual", in_channels=3)
    n = count_parameters(build_single_path(cfg, 1000))
    assert abs(n - 25.6e6) / 25.6e6 < 0.10


@pytest.mark.parametrize("family", FAMILIES)
def test_later_fusion_costs_more_parameters(family):
    # the doubled-input unit widens faster than the duplicated prefix shrinks
    cfg = BackboneConfig.desk(family)
    counts = [count_parameters(build_two_path(cfg, FusionConfig(concat_point=c), 2)) for c in (2, 3, 4)]
    assert counts[0] < counts[1] < counts[2]


# shapes


@pytest.mark.parametrize("family", FAMILIES)
def test_single_path_logit_shape(family):
    model = build_single_path(BackboneConfig.desk(family), 2).eval()
    assert model(torch.rand(5, 1, 54, 54)).shape == (5, 2)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("cc", [2, 3, 4])
def test_two_path_logit_shape(family, cc):
    model = build_two_path(BackboneConfig.desk(family), FusionConfig(concat_point=cc), 3).eval()
    assert model(torch.rand(4, 1, 54, 54), torch.rand(4, 1, 54, 54)).shape == (4, 3)


def test_dense_block_grows_by_k_per_layer():
    cfg = BackboneConfig.desk("dense", growth_rate=7)
    model = build_single_path(cfg, 2)
    block = model.stages[1][1]
    f_in = block[0].bn1.num_features
    y = block(torch.rand(2, f_in, 8, 8))
    assert y.shape[1] == f_in + len(block) * 7


@pytest.mark.parametrize("family", FAMILIES)
def test_fusion_unit_reads_2f_and_emits_single_path_width(family):
    cfg = BackboneConfig.desk(family)
    single = build_single_path(cfg, 2)
    for cc in (2, 3, 4):
        two = build_two_path(cfg, FusionConfig(concat_point=cc), 2)
        unit = dict(two.named_modules())[two.fusion_module_name]
        ref = dict(single.named_modules())[f"stages.{cc - 1}.0"]
        conv, ref_conv = (unit.conv1, ref.conv1) if family == "residual" else (unit.conv, ref.conv)
        assert conv.in_channels == 2 * ref_conv.in_channels
        assert conv.out_channels == ref_conv.out_channels


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        BackboneConfig(stage_block_counts=(2, 0, 2, 2))
    with pytest.raises(ValueError):
        BackboneConfig(compression=0.0)
    with pytest.raises(ValueError):
        BackboneConfig(dropout_keep=1.5)
    with pytest.raises(ValueError):
        FusionConfig(concat_point=1)
    with pytest.raises(ValueError):
        build_single_path(BackboneConfig.desk(), 1)


# head replacement


def test_replace_head_keeps_backbone():
    model = build_single_path(BackboneConfig.desk(), 2, seed=0).eval()
    x = torch.rand(3, 1, 54, 54)
    before = {k: v.clone() for k, v in model.state_dict().items() if not k.startswith("head.")}
    feats = model.features(x)
    old_w = model.head.fc.weight.detach().clone()
    replace_head(model, 2, seed=1)
    assert torch.equal(model.features(x), feats)
    assert not torch.equal(model.head.fc.weight, old_w)
    for k, v in model.state_dict().items():
        if not k.startswith("head."):
            assert torch.equal(v, before[k])
    replace_head(model, 3)
    assert model(x).shape == (3, 3) and model.n_classes == 3


# freezing


def pretrained(model):
    model.weight_source = "proxy-pretrain"
    return model


def test_freeze_requires_pretrained_weights():
    with pytest.raises(WeightLoadError):
        apply_freeze(build_single_path(BackboneConfig.desk(), 2), FreezeSpec.freeze_at(1))
    with pytest.raises(ValueError):
        FreezeSpec(mode="freeze_at", point=3)
    with pytest.raises(ValueError):
        FreezeSpec(mode="full_finetune", point=1)


@pytest.mark.parametrize("family", FAMILIES)
def test_frozen_parameters_never_move(family):
    torch.manual_seed(0)
    model = apply_freeze(pretrained(build_single_path(BackboneConfig.desk(family), 2)), FreezeSpec.freeze_at(1))
    frozen = set(frozen_parameter_names(model, 1))
    initial = {k: v.clone() for k, v in model.state_dict().items()}
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-2)
    model.train()
    for _ in range(100):
        x, y = torch.rand(4, 1, 54, 54), torch.randint(0, 2, (4,))
        opt.zero_grad()
        torch.nn.functional.cross_entropy(model(x), y).backward()
        opt.step()
    state = model.state_dict()
    for name in frozen:
        assert torch.equal(state[name], initial[name]), name
    for name in model.frozen_modules:  # normalisation statistics stay fixed too
        assert torch.equal(state[f"{name}.running_mean"], initial[f"{name}.running_mean"])
    moved = [k for k, p in model.named_parameters() if p.requires_grad and not torch.equal(p, initial[k])]
    assert moved


def test_freeze_points_are_nested():
    model = pretrained(build_single_path(BackboneConfig.desk(), 2))
    one, two = set(frozen_parameter_names(model, 1)), set(frozen_parameter_names(model, 2))
    assert one < two
    assert all(n.startswith(("stem.", "stages.0.")) for n in one)


def test_full_finetune_updates_every_stage():
    torch.manual_seed(1)
    model = apply_freeze(pretrained(build_single_path(BackboneConfig.desk(), 2)), FreezeSpec())
    before = {k: v.clone() for k, v in model.named_parameters()}
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    torch.nn.functional.cross_entropy(model(torch.rand(4, 1, 54, 54)), torch.tensor([0, 1, 0, 1])).backward()
    opt.step()
    for depth in range(6):
        names = [k for k in before if model.param_depth(k) == depth]
        assert any(not torch.equal(before[k], dict(model.named_parameters())[k]) for k in names), depth


def test_from_scratch_rerandomises():
    model = build_single_path(BackboneConfig.desk(), 2, seed=0)
    ref = model.stem[0].weight.detach().clone()
    apply_freeze(model, FreezeSpec(mode="from_scratch"), seed=5)
    assert not torch.equal(model.stem[0].weight, ref)
    assert model.weight_source == "random"
    assert all(p.requires_grad for p in model.parameters())


# fusion initialisation


def test_init_fusion_compression_stacks_kernels():
    w = np.array([[[[1.5], [-2.0]]]])  # [1, 1, F1=2, F2=1]
    out = init_fusion_compression(w)
    assert out.shape == (1, 1, 4, 1)
    assert out[0, 0, :, 0].tolist() == [1.5, -2.0, 1.5, -2.0]
    torch_layout = np.random.default_rng(0).random((5, 3, 1, 1))
    stacked = init_fusion_compression(torch_layout, axis=1)
    assert np.array_equal(stacked[:, :3], torch_layout) and np.array_equal(stacked[:, 3:], torch_layout)
    with pytest.raises(ValueError):
        init_fusion_compression(np.zeros((1, 3, 2, 2)), axis=1)
    with pytest.raises(ValueError):
        init_fusion_compression(np.full((1, 1, 2, 2), np.nan))


def test_sliced_kernel_doubles_linear_response():
    torch.manual_seed(0)
    conv = torch.nn.Conv2d(6, 4, 1, bias=True).double()
    fused = torch.nn.Conv2d(12, 4, 1, bias=True).double()
    with torch.no_grad():
        fused.weight.copy_(torch.from_numpy(init_fusion_compression(conv.weight.numpy(), axis=1)))
        fused.bias.copy_(conv.bias)
    x = torch.rand(2, 6, 5, 5, dtype=torch.float64)
    wx = conv(x) - conv.bias[None, :, None, None]
    assert torch.allclose(fused(torch.cat([x, x], 1)), 2 * wx + conv.bias[None, :, None, None], atol=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("cc", [2, 3, 4])
def test_lenient_load_reuses_prefix_and_doubles_fusion_response(family, cc):
    cfg = BackboneConfig.desk(family)
    single = build_single_path(cfg, 2, seed=3).eval()
    store = WeightStore.from_model(single, "proxy-pretrain")
    two = build_two_path(cfg, FusionConfig(concat_point=cc), 2, seed=9).eval()
    stats = load_weights(two, store, strict=False)
    prefix = [k for k in two.state_dict() if k.startswith("paths.") and two.state_dict()[k].is_floating_point()]
    for k in prefix:
        assert torch.equal(two.state_dict()[k], torch.from_numpy(store.arrays[k.split(".", 2)[2]]))
    assert stats["fusion_sliced"] == len(two.fusion_parameter_names())
    assert stats["fusion_random"] == 0

    # identical inputs in both slots: the fusion convolution responds with twice the single-path response
    unit = dict(two.named_modules())[two.fusion_module_name]
    ref_unit = dict(single.named_modules())[f"stages.{cc - 1}.0"]
    conv_name = "conv1" if family == "residual" else "conv"
    captured = {}
    getattr(unit, conv_name).register_forward_hook(lambda m, i, o: captured.__setitem__("fused", (i[0], o)))
    getattr(ref_unit, conv_name).register_forward_hook(lambda m, i, o: captured.__setitem__("single", (i[0], o)))
    x = torch.rand(2, 1, 54, 54)
    with torch.no_grad():
        two(x, x)
        single(x)
    fin, fout = captured["fused"]
    sin, sout = captured["single"]
    half = fin.shape[1] // 2
    assert torch.allclose(fin[:, :half], fin[:, half:])
    assert torch.allclose(fin[:, :half], sin, atol=1e-5)
    assert torch.allclose(fout, 2 * sout, atol=1e-4)


def test_no_init_leaves_fusion_kernels_random():
    cfg = BackboneConfig.desk()
    store = WeightStore.from_model(build_single_path(cfg, 2, seed=3), "proxy-pretrain")
    two = build_two_path(cfg, FusionConfig(concat_point=3, sliced_init=False), 2, seed=9)
    stats = load_weights(two, store, strict=False)
    assert stats["fusion_random"] > 0
    w = two.stages["2"][0].conv1.weight.detach().numpy()
    half = w.shape[1] // 2
    assert not np.allclose(w[:, :half], w[:, half:])
    before = w.copy()
    randomize_fusion_layer(two, seed=1)
    assert not np.array_equal(two.stages["2"][0].conv1.weight.detach().numpy(), before)


def test_zeroing_one_path_changes_logits():
    two = build_two_path(BackboneConfig.desk(), FusionConfig(), 2, seed=0).eval()
    x = torch.rand(3, 1, 54, 54)
    with torch.no_grad():
        assert not torch.allclose(two(x, x), two(x, torch.zeros_like(x)))
        assert not torch.allclose(two(x, x), two(torch.zeros_like(x), x))


# weight stores


@pytest.mark.parametrize("family", FAMILIES)
def test_store_round_trip(tmp_path, family):
    model = build_single_path(BackboneConfig.desk(family), 2, seed=4).eval()
    WeightStore.from_model(model, "trained", note="x").save(tmp_path / "w")
    loaded = WeightStore.load(tmp_path / "w")
    assert loaded.source == "trained" and loaded.metadata == {"note": "x"}
    fresh = build_single_path(BackboneConfig.desk(family), 2, seed=99).eval()
    load_weights(fresh, loaded, strict=True)
    x = torch.rand(2, 1, 54, 54)
    assert torch.equal(fresh(x), model(x))


def test_strict_load_lists_offending_paths():
    store = WeightStore.from_model(build_single_path(BackboneConfig.desk(), 3), "trained")
    store.arrays["bogus.weight"] = np.zeros(2, np.float32)
    with pytest.raises(WeightLoadError) as err:
        load_weights(build_single_path(BackboneConfig.desk(), 2), store, strict=True)
    assert "head.fc.weight" in str(err.value) and "bogus.weight" in str(err.value)


def test_lenient_load_averages_rgb_stem_and_keeps_random_head():
    rgb = build_single_path(BackboneConfig.desk(in_channels=3), 10, seed=1)
    store = WeightStore.from_model(rgb, "external")
    gray = build_single_path(BackboneConfig.desk(), 2, seed=2)
    stats = load_weights(gray, store, strict=False)
    assert stats["channel_averaged"] == 1 and stats["head_random"] == 2
    expected = store.arrays["stem.0.weight"].mean(axis=1, keepdims=True)
    assert np.allclose(gray.stem[0].weight.detach().numpy(), expected)
    assert gray.weight_source == "external"


def test_store_rejects_truncated_blob(tmp_path):
    WeightStore.from_model(build_single_path(BackboneConfig.desk(), 2), "trained").save(tmp_path)
    blob = sorted(tmp_path.glob("*.f32"))[0]
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(WeightLoadError):
        WeightStore.load(tmp_path)


# numerics


def test_eval_forward_is_deterministic():
    model = build_single_path(BackboneConfig.desk("dense"), 2).eval()
    x = torch.rand(3, 1, 54, 54)
    assert torch.equal(model(x), model(x))


def test_dropout_keeps_expectation():
    torch.manual_seed(0)
    head = build_single_path(BackboneConfig.desk(dropout_keep=0.8), 2).head
    x = torch.rand(1, head.fc.in_features, 1, 1).expand(20000, -1, -1, -1)
    head.eval()
    assert torch.equal(head.dropout(x.mean(dim=(2, 3))), x.mean(dim=(2, 3)))
    head.train()
    pooled = x.mean(dim=(2, 3))
    dropped = head.dropout(pooled)
    kept = (dropped != 0).double().mean().item()
    assert abs(kept - 0.8) < 0.01
    assert torch.allclose(dropped.mean(0), pooled[0], rtol=0.05)


@pytest.mark.parametrize("family", FAMILIES)
def test_gradients_match_finite_differences(family):
    cfg = BackboneConfig.desk(
        family, stage_block_counts=(1, 1, 1, 1), base_width=2, growth_rate=4, dropout_keep=1.0, input_size=16
    )
    model = build_single_path(cfg, 2, seed=0).double().eval()
    x = torch.rand(2, 1, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    y = torch.tensor([0, 1])

    def loss():
        return torch.nn.functional.cross_entropy(model(x), y)

    model.zero_grad()
    loss().backward()
    params = dict(model.named_parameters())
    rng = np.random.default_rng(0)
    names = sorted(params)
    eps = 1e-6
    for _ in range(20):
        name = names[rng.integers(len(names))]
        p = params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = loss().item()
            p[idx] = orig - eps
            down = loss().item()
            p[idx] = orig
        numeric = (up - down) / (2 * eps)
        analytic = p.grad[idx].item()
        assert abs(numeric - analytic) <= 1e-3 * max(abs(numeric), abs(analytic), 1e-6), name
