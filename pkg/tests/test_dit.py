from dataclasses import replace

import pytest
import torch

from app.dit import (
    DEFAULT_SAMPLING_STEPS,
    ModelConfig,
    build_model,
    euler_sample,
    flow_pair,
    integrate_euler,
    patchify,
    unpatchify,
    velocity,
)
from app.panels import PanelLayout, build_inpaint_mask, token_ranges
from common.errors import NumericalError, ValidationError
from common.seeding import gaussian


def _canvas(layout: PanelLayout, batch: int = 1, seed: int = 0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, layout.H, 3 * layout.W, generator=g)


def _inputs(config: ModelConfig, batch: int = 2, seed: int = 0):
    layout = config.layout
    z = gaussian((batch, 3, layout.H, 3 * layout.W), seed)
    cond = _canvas(layout, batch, seed + 1)
    cond[..., 2 * layout.W :] = 0.0
    mask = build_inpaint_mask(layout).unsqueeze(0)
    return z, cond, mask


def test_patchify_round_trip_and_count(layout):
    x = _canvas(layout, batch=2)
    tokens = patchify(x, layout.patch)
    assert tokens.shape == (2, 576, 48)
    assert torch.equal(unpatchify(tokens, layout), x)


def test_patchify_token_order(layout):
    x = torch.zeros(3, 64, 144)
    x[:, 4:8, 48 + 8 : 48 + 12] = 1.0  # panel P, grid row 1, col 2
    tokens = patchify(x)
    hot = torch.nonzero(tokens.sum(dim=-1)).flatten().tolist()
    assert hot == [192 + 1 * 12 + 2]

    const = patchify(torch.full((3, 64, 144), 0.3))
    assert bool((const == const[0]).all())


def test_patchify_rejects_bad_shape():
    with pytest.raises(ValidationError):
        patchify(torch.zeros(3, 64, 143))


def test_flow_pair():
    x = torch.rand(3, 8, 24, generator=torch.Generator().manual_seed(0))
    assert torch.equal(flow_pair(x, 5, 0.0).z_t, x)
    fs = flow_pair(x, 5, 1.0)
    assert torch.equal(fs.z_t, fs.eps)
    fs = flow_pair(x, 5, 0.37)
    torch.testing.assert_close(fs.z_t - 0.63 * x - 0.37 * fs.eps, torch.zeros_like(x), rtol=0, atol=1e-6)
    torch.testing.assert_close(fs.u, fs.eps - x)
    assert torch.equal(flow_pair(x, 5, 0.5).eps, flow_pair(x, 5, 0.9).eps)

    with pytest.raises(ValidationError):
        flow_pair(x, 5, 1.5)


def test_forward_shapes_and_row_sums(small_config):
    model = build_model(small_config, seed=0)
    layout = small_config.layout
    l = layout.tokens_per_panel
    for seed in range(10):
        z, cond, mask = _inputs(small_config, batch=2, seed=seed)
        v, rec = model(patchify(z, layout.patch), 0.1 * seed, cond, mask, record=True)
        assert v.shape == (2, 3 * l, 48)
        assert rec.layers == small_config.layers
        for row in rec.rows:
            assert row.shape == (2, small_config.heads, l, layout.total_keys)
            torch.testing.assert_close(row.sum(dim=-1), torch.ones(row.shape[:-1]), rtol=0, atol=1e-5)
        assert rec.stacked("G").shape == (small_config.layers, 2, small_config.heads, l, l)
        assert rec.block(0, "T").shape[-1] == layout.text_tokens


def test_default_config_row_sums():
    config = ModelConfig()
    model = build_model(config, seed=1)
    z, cond, mask = _inputs(config, batch=1)
    _, rec = model(patchify(z), 0.5, cond, mask, record=True)
    assert rec.rows[0].shape == (1, 4, 192, 584)
    for row in rec.rows:
        assert float((row.sum(dim=-1) - 1).abs().max()) <= 1e-5


def test_recording_is_passive(small_config):
    model = build_model(small_config, seed=2)
    z, cond, mask = _inputs(small_config)
    tokens = patchify(z, 4)
    v1, rec = model(tokens, 0.4, cond, mask, record=True)
    v2, none = model(tokens, 0.4, cond, mask, record=False)
    assert none is None and rec is not None
    assert torch.equal(v1, v2)


def test_forward_is_deterministic(small_config):
    model = build_model(small_config, seed=2)
    z, cond, mask = _inputs(small_config)
    a, _ = velocity(model, z, 0.7, cond, mask)
    b, _ = velocity(model, z, 0.7, cond, mask)
    assert torch.equal(a, b)
    assert a.shape == z.shape


def test_build_model_is_seeded(small_config):
    a = build_model(small_config, seed=4).state_dict()
    b = build_model(small_config, seed=4).state_dict()
    c = build_model(small_config, seed=5).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a if a[k].abs().sum() > 0)


def test_f_token_permutation_equivariance(small_config):
    config = replace(small_config, pos_embed=False)
    model = build_model(config, seed=6).to(torch.float64)
    layout = config.layout
    l, l1 = layout.tokens_per_panel, layout.text_tokens
    z, cond, mask = _inputs(config, batch=1)
    tokens = patchify(z.to(torch.float64), 4)
    cond = cond.to(torch.float64)
    mask = mask.to(torch.float64)

    i, j = 3, 17  # two F tokens (fit panel is all-zero in cond and all-one in mask)
    perm = list(range(3 * l))
    perm[2 * l + i], perm[2 * l + j] = perm[2 * l + j], perm[2 * l + i]
    swapped = tokens[:, perm]

    v, rec = model(tokens, 0.3, cond, mask, record=True)
    vs, recs = model(swapped, 0.3, cond, mask, record=True)
    torch.testing.assert_close(vs, v[:, perm])

    key_perm = list(range(layout.total_keys))
    fi, fj = l1 + 2 * l + i, l1 + 2 * l + j
    key_perm[fi], key_perm[fj] = key_perm[fj], key_perm[fi]
    row_perm = list(range(l))
    row_perm[i], row_perm[j] = row_perm[j], row_perm[i]
    for a, b in zip(rec.rows, recs.rows):
        torch.testing.assert_close(b, a[:, :, row_perm][..., key_perm])


def test_forward_validates_inputs(small_config):
    model = build_model(small_config, seed=0)
    z, cond, mask = _inputs(small_config)
    tokens = patchify(z, 4)
    with pytest.raises(ValidationError):
        model(tokens[:, :-1], 0.5, cond, mask)
    with pytest.raises(ValidationError):
        model(tokens, 0.5, cond[..., :-4], mask)
    bad = tokens.clone()
    bad[0, 0, 0] = float("nan")
    with pytest.raises(NumericalError):
        model(bad, 0.5, cond, mask)


@pytest.mark.parametrize("steps", [1, 5, 30])
def test_euler_recovers_target_on_straight_field(steps, layout):
    target = _canvas(layout, batch=1, seed=9)
    z1 = gaussian(tuple(target.shape), 3, dtype=torch.float64)
    target = target.to(torch.float64)

    def field(z: torch.Tensor, t: float) -> torch.Tensor:
        return (z - target) / t

    out = integrate_euler(field, z1, steps)
    assert float((out - target).abs().max()) <= 1e-5


def test_integrate_euler_rejects_zero_steps():
    with pytest.raises(ValidationError):
        integrate_euler(lambda z, t: z, torch.zeros(1), 0)


def test_euler_sample(small_config):
    model = build_model(small_config, seed=7).eval()
    _, cond, mask = _inputs(small_config, batch=1)
    a = euler_sample(model, cond, mask, steps=3, seed=11)
    b = euler_sample(model, cond, mask, steps=3, seed=11)
    assert torch.equal(a, b)
    assert a.shape == cond.shape
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0
    assert DEFAULT_SAMPLING_STEPS == 30


def test_token_ranges_match_record(small_config):
    model = build_model(small_config, seed=0)
    assert model.ranges == token_ranges(small_config.layout)


def test_model_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(d_model=30, heads=4)
    with pytest.raises(ValidationError):
        ModelConfig(layers=0)
    cfg = ModelConfig.tiny()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
