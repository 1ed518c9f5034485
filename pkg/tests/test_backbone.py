import numpy as np
import pytest

from pipir import autodiff as ad
from pipir.backbone import UNet, UNetConfig, format_census, param_census
from pipir.pip import PipConfig


def small(**kw):
    cfg = dict(levels=2, base_channels=4, blocks_per_level=1, image_size=16, T=3)
    cfg.update(kw)
    return UNet(UNetConfig(**cfg), seed=0)


@pytest.mark.parametrize("bypass", [False, True])
def test_output_shape_matches_input(bypass):
    model = small(bypass_pip=bypass)
    x = ad.tensor(np.random.default_rng(0).uniform(0, 1, (3, 16, 16)))
    assert model(x, np.eye(3)[0]).shape == (3, 16, 16)
    xb = ad.tensor(np.random.default_rng(1).uniform(0, 1, (2, 3, 16, 24)))
    assert model(xb, np.eye(3)[[0, 2]]).shape == (2, 3, 16, 24)


def test_indivisible_input_gets_padding_hint():
    model = small(levels=3)
    with pytest.raises(ad.ContractError, match="pad to 20x16"):
        model(ad.tensor(np.zeros((3, 18, 16))), np.eye(3)[0])


def test_skip_pip_preserves_shape():
    model = small(levels=3)
    seen = []
    model(ad.tensor(np.random.default_rng(2).uniform(0, 1, (3, 16, 16))), np.eye(3)[1],
          skip_hook=lambda l, zin, zout: seen.append((l, zin.shape, zout.shape)))
    assert [s[0] for s in seen] == [1, 0]
    assert all(a == b for _, a, b in seen)


def test_default_prompt_shapes_follow_level_pattern():
    cfgs = UNetConfig(levels=4, base_channels=16, image_size=64).skip_pip_configs()
    assert [(p.c, p.h, p.w) for p in cfgs] == [(16, 16, 16), (32, 8, 8), (64, 4, 4)]


def test_zero_head_gives_global_residual_identity():
    model = small()
    model.head.weight.data[:] = 0
    model.head.bias.data[:] = 0
    x = ad.tensor(np.random.default_rng(3).uniform(0, 1, (3, 16, 16)))
    assert np.array_equal(model(x, np.eye(3)[2]).data, x.data)


def test_gradient_reaches_stem_and_every_prompt():
    with ad.precision("wide"):
        model = small(levels=3)
        rng = np.random.default_rng(4)
        x = ad.tensor(rng.uniform(0, 1, (3, 16, 16)))
        y = rng.uniform(0, 1, (3, 16, 16))
        loss = ad.mean(ad.abs_(ad.sub(model(x, np.eye(3)[0]), ad.tensor(y))))
        ad.backward(loss)
        assert np.abs(model.stem.weight.grad).max() > 0
        for blk in model.pips:
            assert np.abs(blk.prompt.grad).max() > 0
            assert np.abs(blk.bank.grad).max() > 0
        for name, p in model.named_parameters():
            assert p.grad is not None and np.all(np.isfinite(p.grad)), name


def test_census_matches_hand_count():
    # stem 3*4*9+4, enc block LN 8 + 2 convs of 4*4*9+4, down 8*4*9+8,
    # mid LN 16 + 2 convs of 8*8*9+8, up 4*8*9+4, fuse 8*4+4, dec as enc, head 3*4*9+3
    expected = {"stem": 112, "enc": 304, "down": 296, "mid": 1184, "up": 292, "fuse": 36, "dec": 304, "head": 111}
    rows = dict(param_census(small(bypass_pip=True)))
    assert {k: rows[k] for k in expected} == expected
    assert rows["backbone_total"] == sum(expected.values()) == 2639
    assert rows["pip_total"] == 0


def test_census_pip_instance_hand_count():
    c, C, h, T = 4, 4, 4, 3
    qkv = lambda n: 2 * n + (n * n + n) + (9 * n + n)  # noqa: E731
    gdfn = lambda n: 2 * n + 2 * (n * 2 * n + 2 * n) + 2 * (9 * 2 * n + 2 * n) + (2 * n * n + n)  # noqa: E731
    per_pip = (T * c + c * h * h + (C * c + c) + 3 * qkv(c) + gdfn(c) + (c * C + C) + 3 * qkv(C) + 4 + gdfn(C))
    model = small(pip_configs=[PipConfig(c=c, h=h, w=h, T=T)])
    rows = dict(param_census(model))
    assert rows["pip_total"] == per_pip
    assert rows["total"] == 2639 + per_pip
    assert "pip_overhead_%" in format_census(param_census(model))


def test_census_scaling():
    a = dict(param_census(small(bypass_pip=True, base_channels=8)))["backbone_total"]
    b = dict(param_census(small(bypass_pip=True, base_channels=16)))["backbone_total"]
    assert 3.5 < b / a < 4.1
    assert dict(param_census(small()))["total"] > dict(param_census(small(bypass_pip=True)))["total"]


def test_config_validation():
    with pytest.raises(ad.ContractError):
        UNetConfig(levels=1)
    with pytest.raises(ad.ContractError):
        UNetConfig(levels=3, pip_configs=[PipConfig()])
