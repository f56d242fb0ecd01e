import numpy as np
import pytest

from fishbev.drme import (
    PatchEmbedConfig,
    drme_forward,
    init_drme,
    multiscale_fuse,
    patch_embed,
    patchify,
    tokens_to_map,
    toy_backbone,
)
from fishbev.tensor_core import ParamStore, Tensor, finite_diff_check, ops
from fishbev.tensor_core.ops import ShapeError


def make(cfg=None, seed=0):
    cfg = cfg or PatchEmbedConfig(patch=8, dim=8, out_channels=6)
    p = ParamStore(seed)
    init_drme(p, cfg)
    return cfg, p


def test_token_count_and_zero_image():
    cfg, p = make()
    tok = patch_embed(np.zeros((3, 64, 64)), p, cfg)
    assert tok.shape == (65, 8)
    # zero pixels and zero bias give zero patch tokens
    np.testing.assert_array_equal(tok.data[1:], 0.0)
    np.testing.assert_array_equal(tok.data[0], p["drme.cls"].data[0])


def test_patchify_row_major():
    img = np.arange(2 * 4 * 6, dtype=float).reshape(1, 2, 4, 6)
    out = patchify(img, 2)
    assert out.shape == (1, 6, 8)
    # patch (row 1, col 2) is index 1*3+2 = 5
    np.testing.assert_array_equal(out[0, 5], img[0, :, 2:4, 4:6].reshape(-1))
    with pytest.raises(ShapeError):
        patchify(np.zeros((1, 3, 10, 8)), 4)


def test_patch_locality():
    cfg, p = make()
    rng = np.random.default_rng(3)
    img = rng.normal(size=(3, 64, 64))
    a = patch_embed(img, p, cfg).data
    img2 = img.copy()
    img2[:, 8:16, 16:24] += 1.0  # patch row 1, col 2
    b = patch_embed(img2, p, cfg).data
    changed = np.any(a != b, axis=1)
    assert np.flatnonzero(changed).tolist() == [1 + 1 * 8 + 2]


def test_zero_blocks_are_identity():
    cfg, p = make()
    for name in p.names():
        if ".block" in name and (name.endswith("w2") or name.endswith("b2")):
            p[name].data[...] = 0.0
    tok = patch_embed(np.random.default_rng(0).normal(size=(3, 64, 64)), p, cfg)
    for F in toy_backbone(tok, p, cfg):
        np.testing.assert_array_equal(F.data, tok.data)


def test_backbone_finite_over_seeds():
    cfg = PatchEmbedConfig(patch=8, dim=8, out_channels=6)
    for seed in range(100):
        _, p = make(cfg, seed)
        img = np.random.default_rng(seed).normal(size=(1, 3, 32, 32)) * 5
        states = toy_backbone(patch_embed(img, p, cfg), p, cfg)
        assert len(states) == 4
        assert all(np.all(np.isfinite(s.data)) for s in states)


def test_tokens_to_map_round_trip_and_class_token():
    rng = np.random.default_rng(0)
    F = rng.normal(size=(2, 1 + 12, 5))
    m = tokens_to_map(Tensor(F), 3, 4).data
    assert m.shape == (2, 5, 3, 4)
    # inverse written out independently
    back = m.transpose(0, 2, 3, 1).reshape(2, 12, 5)
    np.testing.assert_array_equal(back, F[:, 1:])
    G = F.copy()
    G[:, 0] = 1e6
    np.testing.assert_array_equal(tokens_to_map(Tensor(G), 3, 4).data, m)
    with pytest.raises(ShapeError):
        tokens_to_map(Tensor(F), 4, 4)


def test_fuse_level_count():
    cfg, p = make()
    with pytest.raises(ValueError):
        multiscale_fuse([Tensor(np.zeros((8, 4, 4)))] * 3, p, cfg)


def test_fpn_oracle_identity_laterals():
    cfg = PatchEmbedConfig(patch=8, dim=3, out_channels=3, scales=(1.0, 1.0, 1.0, 1.0))
    _, p = make(cfg)
    for i in range(4):
        p[f"drme.lateral{i}.k"].data[...] = np.eye(3)[:, :, None, None]
    p["drme.smooth.k"].data[...] = 0.0
    rng = np.random.default_rng(2)
    maps = [rng.normal(size=(3, 4, 4)) for _ in range(4)]
    out = multiscale_fuse([Tensor(m) for m in maps], p, cfg).data
    np.testing.assert_allclose(out, sum(maps), atol=1e-12)


def test_fpn_output_size():
    cfg, p = make()
    out = drme_forward(np.random.default_rng(0).normal(size=(2, 3, 64, 64)), p, cfg)
    assert out.shape == (2, 6, 16, 16)
    assert np.all(np.isfinite(out.data))


def test_gradient_reaches_patch_embedding():
    cfg = PatchEmbedConfig(patch=4, dim=4, out_channels=3)
    _, p = make(cfg, seed=1)
    img = np.random.default_rng(1).normal(size=(1, 3, 16, 16))
    w = np.random.default_rng(2).normal(size=(1, 3, 8, 8))

    def f(params):
        return ops.sum(drme_forward(img, params, cfg) * w)

    err = finite_diff_check(f, p, h=1e-6, names=["drme.patch.w", "drme.patch.b", "drme.cls"])
    assert err < 1e-4
