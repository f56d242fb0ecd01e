import math

import numpy as np
import pytest

from fishbev.decoder import NUM_CLASSES, FocalConfig, focal_loss, init_decoder, mask_head_decode, total_loss
from fishbev.tensor_core import ParamStore, Tensor, finite_diff_check, ops


def logits_with_pt(pt, label, shape=(2, 3)):
    """Logits whose softmax gives probability pt to `label`, rest spread evenly."""
    S = np.full((NUM_CLASSES,) + shape, math.log((1 - pt) / (NUM_CLASSES - 1)) if pt < 1 else -1e3)
    S[label] = math.log(pt) if pt < 1 else 0.0
    return S


def test_zero_params_give_zero_logits():
    p = ParamStore(0)
    init_decoder(p, 8)
    for n in p.names():
        p[n].data[...] = 0.0
    S = mask_head_decode(Tensor(np.random.default_rng(0).normal(size=(16, 8))), p, (4, 4), (8, 8))
    assert S.shape == (6, 8, 8)
    assert np.all(S.data == 0.0)


def test_identity_upsample_and_shape():
    p = ParamStore(0)
    init_decoder(p, 8)
    p["dec.refine.k"].data[...] = 0.0
    Q = np.random.default_rng(1).normal(size=(12, 8))
    S = mask_head_decode(Q, p, (3, 4))
    expect = (Q @ p["dec.proj.w"].data).T.reshape(6, 3, 4)
    np.testing.assert_allclose(S.data, expect, atol=1e-12)
    p2 = ParamStore(0)
    init_decoder(p2, 4)
    assert mask_head_decode(np.zeros((2500, 4)), p2, (50, 50), (200, 200)).shape == (6, 200, 200)


def test_focal_examples():
    Y = np.full((2, 3), 2)
    assert focal_loss(logits_with_pt(1.0, 2), Y).item() == pytest.approx(0.0, abs=1e-300)
    ce = focal_loss(logits_with_pt(0.5, 2), Y, FocalConfig(alpha=1.0, gamma=0.0)).item()
    assert ce == pytest.approx(math.log(2), abs=1e-12)
    v = focal_loss(logits_with_pt(0.9, 2), Y).item()
    assert v == pytest.approx(0.25 * 0.01 * -math.log(0.9), rel=1e-9)
    assert v == pytest.approx(2.63401e-4, abs=1e-9)


def test_focal_excludes_void_and_checks_labels():
    rng = np.random.default_rng(0)
    S = rng.normal(size=(6, 4, 4))
    Y = rng.integers(1, 6, size=(4, 4))
    Y[0, 0] = 0
    S2 = S.copy()
    S2[:, 0, 0] = 100.0 * np.arange(6)  # logits at a void pixel are ignored
    assert focal_loss(S2, Y).item() == focal_loss(S, Y).item()
    # mean is over the 15 scored pixels only
    per_pixel = [focal_loss(S[:, i:i + 1, j:j + 1], Y[i:i + 1, j:j + 1]).item()
                 for i in range(4) for j in range(4) if Y[i, j]]
    assert focal_loss(S, Y).item() == pytest.approx(np.mean(per_pixel), abs=1e-15)
    with pytest.raises(ValueError):
        focal_loss(S, np.full((4, 4), 6))
    with pytest.raises(ValueError):
        focal_loss(S, np.full((4, 4), -1))


def test_focal_monotone_in_pt():
    pts = np.linspace(0.01, 0.999, 200)
    vals = [focal_loss(logits_with_pt(p, 3, (1, 1)), np.array([[3]])).item() for p in pts]
    assert np.all(np.diff(vals) < 0)
    assert min(vals) >= 0


def test_total_loss_examples():
    assert total_loss(Tensor(0.5), Tensor(1.0), 0.0).item() == 0.5
    assert total_loss(Tensor(0.5), Tensor(1.0), 0.01).item() == pytest.approx(0.51, abs=1e-15)
    with pytest.raises(ValueError):
        total_loss(Tensor(0.5), Tensor(1.0), -1.0)


def test_decoder_loss_gradient():
    p = ParamStore(4)
    init_decoder(p, 5)
    rng = np.random.default_rng(0)
    Q = rng.normal(size=(9, 5))
    Y = rng.integers(0, 6, size=(6, 6))
    kl = Tensor(0.7)

    def obj(ps):
        return total_loss(focal_loss(mask_head_decode(Q, ps, (3, 3), (6, 6)), Y), kl, 0.01)

    assert finite_diff_check(obj, p) < 1e-4


def test_batched_focal_matches_loop():
    rng = np.random.default_rng(3)
    S = rng.normal(size=(2, 6, 3, 3))
    Y = rng.integers(1, 6, size=(2, 3, 3))
    a = focal_loss(S, Y).item()
    b = (focal_loss(S[0], Y[0]).item() + focal_loss(S[1], Y[1]).item()) / 2
    assert a == pytest.approx(b, abs=1e-14)
    assert ops.sum(Tensor(S)).shape == ()
