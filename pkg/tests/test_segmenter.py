import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from dreampast.segmenter import (
    LossWeights,
    SegModel,
    TrainSample,
    extend_head,
    forward,
    frozen_copy,
    load_segmenter,
    loss_ali,
    loss_ce,
    loss_kd,
    loss_total,
    poly_lr,
    predict,
    pseudo_label,
    pseudo_label_from_logits,
    save_segmenter,
    train_segmenter,
)


def central_diff(fn, x, h=1e-6):
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        lp = fn(x).item()
        flat[i] = old - h
        lm = fn(x).item()
        flat[i] = old
        grad.view(-1)[i] = (lp - lm) / (2 * h)
    return grad


def rel_err(fn, x):
    x = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    with torch.no_grad():
        num = central_diff(fn, x.detach().clone())
    return float((g - num).norm() / num.norm().clamp_min(1e-12))


@pytest.fixture
def model():
    torch.manual_seed(0)
    return SegModel([3, 1], image_size=(16, 16), width=8)


def test_forward_shape_and_determinism(model):
    img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    a, b = forward(model, img), forward(model, img)
    assert a.shape == (1, 3, 16, 16)
    assert torch.equal(a, b)
    assert torch.isfinite(a).all()
    mask = predict(model, [img])[0]
    assert set(np.unique(mask)) <= {0, 3, 1}
    with pytest.raises(ValueError):
        forward(model, np.zeros((8, 8, 3), np.float32))


def test_channel_mapping(model):
    mask = np.array([[0, 1], [3, 7]], dtype=np.uint8)
    np.testing.assert_array_equal(model.encode_mask(mask), [[0, 2], [1, 0]])
    np.testing.assert_array_equal(model.decode(np.array([0, 1, 2])), [0, 3, 1])


def test_extend_head_is_conservative(model):
    x = torch.rand(2, 3, 16, 16)
    new = extend_head(model, [5, 2], seed=1)
    assert new.classes == [3, 1, 5, 2] and new.step == model.step + 1
    with torch.no_grad():
        torch.testing.assert_close(new(x)[:, :3], model(x), rtol=0, atol=0)
    for (k, v), (k2, v2) in zip(model.trunk.state_dict().items(), new.trunk.state_dict().items()):
        assert torch.equal(v, v2)
    w_new = new.head.weight[3:]
    assert 0 < float(w_new.detach().std()) < 5e-3
    assert torch.all(new.head.bias[3:] == 0)
    again = extend_head(model, [5, 2], seed=1)
    assert torch.equal(again.head.weight, new.head.weight)


def test_extend_head_zero_and_overlap(model):
    same = extend_head(model, [])
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(same(x), model(x))
    with pytest.raises(ValueError):
        extend_head(model, [1])


def test_extend_15_to_16_classes():
    m = SegModel(list(range(1, 16)), image_size=(16, 16), width=8)
    assert extend_head(m, [16]).num_channels == 17


def test_permuting_new_channels_only_moves_their_logits(model):
    new = extend_head(model, [5, 2], seed=3)
    swapped = extend_head(model, [5, 2], seed=3)
    with torch.no_grad():
        swapped.head.weight[3:] = new.head.weight[[4, 3]]
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        a, b = new(x), swapped(x)
    assert torch.equal(a[:, :3], b[:, :3])
    assert torch.equal(a[:, 3], b[:, 4]) and torch.equal(a[:, 4], b[:, 3])


def test_pseudo_label_hand_case():
    # per pixel old logits over (bg, c1, c2)
    logits = torch.tensor([[2.0, 0, 0], [0, 3.0, 0], [0, 0, 0.1], [0, 2.0, 2.0]]).T.reshape(1, 3, 2, 2)
    step_mask = torch.tensor([[[0, 0], [0, 3]]])
    r = pseudo_label_from_logits(logits, step_mask, 0.7)
    mu_expected = [
        math.exp(2) / (math.exp(2) + 2),
        math.exp(3) / (math.exp(3) + 2),
        math.exp(0.1) / (math.exp(0.1) + 2),
        math.exp(2) / (1 + 2 * math.exp(2)),
    ]
    np.testing.assert_allclose(r.confidence.flatten().numpy(), mu_expected, rtol=1e-6)
    assert r.labels.flatten().tolist() == [0, 1, 2, 1]
    assert r.area_old.flatten().tolist() == [False, True, False, False]
    assert r.area_new.flatten().tolist() == [False, False, False, True]
    assert r.area_bg.flatten().tolist() == [True, True, True, False]


def test_pseudo_label_threshold_bounds():
    logits = torch.zeros(1, 3, 2, 2)
    for thr in (0.0, 1.0, -0.5, 1.5):
        with pytest.raises(ValueError):
            pseudo_label_from_logits(logits, torch.zeros(1, 2, 2, dtype=torch.long), thr)


def test_pseudo_label_low_confidence_and_no_background(model):
    img = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    r = pseudo_label(model, img, np.zeros((16, 16), np.int64), conf_threshold=0.999)
    assert not r.area_old.any()
    r = pseudo_label(model, img, np.ones((16, 16), np.int64), conf_threshold=0.01)
    assert not r.area_old.any()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5), st.floats(0.05, 0.95))
def test_area_partition(seed, k_old, thr):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, k_old, 4, 4, generator=g) * 3
    mask = torch.randint(0, k_old + 2, (2, 4, 4), generator=g) * (torch.rand(2, 4, 4, generator=g) < 0.5)
    r = pseudo_label_from_logits(logits, mask, thr)
    assert not (r.area_old & ~r.area_bg).any()
    assert not (r.area_old & r.area_new).any()
    assert torch.all(r.area_new | r.area_bg)
    assert not (r.area_new & r.area_bg).any()
    assert torch.all((r.confidence >= 0) & (r.confidence <= 1))
    assert not (r.area_old & (r.labels == 0)).any()


def test_ce_examples():
    labels = torch.tensor([[[0, 1], [2, 1]]])
    onehot = F.one_hot(labels, 3).permute(0, 3, 1, 2).double()
    area = torch.ones(1, 2, 2, dtype=torch.bool)
    assert loss_ce(10 * onehot, labels, area) < 1e-4
    assert loss_ce(20 * onehot, labels, area) < loss_ce(10 * onehot, labels, area)
    torch.testing.assert_close(loss_ce(torch.zeros(1, 3, 2, 2), labels, area), torch.tensor(math.log(3)))
    empty = loss_ce(torch.randn(1, 3, 2, 2), labels, torch.zeros_like(area))
    assert empty.item() == 0.0
    with pytest.raises(ValueError):
        loss_ce(torch.zeros(1, 3, 2, 2), labels + 1, area)


def test_kd_examples():
    p_old = torch.tensor([0.8, 0.2]).log()
    p_new = torch.tensor([0.6, 0.4]).log()
    lo = torch.cat([torch.zeros(1), p_old]).view(1, 3, 1, 1)
    ln = torch.cat([torch.zeros(1), p_new, torch.zeros(1)]).view(1, 4, 1, 1)
    assert loss_kd(ln, lo).item() == pytest.approx(0.0582, abs=1e-4)
    assert loss_kd(lo, lo).abs().max() < 1e-6
    far_old = torch.tensor([0.0, 50.0, -50.0]).view(1, 3, 1, 1)
    far_new = torch.tensor([0.0, -50.0, 50.0, 0.0]).view(1, 4, 1, 1)
    assert loss_kd(far_new, far_old).item() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        loss_kd(torch.zeros(1, 2, 1, 1), torch.zeros(1, 1, 1, 1))


def test_kd_ignores_background_channel():
    lo = torch.tensor([0.0, 1.0, 2.0]).view(1, 3, 1, 1)
    ln = torch.tensor([9.0, 1.0, 2.0, -3.0]).view(1, 4, 1, 1)
    assert loss_kd(ln, lo).abs().item() < 1e-6


def test_ali_examples():
    # omega = softmax(0, ln 2, 0) = (0.25, 0.5, 0.25); weighted = 1.375; max = 3
    lo = torch.tensor([0.0, math.log(2.0), 0.0]).view(1, 3, 1, 1)
    ln = torch.tensor([1.0, 2.0, 0.5, 3.0]).view(1, 4, 1, 1)
    area = torch.ones(1, 1, 1, dtype=torch.bool)
    assert loss_ali(ln, lo, area).item() == pytest.approx(1.625, abs=1e-6)
    assert loss_ali(ln, lo, ~area).item() == 0.0
    flat = torch.full((1, 4, 1, 1), 0.7)
    assert loss_ali(flat, lo, area).item() == pytest.approx(0.0, abs=1e-6)
    sharp_old = torch.tensor([0.0, 80.0, 0.0]).view(1, 3, 1, 1)
    peak_new = torch.tensor([0.0, 5.0, 1.0, 2.0]).view(1, 4, 1, 1)
    assert loss_ali(peak_new, sharp_old, area).item() == pytest.approx(0.0, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    ln, lo = torch.randn(2, 5, 3, 3, generator=g) * 4, torch.randn(2, 3, 3, 3, generator=g) * 4
    area = torch.rand(2, 3, 3, generator=g) < 0.5
    assert (loss_ali(ln, lo, area) >= -1e-6).all()
    assert (loss_kd(ln, lo) >= -1e-6).all()
    labels = torch.randint(0, 5, (2, 3, 3), generator=g)
    assert loss_ce(ln, labels, area) >= 0


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients_match_finite_differences(seed):
    g = torch.Generator().manual_seed(seed)
    k_new, k_old = 5, 3
    ln = torch.randn(1, k_new, 2, 2, generator=g, dtype=torch.float64) * 2
    lo = torch.randn(1, k_old, 2, 2, generator=g, dtype=torch.float64) * 2
    labels = torch.randint(0, k_new, (1, 2, 2), generator=g)
    area = torch.tensor([[[True, False], [True, True]]])
    assert rel_err(lambda z: loss_ce(z, labels, area), ln) < 1e-4
    assert rel_err(lambda z: loss_ali(z, lo, area).sum(), ln) < 1e-4
    assert rel_err(lambda z: loss_kd(z, lo).sum(), ln) < 1e-4

    step_mask = torch.tensor([[[0, 4], [0, 0]]])
    pseudo = pseudo_label_from_logits(lo, step_mask, 0.3)
    w = LossWeights(ce=0.7, ali=1.3, kd=0.9)
    assert rel_err(lambda z: loss_total(z, lo, step_mask, pseudo, w)[0], ln) < 1e-4


def test_total_reduces_to_plain_ce():
    g = torch.Generator().manual_seed(0)
    ln = torch.randn(2, 4, 3, 3, generator=g)
    lo = torch.randn(2, 3, 3, 3, generator=g)
    labels = torch.randint(0, 4, (2, 3, 3), generator=g)
    labels[labels < 3] = 0
    pseudo = pseudo_label_from_logits(lo, labels, 0.999999)
    w = LossWeights(ali=0.0, kd=0.0)
    total, _ = loss_total(ln, lo, labels, pseudo, w)
    assert not pseudo.area_old.any()
    torch.testing.assert_close(total, loss_ce(ln, labels, labels != 0))


def test_total_empty_indicator():
    ln = torch.randn(1, 4, 2, 2)
    lo = torch.zeros(1, 3, 2, 2)  # uniform -> mu = 1/3 < threshold
    labels = torch.zeros(1, 2, 2, dtype=torch.long)
    total, stats = loss_total(ln, lo, labels, None, LossWeights(ce=1.0, ali=0.0, kd=0.0))
    assert stats["ce"] == 0.0 and total.item() == 0.0


def test_step_one_equals_plain_ce():
    g = torch.Generator().manual_seed(0)
    ln = torch.randn(2, 4, 3, 3, generator=g)
    labels = torch.randint(0, 4, (2, 3, 3), generator=g)
    total, stats = loss_total(ln, None, labels, None, LossWeights())
    assert total.item() == F.cross_entropy(ln, labels).item()
    assert stats["ali"] == 0.0 and stats["kd"] == 0.0


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        loss_total(torch.zeros(1, 2, 1, 1), None, torch.zeros(1, 1, 1, dtype=torch.long), None, LossWeights(ce=-1))
    with pytest.raises(ValueError):
        LossWeights(kd=float("nan")).validate()


def test_poly_lr():
    assert poly_lr(0.01, 0, 100) == 0.01
    assert poly_lr(0.01, 100, 100) == 0.0
    assert poly_lr(0.01, 50, 100) == pytest.approx(0.01 * 0.5**0.9)


def _samples(n, n_replay, size=16, k=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n + n_replay):
        px = rng.random((size, size, 3)).astype(np.float32)
        lab = (px[..., 0] > 0.5).astype(np.int64) * rng.integers(1, k)
        out.append(TrainSample(px, lab, replay=i >= n))
    return out


def test_training_is_finite_and_deterministic():
    def run():
        torch.manual_seed(0)
        m = SegModel([1, 2], image_size=(16, 16), width=8)
        hist = train_segmenter(m, None, _samples(20, 0), LossWeights(), epochs=5, batch_size=8, lr=1e-2, seed=3)
        return m, hist

    (m1, h1), (m2, h2) = run(), run()
    assert len(h1) == 15
    assert all(math.isfinite(h["total"]) for h in h1)
    assert [h["total"] for h in h1] == [h["total"] for h in h2]
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)


def test_fifty_step_incremental_run_is_finite():
    torch.manual_seed(0)
    base = SegModel([1, 2], image_size=(16, 16), width=8)
    new = extend_head(base, [3])
    hist = train_segmenter(new, frozen_copy(base), _samples(8, 8, k=4), LossWeights(), epochs=25, batch_size=8, lr=1e-3, seed=0)
    assert len(hist) == 50
    assert all(math.isfinite(h[t]) for h in hist for t in ("ce", "ali", "kd", "total"))


def test_replay_frequency_in_batches():
    torch.manual_seed(0)
    base = SegModel([1], image_size=(16, 16), width=8)
    new = extend_head(base, [2])
    n, r = 30, 10
    hist = train_segmenter(new, frozen_copy(base), _samples(n, r), LossWeights(), epochs=4, batch_size=8, lr=1e-3, seed=0)
    per_epoch = {}
    for h in hist:
        per_epoch[h["epoch"]] = per_epoch.get(h["epoch"], 0) + h["n_replay"]
    assert set(per_epoch.values()) == {r}
    frac = sum(h["n_replay"] for h in hist) / sum(h["batch"] for h in hist)
    assert frac == pytest.approx(r / (n + r))
    # batches are mixed rather than segregated by origin
    assert any(0 < h["n_replay"] < h["batch"] for h in hist)


def test_batch_size_scales_down():
    torch.manual_seed(0)
    m = SegModel([1], image_size=(16, 16), width=8)
    hist = train_segmenter(m, None, _samples(5, 0, k=2), LossWeights(), epochs=2, batch_size=24, lr=1e-2, seed=0)
    assert [h["batch"] for h in hist] == [5, 5]


def test_non_finite_loss_aborts():
    torch.manual_seed(0)
    m = SegModel([1], image_size=(16, 16), width=8)
    with torch.no_grad():
        m.head.bias[0] = float("nan")
    with pytest.raises(FloatingPointError):
        train_segmenter(m, None, _samples(4, 0, k=2), LossWeights(), epochs=1, batch_size=4, lr=1e-2, seed=0)


def test_segmenter_checkpoint_roundtrip(model, tmp_path):
    digest = save_segmenter(tmp_path / "s.ckpt", model, {"note": 1})
    back, header = load_segmenter(tmp_path / "s.ckpt")
    assert header["extra"] == {"note": 1}
    assert back.classes == model.classes and back.image_size == model.image_size
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(back(x), model.eval()(x))
    assert save_segmenter(tmp_path / "t.ckpt", back, {"note": 1}) == digest
