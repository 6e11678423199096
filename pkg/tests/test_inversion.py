import numpy as np
import pytest
import torch

from dreampast import checkpoint
from dreampast.diffusion import Denoiser, make_schedule, to_model_space
from dreampast.inversion import (
    TokenTable,
    add_token,
    choose_few_shot,
    few_shot_loss,
    learn_token,
    learn_tokens,
    token_loss,
)

from conftest import tiny_config


def _shots(corpus, c, n=3):
    return choose_few_shot(corpus, c, n, seed=0)


def test_zero_iters_returns_initialization(tiny_denoiser, tiny_corpus):
    den, s = tiny_denoiser
    tok = learn_token(den, _shots(tiny_corpus, 2), 2, s, iters=0)
    np.testing.assert_array_equal(tok, den.base_embedding([2])[0].numpy())


def test_denoiser_is_untouched(tiny_denoiser, tiny_corpus):
    den, s = tiny_denoiser
    before = checkpoint.state_hash(den)
    learn_tokens(den, {1: _shots(tiny_corpus, 1), 3: _shots(tiny_corpus, 3)}, s, iters=5)
    assert checkpoint.state_hash(den) == before


def test_learning_lowers_few_shot_loss(tiny_denoiser, tiny_corpus):
    den, s = tiny_denoiser
    shots = _shots(tiny_corpus, 4)
    init = den.base_embedding([4])[0].numpy()
    tok = learn_token(den, shots, 4, s, iters=40, lr=5e-2)
    assert few_shot_loss(den, tok, shots, s) < few_shot_loss(den, init, shots, s)


def test_token_gradient_finite_differences(tiny_corpus):
    cfg = tiny_config()
    torch.manual_seed(0)
    den = Denoiser(cfg).double()
    s = make_schedule(cfg)
    x0 = to_model_space(np.stack([im.pixels for im in _shots(tiny_corpus, 1)])).double()
    g = torch.Generator().manual_seed(0)
    tau = torch.randint(0, 100, (x0.shape[0],), generator=g)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    token = den.base_embedding([1])[0].detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(token_loss(den, token, x0, tau, eps, s), token)
    num = torch.zeros_like(token)
    h = 1e-6
    with torch.no_grad():
        for i in range(token.numel()):
            tp, tm = token.clone(), token.clone()
            tp[i] += h
            tm[i] -= h
            num[i] = (token_loss(den, tp, x0, tau, eps, s) - token_loss(den, tm, x0, tau, eps, s)) / (2 * h)
    assert float((grad - num).norm() / num.norm()) < 1e-4


def test_tokens_are_independent_of_batch_mates(tiny_denoiser, tiny_corpus):
    den, s = tiny_denoiser
    alone = learn_tokens(den, {2: _shots(tiny_corpus, 2)}, s, iters=8, seed=4)
    joint = learn_tokens(den, {2: _shots(tiny_corpus, 2), 5: _shots(tiny_corpus, 5)}, s, iters=8, seed=4)
    np.testing.assert_allclose(alone[2], joint[2], rtol=0, atol=1e-6)


def test_learning_is_deterministic(tiny_denoiser, tiny_corpus):
    den, s = tiny_denoiser
    a = learn_token(den, _shots(tiny_corpus, 3), 3, s, iters=6, seed=1)
    b = learn_token(den, _shots(tiny_corpus, 3), 3, s, iters=6, seed=1)
    np.testing.assert_array_equal(a, b)


def test_bad_few_shot_sets(tiny_denoiser, tiny_corpus):
    den, s = tiny_denoiser
    with pytest.raises(ValueError):
        learn_token(den, [], 1, s)
    wrong = [im for im in tiny_corpus if 1 not in im.classes][:2]
    with pytest.raises(ValueError):
        learn_token(den, wrong, 1, s, iters=1)


def test_existing_token_needs_overwrite(tiny_denoiser, tiny_corpus):
    den, s = tiny_denoiser
    table = add_token(TokenTable(), 1, np.zeros(16), step=1)
    with pytest.raises(KeyError):
        learn_token(den, _shots(tiny_corpus, 1), 1, s, iters=1, table=table)
    learn_token(den, _shots(tiny_corpus, 1), 1, s, iters=1, table=table, overwrite=True)
    with pytest.raises(KeyError):
        add_token(table, 1, np.ones(16), step=2)
    t2 = add_token(table, 1, np.ones(16), step=2, overwrite=True)
    assert t2[1][0] == 1.0 and table[1][0] == 0.0


def test_table_is_append_only_and_frozen():
    table = TokenTable()
    for c in range(1, 21):
        table = add_token(table, c, np.full(4, c), step=1 if c <= 15 else c - 14)
    assert len(table) == 20
    assert table.classes() == list(range(1, 21))
    with pytest.raises(ValueError):
        table[3][0] = 7.0


def test_table_roundtrip(tmp_path):
    table = add_token(add_token(TokenTable(), 4, np.arange(3), 1), 2, np.ones(3), 2)
    digest = table.save(tmp_path / "t.ckpt")
    back = TokenTable.load(tmp_path / "t.ckpt")
    assert back.classes() == [2, 4]
    assert back.entries[2].step == 2
    np.testing.assert_array_equal(back[4], [0, 1, 2])
    assert back.save(tmp_path / "u.ckpt") == digest


def test_choose_few_shot(tiny_corpus):
    picked = choose_few_shot(tiny_corpus, 3, 2, seed=5)
    assert len(picked) == 2 and all(3 in im.classes for im in picked)
    assert [im.id for im in picked] == [im.id for im in choose_few_shot(tiny_corpus, 3, 2, seed=5)]
    assert choose_few_shot(tiny_corpus, 99, 2, seed=0) == []
