import numpy as np
import pytest
import torch

from dreampast.diffusion import Denoiser, DiffusionConfig, make_schedule
from dreampast.scenario import CorpusSpec, generate_corpus


def tiny_config(**kw) -> DiffusionConfig:
    base = dict(base_channels=8, emb_dim=16, image_size=(32, 32), num_train_steps=100, sampler_steps=5, train_iters=20, batch_size=4)
    base.update(kw)
    return DiffusionConfig(**base)


@pytest.fixture
def tiny_denoiser():
    """Randomly initialized small denoiser, flagged as usable for sampling."""
    cfg = tiny_config()
    torch.manual_seed(0)
    den = Denoiser(cfg).freeze()
    den.trained = True
    return den, make_schedule(cfg)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(CorpusSpec(num_classes=5, images_per_class=4, image_size=(32, 32), seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_run_config(mode="full", **kw):
    """A 3-step scenario small enough to run end to end in a few seconds."""
    from dreampast.replay import ReplayBudget
    from dreampast.runner import RunConfig
    from dreampast.scenario import ScenarioSpec

    base = dict(
        mode=mode,
        pretrain_corpus=CorpusSpec(num_classes=10, images_per_class=2, image_size=(32, 32), style="pretrain"),
        downstream_corpus=CorpusSpec(num_classes=4, images_per_class=6, image_size=(32, 32), seed=3),
        scenario=ScenarioSpec(2, 1, 3),
        diffusion=tiny_config(train_iters=2),
        budget=ReplayBudget(total_size=10),
        epochs_base=2,
        epochs_step=1,
        batch_size=8,
        seg_width=8,
        token_iters=2,
        token_shots=2,
        exemplars_per_class=2,
    )
    base.update(kw)
    return RunConfig(**base)


CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
