"""Per-class token embeddings learned on the frozen denoiser (textual inversion)."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import checkpoint
from .diffusion import Denoiser, Schedule, add_noise, diffusion_loss, to_model_space
from .scenario import LabeledImage

DEFAULT_ITERS = 500
DEFAULT_LR = 5e-2
DEFAULT_SHOTS = 4


@dataclass(frozen=True)
class TokenEntry:
    embedding: np.ndarray
    step: int


@dataclass(frozen=True)
class TokenTable:
    entries: Mapping[int, TokenEntry] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self.entries

    def __getitem__(self, class_id: int) -> np.ndarray:
        return self.entries[class_id].embedding

    def classes(self) -> list[int]:
        return sorted(self.entries)

    def save(self, path: str | Path) -> str:
        tensors = {str(c): self.entries[c].embedding for c in self.classes()}
        header = {"kind": "tokens", "steps": {str(c): self.entries[c].step for c in self.classes()}}
        return checkpoint.save(path, tensors, header)

    @classmethod
    def load(cls, path: str | Path) -> "TokenTable":
        header, tensors = checkpoint.load(path)
        if header.get("kind") != "tokens":
            raise checkpoint.CheckpointError(f"{path} is not a token table")
        entries = {int(c): TokenEntry(tensors[c], int(header["steps"][c])) for c in tensors}
        return cls(entries)


def add_token(table: TokenTable, class_id: int, embedding, step: int, overwrite: bool = False) -> TokenTable:
    if class_id in table and not overwrite:
        raise KeyError(f"class {class_id} already has a token (pass overwrite=True to replace it)")
    emb = np.array(embedding, dtype=np.float32).reshape(-1)
    emb.setflags(write=False)
    entries = dict(table.entries)
    entries[class_id] = TokenEntry(emb, step)
    return TokenTable(entries)


def token_loss(denoiser: Denoiser, token: torch.Tensor, x0: torch.Tensor, tau: torch.Tensor, eps: torch.Tensor, schedule: Schedule) -> torch.Tensor:
    """Diffusion loss on few-shot images with the denoiser conditioned on `token`."""
    cond = token.reshape(1, -1).expand(x0.shape[0], -1)
    return diffusion_loss(denoiser, x0, tau, eps, schedule, cond=cond)


def choose_few_shot(images: Sequence[LabeledImage], class_id: int, shots: int, seed: int) -> list[LabeledImage]:
    pool = [im for im in images if class_id in im.classes]
    if not pool:
        return []
    rng = np.random.default_rng([seed, class_id])
    idx = rng.choice(len(pool), size=min(shots, len(pool)), replace=False)
    return [pool[i] for i in sorted(idx)]


def learn_tokens(
    frozen_denoiser: Denoiser,
    few_shot: Mapping[int, Sequence[LabeledImage]],
    schedule: Schedule,
    iters: int = DEFAULT_ITERS,
    lr: float = DEFAULT_LR,
    seed: int = 0,
    table: TokenTable | None = None,
    overwrite: bool = False,
) -> dict[int, np.ndarray]:
    """Learn one token per class jointly in a single batch.

    Each class draws its own timesteps and noise from a generator seeded by
    (seed, class_id), and its loss only reaches its own token, so the result
    per class does not depend on which other classes share the batch.
    """
    classes = sorted(few_shot)
    for c in classes:
        if not few_shot[c]:
            raise ValueError(f"empty few-shot set for class {c}")
        if table is not None and c in table and not overwrite:
            raise KeyError(f"class {c} already has a token (pass overwrite=True to re-learn it)")
        missing = [im.id for im in few_shot[c] if c not in im.classes]
        if missing:
            raise ValueError(f"few-shot images {missing} do not contain class {c}")
    if not classes:
        return {}

    frozen_denoiser.eval()
    for p in frozen_denoiser.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        init = frozen_denoiser.base_embedding(classes).clone()
    if iters == 0:
        return {c: init[k].numpy().copy() for k, c in enumerate(classes)}

    tokens = init.clone().requires_grad_(True)
    data = [to_model_space(np.stack([im.pixels for im in few_shot[c]])) for c in classes]
    gens = [torch.Generator().manual_seed(int(seed) * 1000003 + int(c)) for c in classes]
    opt = torch.optim.Adam([tokens], lr=lr)
    for _ in range(iters):
        xs, taus, epss, conds = [], [], [], []
        for k, x0 in enumerate(data):
            n = x0.shape[0]
            taus.append(torch.randint(0, schedule.num_steps, (n,), generator=gens[k]))
            epss.append(torch.randn(x0.shape, generator=gens[k]))
            xs.append(x0)
            conds.append(tokens[k].expand(n, -1))
        x0, tau, eps, cond = torch.cat(xs), torch.cat(taus), torch.cat(epss), torch.cat(conds)
        pred = frozen_denoiser(add_noise(x0, tau, eps, schedule), tau, cond, None)
        per_sample = ((pred - eps) ** 2).flatten(1).mean(1)
        # Sum of per-class means: each token sees exactly its own class's loss gradient.
        loss = torch.stack([chunk.mean() for chunk in per_sample.split([d.shape[0] for d in data])]).sum()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return {c: tokens[k].detach().numpy().copy() for k, c in enumerate(classes)}


def learn_token(
    frozen_denoiser: Denoiser,
    few_shot_images: Sequence[LabeledImage],
    class_id: int,
    schedule: Schedule,
    iters: int = DEFAULT_ITERS,
    lr: float = DEFAULT_LR,
    seed: int = 0,
    table: TokenTable | None = None,
    overwrite: bool = False,
) -> np.ndarray:
    if not few_shot_images:
        raise ValueError("few-shot set is empty")
    out = learn_tokens(frozen_denoiser, {class_id: few_shot_images}, schedule, iters, lr, seed, table, overwrite)
    return out[class_id]


def few_shot_loss(denoiser: Denoiser, token, images: Sequence[LabeledImage], schedule: Schedule, draws: int = 8, seed: int = 99) -> float:
    """Token loss averaged over `draws` fixed (tau, eps) draws; used to compare tokens."""
    x0 = to_model_space(np.stack([im.pixels for im in images]))
    g = torch.Generator().manual_seed(seed)
    token = torch.as_tensor(np.asarray(token), dtype=torch.float32)
    total = 0.0
    with torch.no_grad():
        for _ in range(draws):
            tau = torch.randint(0, schedule.num_steps, (x0.shape[0],), generator=g)
            eps = torch.randn(x0.shape, generator=g)
            total += float(token_loss(denoiser, token, x0, tau, eps, schedule))
    return total / draws
