"""Dual-generator replay: knowledge store, structure-preserved and distribution-aligned generation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .diffusion import (
    Denoiser,
    Schedule,
    add_noise,
    ddim_loop,
    ddim_sample,
    edge_tensor,
    timestep_ladder,
    to_model_space,
    to_pixels,
)
from .edge import CannyParams, canny
from .inversion import TokenTable, add_token
from .scenario import BACKGROUND, LabeledImage, class_name
from .segmenter import SegModel, images_to_tensor

ORIGINS = ("SDR", "DDR", "SD", "EXEMPLAR")
CHUNK = 50
# Noise std at the refinement start. At 0.6 the signal (sqrt(alpha_bar) = 0.8) pins the
# global palette, so the token cannot move it; 0.98 is where the linear schedule sits
# about 60% of the way through the forward process.
DEFAULT_STRENGTH = 0.98


@dataclass(frozen=True)
class KnowledgeEntry:
    class_id: int
    edge: np.ndarray  # H x W uint8 {0, 1}
    mask: np.ndarray  # H x W uint8 step mask (class ids)
    source_id: str
    step: int


@dataclass(frozen=True)
class PromptSpec:
    class_id: int
    name: str
    base_embedding_id: int


@dataclass(frozen=True)
class KnowledgeStore:
    entries: Mapping[int, tuple[KnowledgeEntry, ...]] = field(default_factory=dict)
    prompts: Mapping[int, PromptSpec] = field(default_factory=dict)
    tokens: TokenTable = field(default_factory=TokenTable)
    canny_params: CannyParams = field(default_factory=CannyParams)

    def classes(self) -> list[int]:
        return sorted(self.entries)

    def num_entries(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def upto(self, step: int) -> "KnowledgeStore":
        """The store as it was after `step` (drops anything added later)."""
        entries = {c: tuple(e for e in v if e.step <= step) for c, v in self.entries.items()}
        entries = {c: v for c, v in entries.items() if v}
        tokens = TokenTable({c: e for c, e in self.tokens.entries.items() if e.step <= step})
        prompts = {c: p for c, p in self.prompts.items() if c in entries or c in tokens}
        return KnowledgeStore(entries, prompts, tokens, self.canny_params)

    # Edge maps as 1-bit PNGs, masks as 8-bit PNGs, tokens in a DPST blob; never colour images.
    def save(self, root: str | Path) -> Path:
        root = Path(root)
        (root / "edges").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        items = []
        for c in self.classes():
            for k, e in enumerate(self.entries[c]):
                stem = f"c{c:02d}_{k:05d}"
                Image.fromarray(e.edge.astype(bool)).save(root / "edges" / f"{stem}.png")
                Image.fromarray(e.mask.astype(np.uint8), mode="L").save(root / "masks" / f"{stem}.png")
                items.append({
                    "class_id": c,
                    "source_id": e.source_id,
                    "step": e.step,
                    "edge": f"edges/{stem}.png",
                    "mask": f"masks/{stem}.png",
                })
        self.tokens.save(root / "tokens.ckpt")
        manifest = {
            "format": "dreampast-knowledge/1",
            "canny_params": self.canny_params.to_dict(),
            "prompts": [vars(self.prompts[c]) for c in sorted(self.prompts)],
            "entries": items,
            "tokens": "tokens.ckpt",
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return root

    @classmethod
    def load(cls, root: str | Path) -> "KnowledgeStore":
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        entries: dict[int, list[KnowledgeEntry]] = {}
        for it in manifest["entries"]:
            edge = np.asarray(Image.open(root / it["edge"]), dtype=np.uint8)
            mask = np.asarray(Image.open(root / it["mask"]), dtype=np.uint8)
            entries.setdefault(it["class_id"], []).append(
                KnowledgeEntry(it["class_id"], edge.copy(), mask.copy(), it["source_id"], it["step"])
            )
        prompts = {p["class_id"]: PromptSpec(**p) for p in manifest["prompts"]}
        return cls(
            entries={c: tuple(v) for c, v in entries.items()},
            prompts=prompts,
            tokens=TokenTable.load(root / manifest["tokens"]),
            canny_params=CannyParams(**manifest["canny_params"]),
        )


def update_knowledge(
    store: KnowledgeStore,
    step_data: Sequence[LabeledImage],
    step_classes: Sequence[int],
    tokens: Mapping[int, np.ndarray] | None,
    canny_params: CannyParams,
    step: int,
) -> KnowledgeStore:
    """Add edge maps + step masks for each current class, its prompt and its token.

    Re-running with the same data adds nothing (entries are keyed by class and
    source image id); previously stored entries are never modified.
    """
    canny_params.validate()
    entries = {c: list(v) for c, v in store.entries.items()}
    prompts = dict(store.prompts)
    edge_cache: dict[str, np.ndarray] = {}
    for c in step_classes:
        known = {e.source_id for e in entries.get(c, [])}
        bucket = entries.setdefault(c, [])
        for item in step_data:
            if item.id in known or not np.any(item.mask == c):
                continue
            if item.id not in edge_cache:
                edge_cache[item.id] = canny(item.pixels, **canny_params.to_dict()).edges
            bucket.append(KnowledgeEntry(c, edge_cache[item.id], item.mask.copy(), item.id, step))
            known.add(item.id)
        prompts.setdefault(c, PromptSpec(class_id=c, name=f"a photo of a {class_name(c)}", base_embedding_id=c))
    table = store.tokens
    for c, emb in (tokens or {}).items():
        if c in table and np.array_equal(table[c], np.asarray(emb, dtype=np.float32)):
            continue
        table = add_token(table, c, emb, step)
    return KnowledgeStore(
        entries={c: tuple(v) for c, v in entries.items()},
        prompts=prompts,
        tokens=table,
        canny_params=canny_params,
    )


# -- generation ---------------------------------------------------------------------


@dataclass
class ReplaySample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray  # H x W uint8 class ids
    origin: str
    class_id: int
    source_id: str | None = None


@dataclass
class ReplayBudget:
    total_size: int = 100
    ddr_ratio: float = 0.8
    per_class: int | None = None

    def validate(self) -> None:
        if self.total_size < 0:
            raise ValueError("total_size must be >= 0")
        if not 0.0 <= self.ddr_ratio <= 1.0:
            raise ValueError("ddr_ratio must be in [0, 1]")

    def allocate(self, old_classes: Sequence[int]) -> dict[int, tuple[int, int]]:
        """Per class (n_sdr, n_ddr); the total is split evenly, remainder to the earliest classes."""
        self.validate()
        old = list(old_classes)
        if self.per_class is not None:
            quotas = [self.per_class] * len(old)
        else:
            if self.total_size > 0 and not old:
                raise ValueError("replay budget is positive but there are no old classes")
            q, r = divmod(self.total_size, len(old)) if old else (0, 0)
            quotas = [q + (1 if k < r else 0) for k in range(len(old))]
        out = {}
        for c, n in zip(old, quotas):
            n_ddr = int(math.floor(self.ddr_ratio * n + 0.5))
            out[c] = (n - n_ddr, n_ddr)
        return out

    def to_dict(self) -> dict:
        return {"total_size": self.total_size, "ddr_ratio": self.ddr_ratio, "per_class": self.per_class}


def _chunks(n: int, size: int = CHUNK):
    for start in range(0, n, size):
        yield start, min(size, n - start)


def _seed(*parts: int) -> int:
    return int(np.random.default_rng([int(p) for p in parts]).integers(0, 2**62))


@torch.no_grad()
def label_with_old_model(old_segmenter: SegModel, images: np.ndarray, conf_threshold: float) -> np.ndarray:
    """Old-model argmax labels; pixels with max probability below the threshold become background."""
    old_segmenter.eval()
    out = []
    for start, n in _chunks(len(images), 64):
        prob = old_segmenter(images_to_tensor(images[start : start + n])).softmax(1)
        mu, lab = prob.max(1)
        lab = torch.where(mu < conf_threshold, torch.zeros_like(lab), lab)
        out.append(old_segmenter.decode(lab.numpy()))
    return np.concatenate(out) if out else np.zeros((0, *old_segmenter.image_size), dtype=np.uint8)


def _prompt(store: KnowledgeStore, class_id: int) -> PromptSpec:
    if class_id not in store.prompts:
        raise KeyError(f"class {class_id} has no prompt in the knowledge store")
    return store.prompts[class_id]


def sdr_generate(
    store: KnowledgeStore,
    denoiser: Denoiser,
    schedule: Schedule,
    class_id: int,
    count: int,
    seed: int,
    num_steps: int | None = None,
) -> list[ReplaySample]:
    """Edge-conditioned samples paired verbatim with the stored masks (round-robin over entries)."""
    entries = store.entries.get(class_id)
    if not entries:
        raise KeyError(f"class {class_id} has no stored edge maps")
    if count == 0:
        return []
    steps = num_steps or denoiser.config.sampler_steps
    start = int(np.random.default_rng([seed, class_id, 1]).integers(len(entries)))
    picks = [entries[(start + k) % len(entries)] for k in range(count)]
    prompt = _prompt(store, class_id)
    out = []
    for c0, n in _chunks(count):
        chunk = picks[c0 : c0 + n]
        cond = denoiser.base_embedding([prompt.base_embedding_id] * n)
        edges = edge_tensor([e.edge for e in chunk])
        imgs = ddim_sample(denoiser, cond, schedule, steps, _seed(seed, class_id, 1, c0), edge=edges)
        for img, e in zip(imgs, chunk):
            out.append(ReplaySample(img, e.mask.copy(), "SDR", class_id, e.source_id))
    return out


def prompt_images(denoiser: Denoiser, store: KnowledgeStore, schedule: Schedule, class_id: int, count: int, seed: int, num_steps: int | None = None) -> np.ndarray:
    """Sub-step 1 of DDR (and the whole of prompt-only replay): class-prompt samples from scratch."""
    steps = num_steps or denoiser.config.sampler_steps
    prompt = _prompt(store, class_id)
    parts = []
    for c0, n in _chunks(count):
        cond = denoiser.base_embedding([prompt.base_embedding_id] * n)
        parts.append(ddim_sample(denoiser, cond, schedule, steps, _seed(seed, class_id, 2, c0)))
    h, w = denoiser.config.image_size
    return np.concatenate(parts) if parts else np.zeros((0, h, w, 3), dtype=np.float32)


@torch.no_grad()
def refine_with_token(
    denoiser: Denoiser,
    images: np.ndarray,
    token: np.ndarray,
    schedule: Schedule,
    strength: float,
    seed: int,
    num_steps: int | None = None,
) -> np.ndarray:
    """Sub-step 2 of DDR: partially noise, then DDIM-denoise conditioned on the learned token."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    if strength == 0.0 or len(images) == 0:
        return images.copy()
    steps = num_steps or denoiser.config.sampler_steps
    tau_s = schedule.tau_for_noise_level(strength)
    taus = [tau_s] + [t for t in timestep_ladder(schedule.num_steps, steps) if t < tau_s]
    tok = torch.tensor(np.asarray(token), dtype=torch.float32).reshape(1, -1)
    out = []
    for c0, n in _chunks(len(images)):
        x0 = to_model_space(images[c0 : c0 + n])
        g = torch.Generator().manual_seed(_seed(seed, 3, c0))
        x = add_noise(x0, tau_s, torch.randn(x0.shape, generator=g), schedule)
        cond = tok.expand(n, -1)
        x = ddim_loop(lambda xt, tau: denoiser(xt, torch.full((n,), tau, dtype=torch.long), cond, None), x, taus, schedule)
        out.append(to_pixels(x))
    return np.concatenate(out)


def ddr_generate(
    store: KnowledgeStore,
    denoiser: Denoiser,
    schedule: Schedule,
    old_segmenter: SegModel,
    class_id: int,
    count: int,
    strength: float = DEFAULT_STRENGTH,
    seed: int = 0,
    conf_threshold: float = 0.7,
    num_steps: int | None = None,
    return_prompt_images: bool = False,
):
    if class_id not in store.tokens:
        raise KeyError(f"class {class_id} has no learned token")
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    x_p = prompt_images(denoiser, store, schedule, class_id, count, seed, num_steps)
    x_d = refine_with_token(denoiser, x_p, store.tokens[class_id], schedule, strength, _seed(seed, class_id), num_steps)
    masks = label_with_old_model(old_segmenter, x_d, conf_threshold) if count else []
    samples = [ReplaySample(img, m, "DDR", class_id) for img, m in zip(x_d, masks)]
    return (samples, x_p) if return_prompt_images else samples


def prompt_only_generate(
    store: KnowledgeStore,
    denoiser: Denoiser,
    schedule: Schedule,
    old_segmenter: SegModel,
    class_id: int,
    count: int,
    seed: int = 0,
    conf_threshold: float = 0.7,
    num_steps: int | None = None,
) -> list[ReplaySample]:
    """Vanilla prompt generation with old-model pseudo-labels (no edges, no tokens)."""
    x_p = prompt_images(denoiser, store, schedule, class_id, count, seed, num_steps)
    masks = label_with_old_model(old_segmenter, x_p, conf_threshold) if count else []
    return [ReplaySample(img, m, "SD", class_id) for img, m in zip(x_p, masks)]


def build_replay_set(
    store: KnowledgeStore,
    denoiser: Denoiser,
    schedule: Schedule,
    old_segmenter: SegModel,
    budget: ReplayBudget,
    old_classes: Sequence[int],
    seed: int,
    *,
    strength: float = DEFAULT_STRENGTH,
    conf_threshold: float = 0.7,
    num_steps: int | None = None,
    prompt_only: bool = False,
) -> list[ReplaySample]:
    alloc = budget.allocate(old_classes)
    out: list[ReplaySample] = []
    for c in old_classes:
        n_sdr, n_ddr = alloc[c]
        if prompt_only:
            out += prompt_only_generate(store, denoiser, schedule, old_segmenter, c, n_sdr + n_ddr, _seed(seed, c, 7), conf_threshold, num_steps)
            continue
        if n_ddr:
            out += ddr_generate(store, denoiser, schedule, old_segmenter, c, n_ddr, strength, _seed(seed, c, 5), conf_threshold, num_steps)
        if n_sdr:
            out += sdr_generate(store, denoiser, schedule, c, n_sdr, _seed(seed, c, 6), num_steps)
    order = np.random.default_rng([seed, 99]).permutation(len(out))
    return [out[i] for i in order]


# -- exemplar memory (ablation baseline that keeps raw images) ---------------------------


def exemplar_update(memory: list[ReplaySample], step_data: Sequence[LabeledImage], step_classes: Sequence[int], per_class: int, seed: int) -> list[ReplaySample]:
    memory = list(memory)
    rng = np.random.default_rng([seed, 11])
    for c in step_classes:
        pool = [im for im in step_data if np.any(im.mask == c)]
        for k in sorted(rng.permutation(len(pool))[:per_class]):
            im = pool[k]
            memory.append(ReplaySample(im.pixels, im.mask.copy(), "EXEMPLAR", c, im.id))
    return memory


def exemplar_replay(memory: Sequence[ReplaySample], budget: ReplayBudget, old_classes: Sequence[int], seed: int) -> list[ReplaySample]:
    alloc = budget.allocate(old_classes)
    rng = np.random.default_rng([seed, 12])
    out = []
    for c in old_classes:
        pool = [s for s in memory if s.class_id == c]
        n = sum(alloc[c])
        if pool and n:
            out += [pool[i % len(pool)] for i in rng.permutation(max(n, len(pool)))[:n]]
    return out


# -- audit / dump ----------------------------------------------------------------------


def audit_replay(samples: Sequence[ReplaySample], store: KnowledgeStore, old_classes: Sequence[int]) -> dict:
    """Check SDR mask fidelity and label validity of every replay sample."""
    allowed = np.array([BACKGROUND, *old_classes])
    report = {"n": len(samples), "by_origin": {}, "sdr_mask_mismatch": 0, "invalid_labels": 0}
    stored = {c: [e.mask for e in store.entries.get(c, ())] for c in old_classes}
    for s in samples:
        report["by_origin"][s.origin] = report["by_origin"].get(s.origin, 0) + 1
        if not np.isin(s.mask, allowed).all():
            report["invalid_labels"] += 1
        if s.origin == "SDR" and not any(np.array_equal(s.mask, m) for m in stored.get(s.class_id, [])):
            report["sdr_mask_mismatch"] += 1
    report["ok"] = report["sdr_mask_mismatch"] == 0 and report["invalid_labels"] == 0
    return report


def save_replay(samples: Sequence[ReplaySample], root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    items = []
    for k, s in enumerate(samples):
        stem = f"{k:05d}_{s.origin}_c{s.class_id:02d}"
        Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(root / "images" / f"{stem}.png")
        Image.fromarray(s.mask.astype(np.uint8), mode="L").save(root / "masks" / f"{stem}.png")
        items.append({"origin": s.origin, "class_id": s.class_id, "source_id": s.source_id, "image": f"images/{stem}.png", "mask": f"masks/{stem}.png"})
    (root / "manifest.json").write_text(json.dumps({"format": "dreampast-replay/1", "items": items}, indent=1))
    return root


def load_replay(root: str | Path) -> list[ReplaySample]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    out = []
    for it in manifest["items"]:
        img = np.asarray(Image.open(root / it["image"]).convert("RGB"), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(root / it["mask"]), dtype=np.uint8).copy()
        out.append(ReplaySample(img, mask, it["origin"], it["class_id"], it["source_id"]))
    return out
