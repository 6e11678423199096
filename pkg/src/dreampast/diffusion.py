"""Toy conditional image-space diffusion: schedule, DDIM sampling, denoiser pretraining."""
from __future__ import annotations

import base64
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .edge import CannyParams, canny
from .scenario import SHAPES, LabeledImage

log = logging.getLogger(__name__)

DONE = -1  # tau_prev value meaning "fully denoised" (alpha_bar = 1)


@dataclass
class DiffusionConfig:
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sampler_steps: int = 50
    cond_dropout: float = 0.1
    # denoiser / pretraining
    num_classes: int = len(SHAPES)
    image_size: tuple[int, int] = (64, 64)
    base_channels: int = 32
    emb_dim: int = 64
    train_iters: int = 3000
    batch_size: int = 16
    lr: float = 1e-3

    def validate(self) -> None:
        if not 1 <= self.sampler_steps <= self.num_train_steps:
            raise ValueError("sampler_steps must be in [1, num_train_steps]")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


@dataclass(frozen=True)
class Schedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "Schedule":
        b = np.asarray(betas, dtype=np.float64)
        if b.ndim != 1 or len(b) == 0:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if not np.all((b > 0) & (b < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        return cls(betas=b, alpha_bars=np.cumprod(1.0 - b))

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, tau: int) -> float:
        if tau == DONE:
            return 1.0
        return float(self.alpha_bars[tau])

    def tau_for_noise_level(self, strength: float) -> int:
        """Timestep whose noise std sqrt(1 - alpha_bar) is closest to `strength`."""
        return int(np.argmin(np.abs(np.sqrt(1.0 - self.alpha_bars) - strength)))

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist()}


def make_schedule(config: DiffusionConfig) -> Schedule:
    betas = np.linspace(config.beta_start, config.beta_end, config.num_train_steps, dtype=np.float64)
    return Schedule.from_betas(betas)


def _ab(schedule: Schedule, tau, like: torch.Tensor) -> torch.Tensor:
    if isinstance(tau, torch.Tensor) and tau.ndim > 0:
        a = torch.as_tensor(schedule.alpha_bars, dtype=like.dtype)[tau.long()]
        return a.view(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(schedule.alpha_bar(int(tau)), dtype=like.dtype)


def add_noise(x0: torch.Tensor, tau, eps: torch.Tensor, schedule: Schedule) -> torch.Tensor:
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match image shape {tuple(x0.shape)}")
    ab = _ab(schedule, tau, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def ddim_step(x_tau: torch.Tensor, tau: int, tau_prev: int, eps_pred: torch.Tensor, schedule: Schedule) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM update from tau to tau_prev (DONE for the clean image)."""
    if tau_prev >= tau:
        raise ValueError(f"tau_prev ({tau_prev}) must be smaller than tau ({tau})")
    ab = _ab(schedule, tau, x_tau)
    ab_prev = _ab(schedule, tau_prev, x_tau)
    x0_hat = (x_tau - (1.0 - ab).sqrt() * eps_pred) / ab.sqrt()
    return ab_prev.sqrt() * x0_hat + (1.0 - ab_prev).sqrt() * eps_pred


def timestep_ladder(num_train_steps: int, num_steps: int) -> list[int]:
    if not 1 <= num_steps <= num_train_steps:
        raise ValueError(f"num_steps must be in [1, {num_train_steps}], got {num_steps}")
    return [int(t) for t in np.linspace(num_train_steps - 1, 0, num_steps).round()]


def ddim_loop(eps_fn: Callable[[torch.Tensor, int], torch.Tensor], x: torch.Tensor, taus: Sequence[int], schedule: Schedule) -> torch.Tensor:
    for i, tau in enumerate(taus):
        tau_prev = taus[i + 1] if i + 1 < len(taus) else DONE
        x = ddim_step(x, tau, tau_prev, eps_fn(x, tau), schedule)
    return x


# -- denoiser -------------------------------------------------------------------


def timestep_embedding(tau: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = tau.double()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Small U-shaped eps-predictor eps(x, tau, cond_embedding, edge).

    The input is pixel-unshuffled by 2 so the U-Net runs at half resolution.
    The class/token embedding is projected and added to the timestep embedding;
    the edge map is an extra input channel (zeros when absent).
    """

    def __init__(self, config: DiffusionConfig):
        super().__init__()
        c, d = config.base_channels, config.emb_dim
        self.config = config
        self.class_embed = nn.Embedding(config.num_classes + 1, d)
        emb = 4 * d
        self.time_mlp = nn.Sequential(nn.Linear(d, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.cond_proj = nn.Linear(d, emb)
        self.inc = nn.Conv2d(4 * 4, c, 3, padding=1)
        self.r1 = ResBlock(c, c, emb)
        self.d1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.r2 = ResBlock(2 * c, 2 * c, emb)
        self.d2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * c, 2 * c, emb)
        self.u2 = ResBlock(4 * c, 2 * c, emb)
        self.u1 = ResBlock(3 * c, c, emb)
        self.out_norm = nn.GroupNorm(8, c)
        self.out = nn.Conv2d(c, 3 * 4, 3, padding=1)
        betas = np.linspace(config.beta_start, config.beta_end, config.num_train_steps, dtype=np.float64)
        self.register_buffer("alpha_bars", torch.tensor(np.cumprod(1.0 - betas), dtype=torch.float32), persistent=False)
        self.trained = False

    @property
    def emb_dim(self) -> int:
        return self.config.emb_dim

    def base_embedding(self, class_ids) -> torch.Tensor:
        ids = torch.as_tensor(class_ids, dtype=torch.long).reshape(-1)
        return self.class_embed(ids)

    def forward(self, x, tau, cond=None, edge=None):
        b = x.shape[0]
        tau = torch.as_tensor(tau, dtype=torch.long)
        if tau.ndim == 0:
            tau = tau.expand(b)
        emb = self.time_mlp(timestep_embedding(tau, self.emb_dim).to(x.dtype))
        if cond is None:
            cond = torch.zeros(b, self.emb_dim, dtype=x.dtype)
        emb = emb + self.cond_proj(cond.expand(b, -1))
        if edge is None:
            edge = torch.zeros(b, 1, *x.shape[2:], dtype=x.dtype)
        h = F.pixel_unshuffle(torch.cat([x, edge.to(x.dtype)], dim=1), 2)
        h0 = self.r1(self.inc(h), emb)
        h1 = self.r2(self.d1(h0), emb)
        h = self.mid(self.d2(h1), emb)
        h = self.u2(torch.cat([F.interpolate(h, scale_factor=2.0), h1], dim=1), emb)
        h = self.u1(torch.cat([F.interpolate(h, scale_factor=2.0), h0], dim=1), emb)
        v = F.pixel_shuffle(self.out(F.silu(self.out_norm(h))), 2)
        # The net predicts v; eps = sqrt(ab) v + sqrt(1 - ab) x stays well conditioned at
        # high noise, where a direct eps head would need near-exact identity outputs.
        ab = self.alpha_bars[tau].to(x.dtype).view(-1, 1, 1, 1)
        return ab.sqrt() * v + (1.0 - ab).sqrt() * x

    def freeze(self) -> "Denoiser":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def to_model_space(pixels: np.ndarray | torch.Tensor) -> torch.Tensor:
    """H x W x C (or B x H x W x C) images in [0, 1] -> B x C x H x W in [-1, 1]."""
    x = torch.as_tensor(np.asarray(pixels), dtype=torch.float32)
    if x.ndim == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2) * 2.0 - 1.0


def to_pixels(x: torch.Tensor) -> np.ndarray:
    """B x C x H x W in model space -> B x H x W x C float32 clipped to [0, 1]."""
    return ((x.detach().float() + 1.0) / 2.0).clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy().copy()


def edge_tensor(edges: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.as_tensor(np.stack([np.asarray(e, dtype=np.float32) for e in edges]))[:, None]


@torch.no_grad()
def ddim_sample(
    denoiser: Denoiser,
    cond: torch.Tensor | None,
    schedule: Schedule,
    num_steps: int,
    seed: int,
    edge: torch.Tensor | None = None,
    batch: int | None = None,
    return_model_space: bool = False,
):
    """Sample from pure noise with the deterministic DDIM ladder; returns B x H x W x 3 in [0, 1]."""
    if not getattr(denoiser, "trained", False):
        raise RuntimeError("denoiser is not trained; pretrain or load a checkpoint first")
    if batch is None:
        batch = cond.shape[0] if cond is not None else (edge.shape[0] if edge is not None else 1)
    h, w = denoiser.config.image_size
    g = torch.Generator().manual_seed(int(seed))
    x = torch.randn(batch, 3, h, w, generator=g)
    taus = timestep_ladder(schedule.num_steps, num_steps)
    denoiser.eval()

    def eps_fn(xt, tau):
        return denoiser(xt, torch.full((batch,), tau, dtype=torch.long), cond, edge)

    x = ddim_loop(eps_fn, x, taus, schedule)
    return x if return_model_space else to_pixels(x)


# -- pretraining ------------------------------------------------------------------


@dataclass
class PretrainResult:
    denoiser: Denoiser
    step: int
    optimizer_state: dict
    rng_state: torch.Tensor
    history: list[dict] = field(default_factory=list)
    heldout_init: float = float("nan")
    heldout_final: float = float("nan")


def diffusion_loss(denoiser: Denoiser, x0, tau, eps, schedule: Schedule, cond=None, edge=None) -> torch.Tensor:
    """Mean squared eps-prediction error, the objective shared by pretraining and token learning."""
    x_tau = add_noise(x0, tau, eps, schedule)
    return F.mse_loss(denoiser(x_tau, tau, cond, edge), eps)


def prepare_training_tensors(corpus: Sequence[LabeledImage], canny_params: CannyParams = CannyParams()):
    x = to_model_space(np.stack([it.pixels for it in corpus]))
    edges = edge_tensor([canny(it.pixels, **canny_params.to_dict()).edges for it in corpus])
    labels = torch.tensor([it.dominant_class for it in corpus], dtype=torch.long)
    return x, edges, labels


def heldout_loss(denoiser: Denoiser, data, schedule: Schedule, seed: int = 1234) -> float:
    x, edges, labels = data
    g = torch.Generator().manual_seed(seed)
    tau = torch.randint(0, schedule.num_steps, (x.shape[0],), generator=g)
    eps = torch.randn(x.shape, generator=g, dtype=x.dtype)
    with torch.no_grad():
        cond = denoiser.base_embedding(labels)
        return float(diffusion_loss(denoiser, x, tau, eps, schedule, cond, edges))


def pretrain_denoiser(
    corpus: Sequence[LabeledImage],
    config: DiffusionConfig,
    seed: int,
    *,
    iters: int | None = None,
    resume: PretrainResult | None = None,
    heldout_fraction: float = 0.05,
    log_every: int = 100,
) -> PretrainResult:
    """Train the eps-predictor on the corpus (resumable).

    The learning-rate schedule always spans `config.train_iters`; `iters`, if
    given, stops early at that iteration so a later resume continues the same run.
    """
    if len(corpus) == 0:
        raise ValueError("cannot pretrain on an empty corpus")
    config.validate()
    total = config.train_iters
    stop = total if iters is None else min(iters, total)
    schedule = make_schedule(config)
    x, edges, labels = prepare_training_tensors(corpus)
    n_held = max(1, int(round(heldout_fraction * len(corpus)))) if len(corpus) > 1 else 0
    held = (x[-n_held:], edges[-n_held:], labels[-n_held:]) if n_held else (x, edges, labels)
    if n_held:
        x, edges, labels = x[:-n_held], edges[:-n_held], labels[:-n_held]

    if resume is None:
        torch.manual_seed(seed)
        model = Denoiser(config)
        g = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam(model.parameters(), lr=config.lr)
        start, history = 0, []
        init_loss = heldout_loss(model, held, schedule)
    else:
        model = resume.denoiser
        g = torch.Generator()
        g.set_state(resume.rng_state)
        opt = torch.optim.Adam(model.parameters(), lr=config.lr)
        opt.load_state_dict(resume.optimizer_state)
        start, history = resume.step, list(resume.history)
        init_loss = resume.heldout_init
    for p in model.parameters():
        p.requires_grad_(True)
    model.train()

    n, bsz = x.shape[0], config.batch_size
    for it in range(start, stop):
        lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * it / max(total, 1)))
        for group in opt.param_groups:
            group["lr"] = lr
        idx = torch.randint(0, n, (bsz,), generator=g)
        flip = torch.rand(bsz, generator=g) < 0.5
        xb, eb = x[idx], edges[idx]
        xb = torch.where(flip[:, None, None, None], xb.flip(-1), xb)
        eb = torch.where(flip[:, None, None, None], eb.flip(-1), eb)
        tau = torch.randint(0, schedule.num_steps, (bsz,), generator=g)
        eps = torch.randn(xb.shape, generator=g)
        drop_c = torch.rand(bsz, generator=g) < config.cond_dropout
        drop_e = torch.rand(bsz, generator=g) < config.cond_dropout
        cond = model.base_embedding(labels[idx]) * (~drop_c)[:, None].float()
        eb = eb * (~drop_e)[:, None, None, None].float()
        loss = diffusion_loss(model, xb, tau, eps, schedule, cond, eb)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if (it + 1) % log_every == 0 or it + 1 == stop:
            history.append({"iter": it + 1, "loss": loss.item(), "lr": lr})
            log.info("pretrain iter %d loss %.4f", it + 1, history[-1]["loss"])

    model.freeze()
    model.trained = True
    return PretrainResult(
        denoiser=model,
        step=max(start, stop),
        optimizer_state=opt.state_dict(),
        rng_state=g.get_state(),
        history=history,
        heldout_init=init_loss,
        heldout_final=heldout_loss(model, held, schedule),
    )


# -- persistence --------------------------------------------------------------------


def save_denoiser(path: str | Path, denoiser: Denoiser, schedule: Schedule) -> str:
    header = {
        "kind": "denoiser",
        "config": denoiser.config.to_dict(),
        "schedule": schedule.to_dict(),
    }
    return checkpoint.save(path, checkpoint.state_dict_to_numpy(denoiser.state_dict()), header)


def load_denoiser(path: str | Path) -> tuple[Denoiser, Schedule]:
    header, tensors = checkpoint.load(path)
    if header.get("kind") != "denoiser":
        raise checkpoint.CheckpointError(f"{path} is not a denoiser checkpoint")
    model = Denoiser(DiffusionConfig.from_dict(header["config"]))
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.freeze()
    model.trained = True
    return model, Schedule.from_betas(header["schedule"]["betas"])


def save_pretrain_state(path: str | Path, result: PretrainResult) -> str:
    tensors = {}
    state = result.optimizer_state
    for pid, st in state["state"].items():
        for key, val in st.items():
            if key == "step":
                continue
            tensors[f"opt.{pid}.{key}"] = val.numpy()
    tensors.update({f"model.{k}": v for k, v in checkpoint.state_dict_to_numpy(result.denoiser.state_dict()).items()})
    header = {
        "kind": "pretrain_state",
        "config": result.denoiser.config.to_dict(),
        "step": result.step,
        "opt_steps": {str(pid): float(st["step"]) for pid, st in state["state"].items()},
        "param_groups": state["param_groups"],
        "rng_state": base64.b64encode(result.rng_state.numpy().tobytes()).decode("ascii"),
        "history": result.history,
        "heldout_init": result.heldout_init,
    }
    return checkpoint.save(path, tensors, header)


def load_pretrain_state(path: str | Path) -> PretrainResult:
    header, tensors = checkpoint.load(path)
    if header.get("kind") != "pretrain_state":
        raise checkpoint.CheckpointError(f"{path} is not a pretraining state file")
    model = Denoiser(DiffusionConfig.from_dict(header["config"]))
    model.load_state_dict({k[len("model."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model.")})
    opt_state: dict = {"state": {}, "param_groups": header["param_groups"]}
    for pid, steps in header["opt_steps"].items():
        opt_state["state"][int(pid)] = {
            "step": torch.tensor(steps),
            "exp_avg": torch.from_numpy(tensors[f"opt.{pid}.exp_avg"]),
            "exp_avg_sq": torch.from_numpy(tensors[f"opt.{pid}.exp_avg_sq"]),
        }
    rng = torch.from_numpy(np.frombuffer(base64.b64decode(header["rng_state"]), dtype=np.uint8).copy())
    return PretrainResult(
        denoiser=model,
        step=header["step"],
        optimizer_state=opt_state,
        rng_state=rng,
        history=header["history"],
        heldout_init=header["heldout_init"],
    )
