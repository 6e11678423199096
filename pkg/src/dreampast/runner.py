"""End-to-end incremental protocol: base step, then replay -> segmenter update -> generator/knowledge update."""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint
from .diffusion import DiffusionConfig, load_denoiser, make_schedule, pretrain_denoiser, save_denoiser
from .edge import CannyParams
from .inversion import DEFAULT_ITERS, DEFAULT_LR, DEFAULT_SHOTS, choose_few_shot, learn_tokens
from .metrics import accumulate, iou_scores, new_confusion
from .replay import (
    DEFAULT_STRENGTH,
    KnowledgeStore,
    ReplayBudget,
    ReplaySample,
    audit_replay,
    build_replay_set,
    exemplar_replay,
    exemplar_update,
    load_replay,
    save_replay,
    update_knowledge,
)
from .scenario import (
    CorpusSpec,
    LabeledImage,
    LabelSpace,
    ScenarioSpec,
    build_scenario,
    generate_corpus,
    load_corpus,
    relabel_mask,
    split_validation,
)
from .segmenter import (
    LossWeights,
    SegModel,
    TrainSample,
    extend_head,
    frozen_copy,
    load_segmenter,
    predict,
    save_segmenter,
    train_segmenter,
)

log = logging.getLogger(__name__)

MODES = (
    "full",
    "no_replay",
    "sdr_only",
    "ddr_only",
    "prompt_only_replay",
    "exemplar_memory",
    "finetune",
    "joint",
)
GENERATIVE_MODES = ("full", "sdr_only", "ddr_only", "prompt_only_replay")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = "full"
    seed: int = 0
    pretrain_corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(num_classes=10, images_per_class=60, style="pretrain"))
    downstream_corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(num_classes=5, images_per_class=50, style="downstream"))
    downstream_dir: str | None = None
    scenario: ScenarioSpec = field(default_factory=lambda: ScenarioSpec(n_base=4, n_novel_per_step=1, n_steps=2))
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    denoiser_path: str | None = None
    pretrain_seed: int = 0
    budget: ReplayBudget = field(default_factory=ReplayBudget)
    weights: LossWeights = field(default_factory=LossWeights)
    canny: CannyParams = field(default_factory=CannyParams)
    val_fraction: float = 0.2
    epochs_base: int = 40
    epochs_step: int = 40
    batch_size: int = 24
    lr_base: float = 1e-2
    lr_step: float = 1e-3
    seg_width: int = 32
    ddr_strength: float = DEFAULT_STRENGTH
    sampler_steps: int | None = None
    token_iters: int = DEFAULT_ITERS
    token_lr: float = DEFAULT_LR
    token_shots: int = DEFAULT_SHOTS
    exemplars_per_class: int = 5
    dump_replay: bool = False

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        try:
            self.downstream_corpus.validate()
            self.pretrain_corpus.validate()
            self.diffusion.validate()
            self.budget.validate()
            self.weights.validate()
            self.canny.validate()
            self.label_space()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.pretrain_corpus.image_size != self.downstream_corpus.image_size:
            raise ConfigError("pretrain and downstream corpora must share one image size")
        if self.diffusion.image_size != self.downstream_corpus.image_size:
            raise ConfigError("diffusion image_size differs from the corpus image size")
        if self.downstream_corpus.num_classes > self.diffusion.num_classes:
            raise ConfigError("downstream classes exceed the denoiser's class vocabulary")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if not 0.0 <= self.ddr_strength <= 1.0:
            raise ConfigError("ddr_strength must be in [0, 1]")
        for name in ("epochs_base", "epochs_step", "batch_size", "token_shots", "seg_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def label_space(self) -> LabelSpace:
        return self.scenario.label_space(self.downstream_corpus.num_classes)

    @property
    def uses_generator(self) -> bool:
        return self.mode in GENERATIVE_MODES

    def effective_budget(self) -> ReplayBudget:
        b = ReplayBudget(self.budget.total_size, self.budget.ddr_ratio, self.budget.per_class)
        if self.mode == "sdr_only":
            b.ddr_ratio = 0.0
        elif self.mode == "ddr_only":
            b.ddr_ratio = 1.0
        return b

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "pretrain_corpus": self.pretrain_corpus.to_dict(),
            "downstream_corpus": self.downstream_corpus.to_dict(),
            "downstream_dir": self.downstream_dir,
            "scenario": self.scenario.to_dict(),
            "diffusion": self.diffusion.to_dict(),
            "denoiser_path": self.denoiser_path,
            "pretrain_seed": self.pretrain_seed,
            "budget": self.budget.to_dict(),
            "weights": self.weights.to_dict(),
            "canny": self.canny.to_dict(),
            "val_fraction": self.val_fraction,
            "epochs_base": self.epochs_base,
            "epochs_step": self.epochs_step,
            "batch_size": self.batch_size,
            "lr_base": self.lr_base,
            "lr_step": self.lr_step,
            "seg_width": self.seg_width,
            "ddr_strength": self.ddr_strength,
            "sampler_steps": self.sampler_steps,
            "token_iters": self.token_iters,
            "token_lr": self.token_lr,
            "token_shots": self.token_shots,
            "exemplars_per_class": self.exemplars_per_class,
            "dump_replay": self.dump_replay,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = set(cls().to_dict())
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        base = cls().to_dict()
        for key in ("pretrain_corpus", "downstream_corpus", "scenario", "diffusion", "budget", "weights", "canny"):
            if key in d:
                extra = sorted(set(d[key]) - set(base[key]))
                if extra:
                    raise ConfigError(f"unknown keys in {key}: {extra}")
                merged = dict(base[key])
                merged.update(d[key])
                d[key] = merged
        try:
            out = cls(
                pretrain_corpus=CorpusSpec.from_dict(d.pop("pretrain_corpus", base["pretrain_corpus"])),
                downstream_corpus=CorpusSpec.from_dict(d.pop("downstream_corpus", base["downstream_corpus"])),
                scenario=ScenarioSpec.from_dict(d.pop("scenario", base["scenario"])),
                diffusion=DiffusionConfig.from_dict(d.pop("diffusion", base["diffusion"])),
                budget=ReplayBudget(**d.pop("budget", base["budget"])),
                weights=LossWeights(**d.pop("weights", base["weights"])),
                canny=CannyParams(**d.pop("canny", base["canny"])),
                **d,
            )
        except (TypeError, KeyError) as e:
            raise ConfigError(f"malformed config: {e}") from e
        out.validate()
        return out

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        for key, val in changes.items():
            if isinstance(val, dict) and isinstance(d.get(key), dict):
                d[key] = {**d[key], **val}
            else:
                d[key] = val
        return RunConfig.from_dict(d)


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return RunConfig.from_dict(raw)


def _stage_seed(*parts) -> int:
    """Independent integer seed for one stage; never shared across stages."""
    h = hashlib.sha256(json.dumps([str(p) for p in parts]).encode()).digest()
    return int.from_bytes(h[:6], "little")


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True))
    tmp.replace(path)


# -- data ---------------------------------------------------------------------------


@dataclass
class RunData:
    label_space: LabelSpace
    train: list[LabeledImage]
    val: list[LabeledImage]
    steps: list[list[LabeledImage]]


def prepare_data(config: RunConfig) -> RunData:
    if config.downstream_dir:
        corpus = load_corpus(config.downstream_dir)
    else:
        corpus = generate_corpus(config.downstream_corpus)
    ls = config.label_space()
    train, val = split_validation(corpus, config.val_fraction, seed=_stage_seed(config.seed, "val"))
    return RunData(ls, train, val, build_scenario(train, ls))


def validation_set(data: RunData, step: int) -> list[LabeledImage]:
    """Held-out images containing a class of Y_{1:t}, masks reduced to those classes."""
    classes = data.label_space.classes_upto(step)
    out = []
    for item in data.val:
        if np.isin(item.mask, classes).any():
            out.append(item.with_mask(relabel_mask(item.mask, classes)))
    return out


def evaluate(model: SegModel, items: Sequence[LabeledImage], label_space: LabelSpace, step: int) -> dict:
    """Confusion over Y_{1:t} in the model's channel space, plus grouped IoUs."""
    classes = label_space.classes_upto(step)
    if list(model.classes) != list(classes):
        raise ValueError(
            f"checkpoint has {len(model.classes) + 1} channels (classes {list(model.classes)}) "
            f"but the dataset at step {step} has {len(classes) + 1} (classes {classes})"
        )
    conf = new_confusion(model.num_channels)
    if items:
        pred = predict(model, [it.pixels for it in items])
        for p, it in zip(pred, items):
            conf = accumulate(conf, p, model.encode_mask(it.mask))
    ch = {c: k for k, c in enumerate([0, *model.classes])}
    base = [ch[c] for c in label_space.base_classes]
    novel = [ch[c] for c in classes if c not in label_space.base_classes]
    scores = iou_scores(conf, base, novel)
    old = [ch[c] for c in label_space.classes_upto(step - 1)] if step > 1 else []
    olds = [scores["per_class_iou"][k] for k in old if scores["per_class_iou"][k] is not None]
    return {
        "step": step,
        "classes": [0, *model.classes],
        "per_class_iou": {str(c): scores["per_class_iou"][k] for c, k in ch.items()},
        "miou_base": scores["miou_base"],
        "miou_novel": scores["miou_novel"],
        "miou_all": scores["miou_all"],
        "hiou": scores["hiou"],
        "miou_old": float(np.mean(olds)) if olds else None,
        "n_val": len(items),
        "confusion": conf.tolist(),
    }


# -- run ----------------------------------------------------------------------------


class RunDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def step(self, t: int) -> Path:
        return self.root / f"step_{t}"

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def denoiser(self) -> Path:
        return self.root / "denoiser.ckpt"

    @property
    def knowledge(self) -> Path:
        return self.root / "knowledge"

    @property
    def exemplars(self) -> Path:
        return self.root / "exemplars"

    def done(self, t: int) -> bool:
        return (self.step(t) / "done.json").exists()

    def completed_steps(self) -> list[int]:
        out = []
        t = 1
        while self.done(t):
            out.append(t)
            t += 1
        return out


def ensure_denoiser(config: RunConfig, rd: RunDir):
    """Load (copying in from `denoiser_path`, or pretraining) the frozen denoiser of this run."""
    if not rd.denoiser.exists():
        if config.denoiser_path:
            src = Path(config.denoiser_path)
            if not src.exists():
                raise FileNotFoundError(f"denoiser checkpoint {src} does not exist")
            shutil.copyfile(src, rd.denoiser)
        else:
            corpus = generate_corpus(config.pretrain_corpus)
            res = pretrain_denoiser(corpus, config.diffusion, seed=config.pretrain_seed)
            save_denoiser(rd.denoiser, res.denoiser, make_schedule(config.diffusion))
    denoiser, schedule = load_denoiser(rd.denoiser)
    if denoiser.config.num_classes < config.downstream_corpus.num_classes:
        raise ValueError("denoiser class vocabulary is smaller than the downstream corpus")
    return denoiser, schedule


def _train_samples(items: Sequence[LabeledImage], model: SegModel, replay: Sequence[ReplaySample] = ()) -> list[TrainSample]:
    out = [TrainSample(it.pixels, model.encode_mask(it.mask)) for it in items]
    out += [TrainSample(s.image, model.encode_mask(s.mask), replay=True) for s in replay]
    return out


def _learn_and_audit(config, rd, denoiser, schedule, step_items, classes, store, step):
    """Learn tokens for `classes`; record the denoiser hashes around every learn call."""
    audit = []
    tokens = {}
    for c in classes:
        shots = choose_few_shot(step_items, c, config.token_shots, _stage_seed(config.seed, "shots", step))
        before = (checkpoint.file_hash(rd.denoiser), checkpoint.state_hash(denoiser))
        tokens.update(learn_tokens(denoiser, {c: shots}, schedule, config.token_iters, config.token_lr,
                                   seed=_stage_seed(config.seed, "token", step) % (2**31), table=store.tokens))
        after = (checkpoint.file_hash(rd.denoiser), checkpoint.state_hash(denoiser))
        audit.append({
            "step": step,
            "class_id": c,
            "shots": [im.id for im in shots],
            "file_hash_before": before[0],
            "file_hash_after": after[0],
            "state_hash_before": before[1],
            "state_hash_after": after[1],
            "unchanged": before == after,
        })
    return tokens, audit


def run_scenario(config: RunConfig, run_dir: str | Path, stop_after: int | None = None) -> list[dict]:
    """Execute (or resume) a scenario run; returns the metrics records of every step."""
    config.validate()
    rd = RunDir(run_dir)
    rd.root.mkdir(parents=True, exist_ok=True)
    if rd.config.exists():
        stored = json.loads(rd.config.read_text())
        if stored != config.to_dict():
            raise ConfigError(f"{rd.config} holds a different configuration; use a fresh run directory")
    else:
        _write_json(rd.config, config.to_dict())

    torch.use_deterministic_algorithms(True, warn_only=True)
    data = prepare_data(config)
    ls = data.label_space
    n_steps = ls.n_steps
    done = rd.completed_steps()
    denoiser = schedule = None
    if config.uses_generator:
        denoiser, schedule = ensure_denoiser(config, rd)

    store = KnowledgeStore(canny_params=config.canny)
    if done and rd.knowledge.exists():
        store = KnowledgeStore.load(rd.knowledge).upto(done[-1])
    exemplars: list[ReplaySample] = []
    if config.mode == "exemplar_memory" and done and rd.exemplars.exists():
        exemplars = [s for s in load_replay(rd.exemplars) if s.class_id in ls.classes_upto(done[-1])]

    audit_path = rd.root / "generator_audit.json"
    gen_audit = json.loads(audit_path.read_text()) if audit_path.exists() and done else []
    gen_audit = [a for a in gen_audit if a["step"] <= (done[-1] if done else 0)]
    replay_audits_path = rd.root / "replay_audit.json"
    replay_audits = json.loads(replay_audits_path.read_text()) if replay_audits_path.exists() and done else []
    replay_audits = [a for a in replay_audits if a["step"] <= (done[-1] if done else 0)]

    records = [json.loads((rd.step(t) / "metrics.jsonl").read_text().splitlines()[0]) for t in done]
    model = load_segmenter(rd.step(done[-1]) / "segmenter.ckpt")[0] if done else None

    for t in range(len(done) + 1, n_steps + 1):
        if stop_after is not None and t > stop_after:
            break
        sdir = rd.step(t)
        sdir.mkdir(parents=True, exist_ok=True)
        step_classes = list(ls.step_classes[t - 1])
        old_classes = ls.classes_upto(t - 1)
        step_items = data.steps[t - 1]
        replay: list[ReplaySample] = []
        replay_counts: dict = {}

        if t == 1 or config.mode == "joint":
            classes = ls.classes_upto(t)
            torch.manual_seed(_stage_seed(config.seed, "init", t))
            model = SegModel(classes, config.downstream_corpus.image_size, config.seg_width, step=t)
            if config.mode == "joint":
                items = [it.with_mask(relabel_mask(it.mask, classes)) for it in data.train if np.isin(it.mask, classes).any()]
            else:
                items = step_items
            samples = _train_samples(items, model)
            old_model = None
            lr, epochs = config.lr_base, config.epochs_base
        else:
            old_model = frozen_copy(model)
            if config.uses_generator and config.budget.total_size + (config.budget.per_class or 0) > 0:
                replay = build_replay_set(
                    store, denoiser, schedule, old_model, config.effective_budget(), old_classes,
                    seed=_stage_seed(config.seed, "replay", t),
                    strength=config.ddr_strength,
                    conf_threshold=config.weights.conf_threshold,
                    num_steps=config.sampler_steps,
                    prompt_only=config.mode == "prompt_only_replay",
                )
                rep = audit_replay(replay, store, old_classes)
                rep["step"] = t
                replay_audits.append(rep)
                _write_json(replay_audits_path, replay_audits)
                if config.dump_replay:
                    save_replay(replay, sdir / "replay")
            elif config.mode == "exemplar_memory":
                replay = exemplar_replay(exemplars, config.effective_budget(), old_classes, _stage_seed(config.seed, "exemplar", t))
            model = extend_head(model, step_classes, seed=_stage_seed(config.seed, "head", t) % (2**31))
            samples = _train_samples(step_items, model, replay)
            lr, epochs = config.lr_step, config.epochs_step
            if config.mode == "finetune":
                old_model = None
        for s in replay:
            replay_counts[s.origin] = replay_counts.get(s.origin, 0) + 1

        log.info("step %d: %d step images, %d replay samples, mode %s", t, len(step_items), len(replay), config.mode)
        stats_path = sdir / "train_log.jsonl"
        with stats_path.open("w") as fh:
            train_segmenter(
                model, old_model, samples, config.weights, epochs, config.batch_size, lr,
                seed=_stage_seed(config.seed, "train", t) % (2**31),
                on_stats=lambda st: fh.write(json.dumps(st, sort_keys=True) + "\n"),
            )
        seg_hash = save_segmenter(sdir / "segmenter.ckpt", model, {"mode": config.mode, "seed": config.seed})

        record = evaluate(model, validation_set(data, t), ls, t)
        record.update(mode=config.mode, seed=config.seed, n_train=len(samples), n_replay=len(replay),
                      replay_counts=replay_counts, budget=config.budget.total_size, segmenter_hash=seg_hash)
        (sdir / "metrics.jsonl").write_text(json.dumps(record, sort_keys=True) + "\n")

        # Generator / knowledge update for C_t; only step-(t) artifacts feed step t+1 replay.
        tokens = {}
        if config.uses_generator:
            tokens, audit = _learn_and_audit(config, rd, denoiser, schedule, step_items, step_classes, store, t)
            gen_audit += audit
            _write_json(audit_path, gen_audit)
        if config.mode not in ("finetune", "joint"):
            store = update_knowledge(store, step_items, step_classes, tokens, config.canny, t)
            tmp = rd.root / "knowledge.tmp"
            if tmp.exists():
                shutil.rmtree(tmp)
            store.save(tmp)
            if rd.knowledge.exists():
                shutil.rmtree(rd.knowledge)
            tmp.replace(rd.knowledge)
        if config.mode == "exemplar_memory":
            exemplars = exemplar_update(exemplars, step_items, step_classes, config.exemplars_per_class,
                                        _stage_seed(config.seed, "exemplar-pick", t) % (2**31))
            if rd.exemplars.exists():
                shutil.rmtree(rd.exemplars)
            save_replay(exemplars, rd.exemplars)
        _write_json(sdir / "done.json", {"step": t})
        records.append(record)
    return records


def fork_run(src: str | Path, dst: str | Path, config: RunConfig, upto_step: int) -> None:
    """Start `dst` from the completed steps <= upto_step of `src` (e.g. for a replay-size sweep).

    Only valid when the forked steps do not depend on the changed settings.
    """
    s, d = RunDir(src), RunDir(dst)
    if any(t not in s.completed_steps() for t in range(1, upto_step + 1)):
        raise ValueError(f"{src} has not completed steps 1..{upto_step}")
    d.root.mkdir(parents=True, exist_ok=True)
    for t in range(1, upto_step + 1):
        shutil.copytree(s.step(t), d.step(t), dirs_exist_ok=True)
    for name in ("denoiser.ckpt", "generator_audit.json", "replay_audit.json"):
        if (s.root / name).exists():
            shutil.copyfile(s.root / name, d.root / name)
    for sub in ("knowledge", "exemplars"):
        if (s.root / sub).exists():
            shutil.copytree(s.root / sub, d.root / sub, dirs_exist_ok=True)
    _write_json(d.config, config.to_dict())


def read_metrics(run_dir: str | Path) -> tuple[list[dict], int]:
    """All step records of a run, sorted by step, plus the number of unreadable lines skipped."""
    rd = RunDir(run_dir)
    records, bad = [], 0
    for path in sorted(rd.root.glob("step_*/metrics.jsonl"), key=lambda p: int(p.parent.name.split("_")[1])):
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict) or "step" not in rec:
                    raise ValueError("not a metrics record")
            except ValueError:
                log.warning("skipping corrupted metrics line in %s", path)
                bad += 1
                continue
            records.append(rec)
    return records, bad


def find_runs(root: str | Path) -> list[Path]:
    root = Path(root)
    if (root / "config.json").exists():
        return [root]
    return sorted(p.parent for p in root.rglob("config.json"))


def metrics_digest(run_dir: str | Path) -> str:
    h = hashlib.sha256()
    for path in sorted(Path(run_dir).glob("step_*/metrics.jsonl")):
        h.update(path.read_bytes())
    return h.hexdigest()
