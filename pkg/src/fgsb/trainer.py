"""Training loop: generation pass, then discriminator, critic and generator updates."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import Field, model_validator

from .bridge import BridgeConfig, sample_timestep, training_transition
from .config import StrictModel
from .dataset import DatasetManifest, SlicePair, augment_hflip, extract_prior_mask, stack_pairs
from .losses import (LossReport, LossWeights, discriminator_terms, encode_pair, loss_adv_generator, loss_cpl,
                     loss_identity, loss_mi_estimator, loss_mi_generator, loss_patchnce, loss_rec,
                     loss_total_generator, loss_weighted_patchnce)
from .models import ModelBundle, ModelConfig, build_bundle, count_parameters, random_crop_box

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fgsb-checkpoint"
CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss in term {term!r}: {value}")
        self.term = term


class AblationFlags(StrictModel):
    no_sb: bool = False
    no_ssl_d: bool = False
    no_noise: bool = False
    use_prior: bool = True


class TrainConfig(StrictModel):
    epochs: int = Field(50, ge=1)
    lr: float = Field(1e-4, gt=0)
    lr_decay_start: int | None = Field(None, ge=0)
    betas: tuple[float, float] = (0.5, 0.999)
    batch_size: int = Field(1, ge=1)
    flip_prob: float = Field(0.5, ge=0, le=1)
    seed: int = 0
    weights: LossWeights = Field(default_factory=LossWeights)
    bridge: BridgeConfig = Field(default_factory=BridgeConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    flags: AblationFlags = Field(default_factory=AblationFlags)
    prior_source: Literal["mask", "threshold"] = "mask"
    prior_threshold: float = 0.6
    idt_every: int = Field(1, ge=1)
    mi_literal: bool = False
    checkpoint_every: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_decay(self):
        if self.lr_decay_start is not None and self.lr_decay_start >= self.epochs:
            raise ValueError("lr_decay_start must be < epochs")
        return self

    @property
    def decay_start(self) -> int:
        return self.epochs // 2 if self.lr_decay_start is None else self.lr_decay_start

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Constant until ``decay_start``, then linear towards 0 at ``epochs``."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    start = config.decay_start
    if epoch < start:
        return config.lr
    return config.lr * (config.epochs - epoch) / (config.epochs - start)


@dataclass(frozen=True)
class Components:
    nfe: int
    tau: float
    s_schedule: tuple[float, ...]
    iterative: bool
    use_critic: bool
    ssl_decoders: bool
    use_prior: bool
    terms: frozenset[str]


def apply_ablation(config: TrainConfig) -> Components:
    f = config.flags
    nfe = 1 if f.no_sb else config.bridge.nfe
    tau = 0.0 if f.no_noise else config.bridge.tau
    sched = config.bridge.s_schedule if nfe == config.bridge.nfe else BridgeConfig(nfe=nfe).s_schedule
    if f.no_sb:
        # single forward pass, pixel + contrastive objective, no trajectory
        terms = {"adv", "rec", "reg"}
    else:
        terms = {"adv", "sb", "rec", "reg", "idt"}
        if f.use_prior:
            terms |= {"cpl", "wreg"}
    w = config.weights
    terms = {t for t in terms if w.weight(t) > 0}
    return Components(nfe=nfe, tau=tau, s_schedule=tuple(sched), iterative=not f.no_sb,
                      use_critic=not f.no_sb, ssl_decoders=not f.no_ssl_d,
                      use_prior=f.use_prior and not f.no_sb, terms=frozenset(terms))


@dataclass
class GenerationResult:
    T: int
    x_t: torch.Tensor
    x_hat: torch.Tensor
    z: torch.Tensor
    intermediates: list[torch.Tensor] = field(default_factory=list)


class Trainer:
    def __init__(self, config: TrainConfig, canvas: tuple[int, int], device: str | torch.device = "cpu",
                 dtype: torch.dtype = torch.float32):
        self.config = config
        self.comp = apply_ablation(config)
        self.device = torch.device(device)
        self.dtype = dtype
        self.canvas = tuple(canvas)
        self.bundle = build_bundle(config.model, self.comp.nfe, with_critic=self.comp.use_critic,
                                   ssl_decoders=self.comp.ssl_decoders, seed=config.seed)
        self.bundle.to(device=self.device, dtype=dtype)
        self.bundle.canvas = self.canvas
        b1, b2 = config.betas
        g, d, e, f = (self.bundle.generator, self.bundle.discriminator, self.bundle.critic, self.bundle.projector)
        self.opt = {
            "generator": torch.optim.Adam(list(g.parameters()) + list(f.parameters()), lr=config.lr, betas=(b1, b2)),
            "discriminator": torch.optim.Adam(d.parameters(), lr=config.lr, betas=(b1, b2)),
        }
        if e is not None:
            self.opt["critic"] = torch.optim.Adam(e.parameters(), lr=config.lr, betas=(b1, b2))
        self.rng = torch.Generator().manual_seed(config.seed)
        self.data_rng = np.random.default_rng([config.seed, 1])
        self.epoch = 0
        self.global_step = 0

    # -- helpers ---------------------------------------------------------

    def set_lr(self, lr: float) -> None:
        for opt in self.opt.values():
            for group in opt.param_groups:
                group["lr"] = lr

    def _tensor(self, arr) -> torch.Tensor:
        return torch.as_tensor(arr, dtype=self.dtype, device=self.device)

    def _prior(self, pairs: list[SlicePair], masks: np.ndarray) -> np.ndarray:
        if self.config.prior_source == "threshold":
            return np.stack([extract_prior_mask(p.target, self.config.prior_threshold) for p in pairs])[:, None]
        return masks

    def _randn(self, *shape) -> torch.Tensor:
        return torch.randn(*shape, generator=self.rng, dtype=self.dtype).to(self.device)

    def generate(self, x_a: torch.Tensor, x_b: torch.Tensor, T: int) -> GenerationResult:
        """Run steps ``0..T``; only the last generator call keeps its graph.

        Each step's prediction (not the noisy input) is blended with the target
        to form the next input, using the weight of the step being produced.
        """
        g = self.bundle.generator
        n = x_a.shape[0]
        x_t = x_a
        inter = []
        with torch.no_grad():
            for i in range(T):
                x_hat = g(x_t, i, self._randn(n, g.z_dim))
                inter.append(x_hat)
                x_t = training_transition(x_b, x_hat, self.comp.s_schedule[i + 1], self.comp.tau, self.rng)
        z = self._randn(n, g.z_dim)
        return GenerationResult(T, x_t, g(x_t, T, z), z, inter)

    def _negatives(self, x_b, prior, pool: list[SlicePair] | None, current: SlicePair):
        n = x_b.shape[0]
        if n > 1:
            return torch.roll(x_b, 1, 0), (None if prior is None else torch.roll(prior, 1, 0))
        if not pool or len(pool) < 2:
            raise ValueError("batch size 1 needs a pool of at least 2 slices to draw MI negatives from")
        # draw from the pool minus the current slice
        j = int(torch.randint(0, len(pool) - 1, (1,), generator=self.rng))
        key = (current.subject_id, current.slice_index)
        cur = next((i for i, p in enumerate(pool) if (p.subject_id, p.slice_index) == key), len(pool) - 1)
        if j >= cur:
            j += 1
        _, tgt, mask = stack_pairs([pool[j]])
        neg_prior = self._tensor(self._prior([pool[j]], mask)) if prior is not None else None
        return self._tensor(tgt), neg_prior

    @staticmethod
    def _check(name: str, value: torch.Tensor) -> None:
        v = float(value.detach())
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)

    # -- one step --------------------------------------------------------

    def train_step(self, batch: list[SlicePair], pool: list[SlicePair] | None = None) -> LossReport:
        cfg, comp, b = self.config, self.comp, self.bundle
        g, d, e, proj = b.generator, b.discriminator, b.critic, b.projector
        b.train()
        src, tgt, masks = stack_pairs(batch)
        x_a, x_b = self._tensor(src), self._tensor(tgt)
        prior = self._tensor(self._prior(batch, masks)) if comp.use_prior else None

        T = sample_timestep(self.rng, comp.nfe) if comp.iterative else 0
        gen = self.generate(x_a, x_b, T)
        x_t, x_hat, z = gen.x_t, gen.x_hat, gen.z
        extras: dict[str, float] = {"T": float(T)}

        # discriminator
        crop = random_crop_box(self.canvas, d.stride_crop, self.rng) if d.ssl else None
        self.opt["discriminator"].zero_grad(set_to_none=True)
        d_terms = discriminator_terms(d, x_hat, x_b, T, crop)
        loss_d = sum(d_terms.values())
        for k, v in d_terms.items():
            self._check(f"D/{k}", v)
            extras[f"D/{k}"] = float(v.detach())
        extras["D/total"] = float(loss_d.detach())
        loss_d.backward()
        self.opt["discriminator"].step()

        # MI critic
        if e is not None:
            neg, neg_prior = self._negatives(x_b, prior, pool, batch[0])
            self.opt["critic"].zero_grad(set_to_none=True)
            loss_e = loss_mi_estimator(e, x_t.detach(), x_b, prior, neg, neg_prior, cfg.mi_literal)
            self._check("E/loss", loss_e)
            extras["E/loss"] = float(loss_e.detach())
            loss_e.backward()
            self.opt["critic"].step()

        # generator
        self.opt["generator"].zero_grad(set_to_none=True)
        mc, w = cfg.model, cfg.weights
        nce_kw = dict(num_patches=mc.num_patches, temperature=mc.nce_temperature, rng=self.rng)
        terms: dict[str, torch.Tensor] = {}
        for p in d.parameters():
            p.requires_grad_(False)
        try:
            if "adv" in comp.terms:
                terms["adv"] = loss_adv_generator(d, x_hat, T)
        finally:
            for p in d.parameters():
                p.requires_grad_(True)
        if "sb" in comp.terms:
            terms["sb"] = loss_mi_generator(e, x_t, x_hat, prior)
        if "rec" in comp.terms:
            terms["rec"] = loss_rec(x_hat, x_b)
        feats = encode_pair(g, x_hat, x_a, T, z) if {"reg", "wreg"} & comp.terms else None
        if "reg" in comp.terms:
            terms["reg"] = loss_patchnce(g, proj, x_hat, x_a, T, z, feats=feats, **nce_kw)
        if "cpl" in comp.terms:
            terms["cpl"] = loss_cpl(x_hat, x_b, prior)
        if "wreg" in comp.terms:
            terms["wreg"] = loss_weighted_patchnce(g, proj, x_hat, x_a, prior, T, z, feats=feats, **nce_kw)
        if "idt" in comp.terms and self.global_step % cfg.idt_every == 0:
            terms["idt"] = loss_identity(g, proj, x_b, T, z, rec_weight=w.lambda_rec,
                                         nce_weight=w.lambda_reg, **nce_kw)
        for k, v in terms.items():
            self._check(k, v)
        report = loss_total_generator(terms, w)
        self._check("total", report.tensor)
        report.tensor.backward()
        self.opt["generator"].step()

        report.extras = extras
        self.global_step += 1
        return report

    # -- epochs, checkpoints ---------------------------------------------

    def epoch_order(self, epoch: int, n: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, 2, epoch]).permutation(n)

    def run_epoch(self, pairs: list[SlicePair], metrics_file=None) -> list[dict]:
        cfg = self.config
        lr = lr_at(self.epoch, cfg)
        self.set_lr(lr)
        order = self.epoch_order(self.epoch, len(pairs))
        records = []
        bs = cfg.batch_size
        for start in range(0, len(order), bs):
            batch = [augment_hflip(pairs[i], cfg.flip_prob, self.data_rng) for i in order[start:start + bs]]
            report = self.train_step(batch, pool=pairs)
            rec = {"epoch": self.epoch, "step": self.global_step, "lr": lr, **report.as_dict()}
            records.append(rec)
            if metrics_file is not None:
                metrics_file.write(json.dumps(rec, sort_keys=True) + "\n")
        if metrics_file is not None:
            metrics_file.flush()
        self.epoch += 1
        return records

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.model_dump(mode="json"),
            "config_digest": self.config.digest(),
            "canvas": list(self.canvas),
            "epoch": self.epoch,
            "global_step": self.global_step,
            "networks": {k: v.state_dict() for k, v in self.bundle.networks().items()},
            "optimizers": {k: v.state_dict() for k, v in self.opt.items()},
            "rng": {"torch": self.rng.get_state(), "numpy": self.data_rng.bit_generator.state},
            "param_counts": count_parameters(self.bundle),
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)
        return path

    def load_state_dict(self, state: dict) -> None:
        if state["config_digest"] != self.config.digest():
            raise ValueError("checkpoint was written with a different config")
        for k, net in self.bundle.networks().items():
            net.load_state_dict(state["networks"][k])
        for k, opt in self.opt.items():
            opt.load_state_dict(state["optimizers"][k])
        self.rng.set_state(state["rng"]["torch"])
        self.data_rng.bit_generator.state = state["rng"]["numpy"]
        self.epoch = state["epoch"]
        self.global_step = state["global_step"]

    @classmethod
    def from_checkpoint(cls, path: str | Path, device="cpu") -> "Trainer":
        state = load_checkpoint(path)
        tr = cls(TrainConfig.model_validate(state["config"]), tuple(state["canvas"]), device=device)
        tr.load_state_dict(state)
        return tr


def load_checkpoint(path: str | Path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=True)
    if state.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an fgsb checkpoint")
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {state.get('version')}")
    return state


def load_bundle(path: str | Path, device="cpu") -> tuple[ModelBundle, TrainConfig]:
    """Rebuild the networks stored in a checkpoint (no optimizer state)."""
    state = load_checkpoint(path)
    config = TrainConfig.model_validate(state["config"])
    comp = apply_ablation(config)
    bundle = build_bundle(config.model, comp.nfe, with_critic=comp.use_critic, ssl_decoders=comp.ssl_decoders)
    for k, net in bundle.networks().items():
        net.load_state_dict(state["networks"][k])
    bundle.to(device)
    bundle.canvas = tuple(state["canvas"])
    bundle.eval()
    return bundle, config


def train(manifest: DatasetManifest, config: TrainConfig, out_dir: str | Path | None = None,
          resume: str | Path | None = None, device="cpu", stop_after: int | None = None):
    """Train on the manifest's train split.

    Writes ``checkpoints/last.pt`` (plus ``epoch_XXXX.pt`` at the configured
    cadence) and a JSON-lines ``metrics.jsonl`` under ``out_dir``. Returns the
    trainer and the per-step history. ``stop_after`` ends the run after that
    many total epochs, which is how interrupted runs are simulated.
    """
    pairs = manifest.subset("train")
    if not pairs:
        raise ValueError("training split is empty")
    trainer = Trainer(config, manifest.canvas, device=device)
    if resume is not None:
        trainer.load_state_dict(load_checkpoint(resume))
    out = Path(out_dir) if out_dir is not None else None
    history: list[dict] = []
    metrics_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        if resume is None or not metrics_path.exists():
            metrics_file = metrics_path.open("w")
        else:
            metrics_file = _truncate_metrics(metrics_path, trainer.global_step)
    try:
        end = config.epochs if stop_after is None else min(config.epochs, stop_after)
        while trainer.epoch < end:
            history.extend(trainer.run_epoch(pairs, metrics_file))
            log.info("epoch %d/%d done (step %d)", trainer.epoch, config.epochs, trainer.global_step)
            if out is not None:
                trainer.save(out / "checkpoints" / "last.pt")
                if trainer.epoch % config.checkpoint_every == 0 or trainer.epoch == config.epochs:
                    trainer.save(out / "checkpoints" / f"epoch_{trainer.epoch:04d}.pt")
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return trainer, history


def _truncate_metrics(path: Path, upto_step: int):
    """Keep records up to ``upto_step`` so a resumed stream has no duplicates."""
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] <= upto_step]
    f = path.open("w")
    f.write("".join(ln + "\n" for ln in keep))
    return f
