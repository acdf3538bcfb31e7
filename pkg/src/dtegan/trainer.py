"""Training loop: alternating discriminator/generator updates with per-group
optimizers enforcing the gradient-routing rules, EMA of the sampling path,
epoch-scheduled ablation flags, and bit-exact checkpoint/resume.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .data import (DEFAULT_MAX_LEN, Batch, CaptionedImageDataset,
                   load_dataset, make_batches, synthesize_toy_dataset)
from .discriminator import Discriminator
from .generator import Generator, sample_noise
from .losses import (DEFAULT_MAGP_K, DEFAULT_MAGP_P, DEFAULT_TEMPERATURE,
                     LossBundle, RoutingFlags, adv_g, assemble_losses,
                     contrastive_loss, hinge_d, magp)
from .text import GROUP_NAMES, DualTextEncoder, partition_parameters

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MagpSettings:
    enabled: bool = False
    k: float = DEFAULT_MAGP_K
    p: float = DEFAULT_MAGP_P


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; ``paper_preset`` restores the published dimensions.

    ``d_s`` is the sentence embedding width (the Bi-LSTM uses d_s/2 per
    direction and the word embeddings are d_s wide). ``dataset`` is either
    'toy' or a manifest path; the toy set is regenerated deterministically
    from ``dataset_seed`` (defaulting to ``seed``).
    """

    resolution: int = 64
    ch: int = 16
    d_z: int = 32
    d_s: int = 64
    d_c: int = 32
    batch_size: int = 16
    lr: float = 2e-4
    lr_disc: float = None  # critic-only override; None keeps the shared lr
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 60
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    temperature: float = DEFAULT_TEMPERATURE
    flags: RoutingFlags = field(default_factory=RoutingFlags)
    magp: MagpSettings = field(default_factory=MagpSettings)
    ema_decay: float = 0.999
    seed: int = 0
    dataset: str = "toy"
    n_items: int = 120
    dataset_seed: int = None
    caption_policy: str = "single"
    max_len: int = DEFAULT_MAX_LEN
    sentence_pooling: str = "direction_ends"
    use_spectral_norm: bool = True
    truncation_psi: float = 2.0
    checkpoint_every: int = None

    @classmethod
    def paper_preset(cls, **overrides) -> "TrainConfig":
        base = dict(resolution=256, ch=64, d_z=100, d_s=256, d_c=200,
                    batch_size=24, epochs=600)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.resolution < 16 or self.resolution & (self.resolution - 1) != 0:
            raise ValueError("resolution must be a power of two >= 16")
        if self.d_s < 2 or self.d_s % 2 != 0:
            raise ValueError("d_s must be an even number >= 2")
        if min(self.ch, self.d_z, self.d_c, self.n_items) < 1:
            raise ValueError("ch, d_z, d_c and n_items must be positive")
        if self.lr <= 0 or self.temperature <= 0:
            raise ValueError("lr and temperature must be positive")
        if self.lr_disc is not None and self.lr_disc <= 0:
            raise ValueError("lr_disc must be positive when set")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.caption_policy not in ("single", "dual"):
            raise ValueError(f"unknown caption_policy {self.caption_policy!r}")
        if self.magp.enabled and (self.magp.k <= 0 or self.magp.p <= 0):
            raise ValueError("magp k and p must be positive")
        self.flags.validate()

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            if f.name in ("flags", "magp"):
                continue
            d[f.name] = getattr(self, f.name)
        d.update(self.flags.to_dict())
        d.update({"magp_enabled": self.magp.enabled, "magp_k": self.magp.k,
                  "magp_p": self.magp.p})
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        flag_keys = RoutingFlags().to_dict().keys()
        flags = RoutingFlags(**{k: d.pop(k) for k in list(flag_keys) if k in d})
        magp_cfg = MagpSettings(enabled=d.pop("magp_enabled", False),
                                k=d.pop("magp_k", DEFAULT_MAGP_K),
                                p=d.pop("magp_p", DEFAULT_MAGP_P))
        known = {f.name for f in fields(cls)} - {"flags", "magp"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(flags=flags, magp=magp_cfg, **d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def apply_routing_schedule(epoch: int, flags: RoutingFlags) -> RoutingFlags:
    """Resolve epoch-scheduled flags: a scheduled flag turns on exactly at its
    configured epoch. Returns schedule-free effective flags."""
    flags.validate()
    sg = flags.sg_to_d or (flags.sg_to_d_after_epoch is not None
                           and epoch >= flags.sg_to_d_after_epoch)
    gl = flags.g_loss_to_shared or (flags.g_loss_after_epoch is not None
                                    and epoch >= flags.g_loss_after_epoch)
    return replace(flags, sg_to_d=sg, g_loss_to_shared=gl,
                   sg_to_d_after_epoch=None, g_loss_after_epoch=None)


def build_dataset(config: TrainConfig) -> CaptionedImageDataset:
    if config.dataset == "toy":
        seed = config.dataset_seed if config.dataset_seed is not None else config.seed
        return synthesize_toy_dataset(config.n_items, config.resolution, seed, config.max_len)
    return load_dataset(config.dataset, config.resolution, max_len=config.max_len)


def build_models(config: TrainConfig, vocab_size: int):
    """Construct (text encoders, generator, discriminator) with seeded init.

    The generator's conditioning width depends on the routing flags: both
    sentence embeddings concatenated by default, one embedding when the
    generator has no access to the discriminator side or the stacks are shared.
    """
    torch.manual_seed(config.seed)
    flags = config.flags
    text = DualTextEncoder(vocab_size, config.d_s // 2, shared=flags.shared_embeddings,
                           sentence_pooling=config.sentence_pooling)
    cond_dim = config.d_s if (flags.shared_embeddings or not flags.sd_to_g) else 2 * config.d_s
    generator = Generator(config.resolution, config.ch, config.d_z, cond_dim,
                          config.d_c, config.use_spectral_norm)
    discriminator = Discriminator(config.resolution, config.ch, config.d_s,
                                  conditional=config.magp.enabled,
                                  use_spectral_norm=config.use_spectral_norm)
    return text, generator, discriminator


def batch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch * 10_007 + 12345) % (2 ** 63)


@dataclass
class RunDirectory:
    """Layout of one training run: config snapshot, checkpoints, metrics
    stream, reports and image samples, all carrying the config hash."""

    path: Path

    def __post_init__(self):
        self.path = Path(self.path)

    @property
    def config_path(self) -> Path:
        return self.path / "config.json"

    @property
    def checkpoints(self) -> Path:
        return self.path / "checkpoints"

    @property
    def metrics_path(self) -> Path:
        return self.path / "metrics.log"

    @property
    def reports(self) -> Path:
        return self.path / "reports"

    @property
    def samples(self) -> Path:
        return self.path / "samples"

    def ensure(self):
        for p in (self.path, self.checkpoints, self.reports, self.samples):
            p.mkdir(parents=True, exist_ok=True)
        return self


class Trainer:
    """Owns the model stack, one optimizer per parameter group, the EMA shadow
    of the sampling path ({gen, emb_G}), and the training RNG stream.

    All stochastic draws during training come from ``self.rng`` (model side)
    and the per-epoch batch seed (data side), so runs are bit-identical given
    (config, seed) and resumable from checkpoints.
    """

    def __init__(self, config: TrainConfig, dataset: CaptionedImageDataset = None):
        config.validate()
        self.config = config
        self.dataset = dataset if dataset is not None else build_dataset(config)
        if self.dataset.resolution != config.resolution:
            raise ValueError(f"dataset resolution {self.dataset.resolution} != "
                             f"config resolution {config.resolution}")
        self.text, self.generator, self.discriminator = build_models(
            config, self.dataset.vocab.size)
        self.groups = partition_parameters(self.generator, self.discriminator, self.text)
        self.optimizers = {}
        for name in GROUP_NAMES:
            params = self.groups.parameters(name)
            if params:
                lr = config.lr_disc if (name == "disc" and config.lr_disc is not None) \
                    else config.lr
                self.optimizers[name] = torch.optim.Adam(
                    params, lr=lr, betas=(config.beta1, config.beta2))
        self.ema = {name: p.detach().clone()
                    for name, p in self.groups.named("gen") + self.groups.named("emb_G")}
        self.rng = torch.Generator()
        self.rng.manual_seed((config.seed * 7919 + 1) % (2 ** 63))
        self.epoch = 0
        self.step = 0
        self.step_in_epoch = 0

    # -- helpers ------------------------------------------------------------

    def batch_tensors(self, batch: Batch):
        images = torch.from_numpy(batch.images).permute(0, 3, 1, 2).contiguous()
        return (images,
                torch.from_numpy(batch.tokens_g), torch.from_numpy(batch.lengths_g),
                torch.from_numpy(batch.tokens_d), torch.from_numpy(batch.lengths_d))

    def effective_flags(self) -> RoutingFlags:
        return apply_routing_schedule(self.epoch, self.config.flags)

    def _sentence_for_d(self, enc, eff: RoutingFlags) -> torch.Tensor:
        """Sentence embedding consumed by the discriminator side. With
        sg_to_d the generator-side embedding joins by summation, detached so
        discriminator losses never train emb_G."""
        if eff.sg_to_d:
            return enc.s_d + enc.s_g.detach()
        return enc.s_d

    def _generator_inputs(self, enc, eff: RoutingFlags):
        """(primary, secondary, contrastive target) for the generator phase,
        with detachment encoding the routing rules."""
        if eff.shared_embeddings:
            s = enc.s_g if eff.g_loss_to_shared else enc.s_g.detach()
            return s, None, s
        if eff.sd_to_g:
            sd = enc.s_d.detach()
            return enc.s_g, sd, sd
        return enc.s_g, None, enc.s_g

    def _zero_grads(self, names):
        for n in names:
            if n in self.optimizers:
                self.optimizers[n].zero_grad(set_to_none=True)

    def _step_optimizers(self, names):
        for n in names:
            if n in self.optimizers:
                self.optimizers[n].step()

    def _set_disc_requires_grad(self, flag: bool):
        for p in self.groups.parameters("disc"):
            p.requires_grad_(flag)

    def _g_update_groups(self, eff: RoutingFlags):
        if eff.shared_embeddings:
            return ("gen", "emb_D") if eff.g_loss_to_shared else ("gen",)
        return ("gen", "emb_G")

    # -- core step ----------------------------------------------------------

    def train_step(self, batch: Batch) -> LossBundle:
        """One discriminator update then one generator update, then EMA.

        D phase: hinge loss on real/fake logits (fake generated without graph)
        plus the weighted real-pair contrastive loss, and the gradient penalty
        when enabled; updates {disc, emb_D}. G phase: fresh latents, the
        adversarial + contrastive + KL total with the discriminator frozen and
        the discriminator-side embedding detached; updates {gen, emb_G} (the
        shared group instead when the shared-with-generator-loss ablation is
        active). EMA shadow then absorbs the sampling-path parameters.
        """
        cfg = self.config
        eff = self.effective_flags()
        images, tg, lg, td, ld = self.batch_tensors(batch)
        n = images.shape[0]

        # ---- discriminator phase ----
        enc = self.text(tg, lg, td, ld)
        s_for_d = self._sentence_for_d(enc, eff)
        with torch.no_grad():
            z = sample_noise(n, cfg.d_z, rng=self.rng)
            prim, sec, _ = self._generator_inputs(enc, eff)
            fake, _ = self.generator(z, prim, sec, rng=self.rng)
        fake = fake.detach()
        if self.discriminator.conditional:
            real_out = self.discriminator(images, s_for_d)
            fake_out = self.discriminator(fake, s_for_d.detach())
        else:
            real_out = self.discriminator(images)
            fake_out = self.discriminator(fake)
        adv_d_term = hinge_d(real_out.logit, fake_out.logit)
        cont_d_term = contrastive_loss(real_out.f_v, s_for_d, cfg.temperature)
        magp_term = None
        if cfg.magp.enabled:
            magp_term = magp(images, s_for_d, self.discriminator, cfg.magp.k, cfg.magp.p)
        total_d = adv_d_term + cfg.lambda3 * cont_d_term
        if magp_term is not None:
            total_d = total_d + magp_term
        self._zero_grads(("disc", "emb_D"))
        total_d.backward()
        self._step_optimizers(("disc", "emb_D"))

        # ---- generator phase ----
        enc2 = self.text(tg, lg, td, ld)
        prim, sec, cont_target = self._generator_inputs(enc2, eff)
        z2 = sample_noise(n, cfg.d_z, rng=self.rng)
        self._set_disc_requires_grad(False)
        fake2, cond = self.generator(z2, prim, sec, rng=self.rng)
        if self.discriminator.conditional:
            d_cond = self._sentence_for_d(enc2, eff).detach()
            out2 = self.discriminator(fake2, d_cond)
        else:
            out2 = self.discriminator(fake2)
        adv_g_term = adv_g(out2.logit)
        cont_g_term = contrastive_loss(out2.f_v, cont_target, cfg.temperature)
        ca_kl_term = cond.kl.mean()
        total_g = adv_g_term + cfg.lambda1 * ca_kl_term + cfg.lambda2 * cont_g_term
        g_groups = self._g_update_groups(eff)
        self._zero_grads(g_groups)
        total_g.backward()
        self._step_optimizers(g_groups)
        self._set_disc_requires_grad(True)

        # ---- EMA of the sampling path ----
        decay = cfg.ema_decay
        with torch.no_grad():
            for name, p in self.groups.named("gen") + self.groups.named("emb_G"):
                self.ema[name].mul_(decay).add_(p.detach(), alpha=1.0 - decay)

        try:
            bundle = assemble_losses(
                adv_g_term, adv_d_term, cont_g_term, cont_d_term, ca_kl_term,
                magp_term, flags=eff,
                lambdas=(cfg.lambda1, cfg.lambda2, cfg.lambda3),
                temperature=cfg.temperature, magp_mode=cfg.magp.enabled)
        except ValueError as exc:
            raise RuntimeError(
                f"loss diverged at step {self.step} (epoch {self.epoch}): {exc}") from exc
        self.step += 1
        self.step_in_epoch += 1
        return bundle

    # -- loop and artifacts ---------------------------------------------------

    def train(self, run_dir=None, epochs: int = None, progress: bool = False):
        """Run the configured number of epochs, streaming per-step loss
        records and writing final + EMA checkpoints when a run directory is
        given. Resumes mid-epoch if the state says so."""
        cfg = self.config
        target_epochs = cfg.epochs if epochs is None else epochs
        rd = None
        metrics_fh = None
        if run_dir is not None:
            rd = RunDirectory(run_dir).ensure()
            if not rd.config_path.exists():
                snapshot = {"config": cfg.to_dict(), "config_hash": cfg.config_hash()}
                rd.config_path.write_text(json.dumps(snapshot, indent=2, sort_keys=True))
            metrics_fh = open(rd.metrics_path, "a", encoding="utf-8")
        try:
            while self.epoch < target_epochs:
                batches = make_batches(self.dataset, cfg.batch_size,
                                       seed=batch_seed(cfg.seed, self.epoch),
                                       caption_policy=cfg.caption_policy)
                for b in batches[self.step_in_epoch:]:
                    bundle = self.train_step(b)
                    if metrics_fh is not None:
                        rec = {"step": self.step, "epoch": self.epoch}
                        rec.update(bundle.to_dict())
                        metrics_fh.write(json.dumps(rec) + "\n")
                self.epoch += 1
                self.step_in_epoch = 0
                if progress:
                    print(f"epoch {self.epoch}/{target_epochs} done "
                          f"(step {self.step})", flush=True)
                if rd is not None and cfg.checkpoint_every and \
                        self.epoch % cfg.checkpoint_every == 0 and self.epoch < target_epochs:
                    save_checkpoint(self, rd.checkpoints / f"epoch_{self.epoch:04d}.pt")
            if rd is not None:
                save_checkpoint(self, rd.checkpoints / "final.pt")
                save_checkpoint(self, rd.checkpoints / "ema.pt", apply_ema=True)
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
        return rd

    # -- EMA view -------------------------------------------------------------

    def ema_generator(self):
        """Fresh (generator, text encoder) modules carrying the EMA parameters
        of {gen, emb_G} and the live buffers; eval mode. The discriminator-side
        encoder is the current (unaveraged) one."""
        text2, gen2, _ = build_models(self.config, self.dataset.vocab.size)
        gen2.load_state_dict(self.generator.state_dict())
        text2.load_state_dict(self.text.state_dict())
        gen_params = dict(gen2.named_parameters())
        text_params = dict(text2.named_parameters())
        with torch.no_grad():
            for name, tensor in self.ema.items():
                if name.startswith("gen."):
                    gen_params[name[len("gen."):]].copy_(tensor)
                elif name.startswith("emb_G."):
                    text_params["encoder_g." + name[len("emb_G."):]].copy_(tensor)
        gen2.eval()
        text2.eval()
        return gen2, text2

    # -- state ----------------------------------------------------------------

    def state_payload(self, apply_ema: bool = False) -> dict:
        models = {"generator": self.generator.state_dict(),
                  "discriminator": self.discriminator.state_dict(),
                  "text": self.text.state_dict()}
        if apply_ema:
            models = {k: {n: v.clone() for n, v in sd.items()} for k, sd in models.items()}
            for name, tensor in self.ema.items():
                if name.startswith("gen."):
                    models["generator"][name[len("gen."):]] = tensor.clone()
                elif name.startswith("emb_G."):
                    models["text"]["encoder_g." + name[len("emb_G."):]] = tensor.clone()
        return {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "group_names": list(GROUP_NAMES),
            "group_sizes": {n: self.groups.count(n) for n in GROUP_NAMES},
            "vocab": self.dataset.vocab.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "step_in_epoch": self.step_in_epoch,
            "models": models,
            "optimizers": {n: opt.state_dict() for n, opt in self.optimizers.items()},
            "ema": {n: t.clone() for n, t in self.ema.items()},
            "rng": self.rng.get_state(),
            "ema_applied": apply_ema,
        }

    def load_payload(self, payload: dict):
        if payload["vocab"] != self.dataset.vocab.to_dict():
            raise ValueError("checkpoint vocabulary does not match the dataset")
        self.generator.load_state_dict(payload["models"]["generator"])
        self.discriminator.load_state_dict(payload["models"]["discriminator"])
        self.text.load_state_dict(payload["models"]["text"])
        for n, opt in self.optimizers.items():
            opt.load_state_dict(payload["optimizers"][n])
        self.ema = {n: t.clone() for n, t in payload["ema"].items()}
        self.rng.set_state(payload["rng"])
        self.epoch = payload["epoch"]
        self.step = payload["step"]
        self.step_in_epoch = payload["step_in_epoch"]


def save_checkpoint(trainer: Trainer, path, apply_ema: bool = False) -> Path:
    """Write the full training state atomically (bit-exact round trip)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(trainer.state_payload(apply_ema=apply_ema), tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, config: TrainConfig = None,
                    dataset: CaptionedImageDataset = None,
                    override: bool = False) -> Trainer:
    """Reconstruct a Trainer from a checkpoint.

    If ``config`` is given its hash must match the stored one unless
    ``override`` is set (in which case the given config wins). A truncated or
    unreadable file raises without leaving partial state anywhere.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise ValueError(f"not a checkpoint file: {path}")
    if payload["version"] != CHECKPOINT_VERSION:
        if not override:
            raise ValueError(f"checkpoint version {payload['version']} != "
                             f"supported {CHECKPOINT_VERSION} (pass override to force)")
    saved_config = TrainConfig.from_dict(payload["config"])
    if config is not None:
        if config.config_hash() != payload["config_hash"] and not override:
            raise ValueError("config hash mismatch between checkpoint and supplied "
                             "config (pass override to force)")
        use_config = config if override else saved_config
    else:
        use_config = saved_config
    trainer = Trainer(use_config, dataset=dataset)
    trainer.load_payload(payload)
    return trainer
