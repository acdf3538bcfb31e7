"""Metrics (R-precision, FID, inception score) with pluggable feature
extractors, and the ablation harness that trains and scores the
routing-variant grids.

Desk-scale FID/IS default to a frozen, seeded random conv net as the feature
source; a hook accepts externally trained classifiers when numbers comparable
to published pipelines are wanted.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import CaptionedImageDataset
from .generator import Generator, sample_noise
from .losses import RoutingFlags
from .text import DualTextEncoder
from .trainer import TrainConfig, Trainer


# ---------------------------------------------------------------------------
# distribution metrics
# ---------------------------------------------------------------------------

def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussians fitted to two feature sets:
    ||mu_a - mu_b||^2 + tr(C_a + C_b - 2 (C_a C_b)^(1/2)).

    The trace of the matrix square root is computed from the eigenvalues of
    C_a C_b with tiny negative parts clamped at zero.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("expected (n, d) feature arrays with matching d")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("non-finite features")
    d = a.shape[1]
    if a.shape[0] <= d or b.shape[0] <= d:
        warnings.warn("fewer samples than feature dimensions; covariance "
                      "estimate is rank-deficient", stacklevel=2)
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    c_a = np.atleast_2d(np.cov(a, rowvar=False))
    c_b = np.atleast_2d(np.cov(b, rowvar=False))
    eigvals = np.linalg.eigvals(c_a @ c_b)
    tr_sqrt = np.sqrt(np.clip(eigvals.real, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(c_a) + np.trace(c_b) - 2.0 * tr_sqrt)


def inception_score(class_probs, splits: int = 10):
    """exp(E_x KL(p(y|x) || E_x p(y|x))) over contiguous splits; returns
    (mean, std) across splits."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("expected (n, C) class probabilities")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("rows must be probability vectors")
    n = p.shape[0]
    splits = max(1, min(splits, n))
    scores = []
    for chunk in np.array_split(np.arange(n), splits):
        rows = p[chunk]
        marginal = rows.mean(axis=0)
        log_rows = np.log(np.where(rows > 0, rows, 1.0))
        log_marg = np.log(np.where(marginal > 0, marginal, 1.0))
        kl = np.where(rows > 0, rows * (log_rows - log_marg), 0.0).sum(axis=1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


def r_precision_from_features(image_features, text_features, pool_size: int,
                              seed: int = 0) -> float:
    """Fraction of items whose true caption ranks first against pool_size - 1
    mismatched captions by cosine similarity (strict win; ties count as misses)."""
    f = np.asarray(image_features, dtype=np.float64)
    t = np.asarray(text_features, dtype=np.float64)
    if pool_size < 2:
        raise ValueError("pool_size must be >= 2")
    if f.shape != t.shape or f.ndim != 2:
        raise ValueError("expected matching (n, d) feature arrays")
    n = f.shape[0]
    if n < pool_size:
        raise ValueError(f"need at least pool_size={pool_size} items with distinct "
                         f"captions, got {n}")
    fn = np.linalg.norm(f, axis=1, keepdims=True)
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    if np.any(fn == 0) or np.any(tn == 0):
        raise ValueError("zero-norm feature rows")
    f = f / fn
    t = t / tn
    rng = np.random.default_rng(seed)
    hits = 0
    indices = np.arange(n)
    for i in range(n):
        others = np.delete(indices, i)
        decoys = rng.choice(others, size=pool_size - 1, replace=False)
        true_sim = float(f[i] @ t[i])
        decoy_max = float((t[decoys] @ f[i]).max())
        hits += int(true_sim > decoy_max)
    return hits / n


# ---------------------------------------------------------------------------
# feature extractors
# ---------------------------------------------------------------------------

class SeededConvNet(nn.Module):
    """Frozen random conv feature extractor (or classifier with softmax head);
    weights are fixed by the seed and never trained."""

    def __init__(self, resolution: int, out_dim: int, seed: int = 0,
                 classify: bool = False):
        super().__init__()
        self.classify = classify
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            layers = []
            in_ch, size = 3, resolution
            ch = 16
            while size > 4:
                conv = nn.Conv2d(in_ch, ch, 3, stride=2, padding=1)
                # variance-preserving init keeps the features discriminative
                nn.init.kaiming_normal_(conv.weight, a=0.2, nonlinearity="leaky_relu")
                nn.init.zeros_(conv.bias)
                layers += [conv, nn.LeakyReLU(0.2)]
                in_ch, ch, size = ch, min(2 * ch, 128), size // 2
            self.convs = nn.Sequential(*layers)
            self.head = nn.Linear(in_ch * size * size, out_dim)
            nn.init.orthogonal_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h = self.head(self.convs(images).flatten(1))
        return F.softmax(h, dim=-1) if self.classify else h


FEATURE_EXTRACTORS = ("random_conv", "discriminator", "classifier")


def make_feature_extractor(name: str, *, resolution: int = None,
                           discriminator=None, d_f: int = 64, seed: int = 0,
                           classifier=None):
    """Named image-feature callables: 'random_conv' (frozen seeded net),
    'discriminator' (contrastive-branch features), 'classifier' (user-supplied
    callable)."""
    if name == "random_conv":
        if resolution is None:
            raise ValueError("random_conv extractor needs the image resolution")
        net = SeededConvNet(resolution, d_f, seed=seed)

        def extract(images):
            with torch.no_grad():
                return net(images).numpy()
        return extract
    if name == "discriminator":
        if discriminator is None:
            raise ValueError("discriminator extractor needs the discriminator")

        def extract(images):
            was_training = discriminator.training
            discriminator.eval()
            try:
                with torch.no_grad():
                    return discriminator.features(images).numpy()
            finally:
                if was_training:
                    discriminator.train()
        return extract
    if name == "classifier":
        if classifier is None:
            raise ValueError("classifier extractor needs a callable")
        return classifier
    raise ValueError(f"unknown feature extractor {name!r}; options: {FEATURE_EXTRACTORS}")


# ---------------------------------------------------------------------------
# model-level evaluation
# ---------------------------------------------------------------------------

def generator_condition(text: DualTextEncoder, flags: RoutingFlags,
                        tokens: torch.Tensor, lengths: torch.Tensor):
    """Eval-time generator conditioning values under the routing flags."""
    s_g, _ = text.encode(tokens, lengths, "G")
    if flags.shared_embeddings or not flags.sd_to_g:
        return s_g, None
    s_d, _ = text.encode(tokens, lengths, "D")
    return s_g, s_d


def generate_images(generator: Generator, text: DualTextEncoder, flags: RoutingFlags,
                    tokens: torch.Tensor, lengths: torch.Tensor, *,
                    seed: int = 0, truncation_psi: float = None,
                    batch_size: int = 32) -> torch.Tensor:
    """Generate one image per caption with the given (usually EMA) weights."""
    rng = torch.Generator().manual_seed(seed)
    was = (generator.training, text.training)
    generator.eval()
    text.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, tokens.shape[0], batch_size):
                tk = tokens[start:start + batch_size]
                ln = lengths[start:start + batch_size]
                prim, sec = generator_condition(text, flags, tk, ln)
                z = sample_noise(tk.shape[0], generator.d_z, truncation_psi, rng=rng)
                imgs, _ = generator(z, prim, sec)
                out.append(imgs)
    finally:
        if was[0]:
            generator.train()
        if was[1]:
            text.train()
    return torch.cat(out, dim=0)


def _dataset_tensors(dataset: CaptionedImageDataset, caption_index: int = 0):
    images = torch.from_numpy(
        np.stack([it.image for it in dataset.items])).permute(0, 3, 1, 2).contiguous()
    caps = [it.captions[min(caption_index, len(it.captions) - 1)] for it in dataset.items]
    tokens = torch.from_numpy(np.stack([c.ids for c in caps]))
    lengths = torch.from_numpy(np.asarray([c.length for c in caps], dtype=np.int64))
    return images, tokens, lengths


def r_precision(generator: Generator, text: DualTextEncoder, discriminator,
                dataset: CaptionedImageDataset, flags: RoutingFlags = None,
                pool_size: int = 100, seed: int = 0,
                truncation_psi: float = None) -> float:
    """Generate from each item's true caption, extract contrastive-branch
    image features, and rank the true caption's discriminator-side embedding
    against mismatched ones."""
    flags = flags if flags is not None else RoutingFlags()
    _, tokens, lengths = _dataset_tensors(dataset)
    if pool_size < 2:
        raise ValueError("pool_size must be >= 2")
    if len(dataset) < pool_size:
        raise ValueError(f"need >= pool_size={pool_size} items, got {len(dataset)}")
    images = generate_images(generator, text, flags, tokens, lengths,
                             seed=seed * 1_000_003 + 7, truncation_psi=truncation_psi)
    was_training = text.training
    text.eval()
    try:
        with torch.no_grad():
            s_d, _ = text.encode(tokens, lengths, "D")
            f_v = discriminator.features(images)
    finally:
        if was_training:
            text.train()
    return r_precision_from_features(f_v.numpy(), s_d.numpy(), pool_size, seed)


@dataclass
class MetricsReport:
    r_precision: float
    fid: float
    is_mean: float = None
    is_std: float = None
    config_hash: str = ""
    n_samples: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.r_precision is not None and not 0.0 <= self.r_precision <= 1.0:
            raise ValueError("r_precision must lie in [0, 1]")
        if self.fid is not None and self.fid < -1e-6:
            raise ValueError("fid below the numerical floor")

    def to_dict(self) -> dict:
        return {"r_precision": self.r_precision, "fid": self.fid,
                "is_mean": self.is_mean, "is_std": self.is_std,
                "config_hash": self.config_hash, "n_samples": self.n_samples,
                "seed": self.seed}


def evaluate_trainer(trainer: Trainer, *, pool_size: int = 50, seed: int = 0,
                     extractor: str = "random_conv", d_f: int = 32,
                     with_is: bool = True, is_classes: int = 10,
                     truncation_psi: float = None) -> MetricsReport:
    """Score a trained model on its dataset: R-precision with discriminator
    features, FID between real and generated images under the chosen
    extractor, and optionally the inception-style score from a frozen seeded
    classifier. Uses the EMA generator weights."""
    cfg = trainer.config
    dataset = trainer.dataset
    gen_ema, text_ema = trainer.ema_generator()
    disc = trainer.discriminator
    was_training = disc.training
    disc.eval()
    try:
        rp = r_precision(gen_ema, text_ema, disc, dataset, cfg.flags,
                         pool_size=pool_size, seed=seed, truncation_psi=truncation_psi)
        real, tokens, lengths = _dataset_tensors(dataset)
        fakes = generate_images(gen_ema, text_ema, cfg.flags, tokens, lengths,
                                seed=seed * 31 + 11, truncation_psi=truncation_psi)
        extract = make_feature_extractor(extractor, resolution=cfg.resolution,
                                         discriminator=disc, d_f=d_f, seed=seed)
        fid_value = fid(extract(real), extract(fakes))
        is_mean = is_std = None
        if with_is:
            clf = SeededConvNet(cfg.resolution, is_classes, seed=seed + 1, classify=True)
            with torch.no_grad():
                probs = clf(fakes).numpy()
            is_mean, is_std = inception_score(probs)
    finally:
        if was_training:
            disc.train()
    return MetricsReport(r_precision=rp, fid=fid_value, is_mean=is_mean,
                         is_std=is_std, config_hash=cfg.config_hash(),
                         n_samples=len(dataset), seed=seed)


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

@dataclass
class AblationVariant:
    """One grid entry: a name, optional routing flags, optional config field
    overrides (e.g. caption_policy)."""

    name: str
    flags: RoutingFlags = None
    overrides: dict = field(default_factory=dict)


def table5_grid():
    """The five embedding-organization variants (shared vs dual, access rules)."""
    return [
        AblationVariant("shared_cont_only", RoutingFlags(shared_embeddings=True)),
        AblationVariant("shared_dual_loss",
                        RoutingFlags(shared_embeddings=True, g_loss_to_shared=True)),
        AblationVariant("dual_isolated", RoutingFlags(sd_to_g=False, sg_to_d=False)),
        AblationVariant("dual_both_access", RoutingFlags(sg_to_d=True)),
        AblationVariant("dual_routed", RoutingFlags()),
    ]


def table6_grid(epochs=(0, 100, 300)):
    """Generator-side embedding joining the discriminator (by summation) from
    a given epoch."""
    grid = []
    for e in epochs:
        flags = RoutingFlags(sg_to_d=True) if e == 0 else RoutingFlags(sg_to_d_after_epoch=e)
        grid.append(AblationVariant(f"sg_to_d_from_{e}", flags))
    return grid


def table7_grid(epochs=(0, 100, 300), include_never: bool = True):
    """Shared embeddings receiving the generator loss from a given epoch."""
    grid = []
    for e in epochs:
        flags = (RoutingFlags(shared_embeddings=True, g_loss_to_shared=True) if e == 0
                 else RoutingFlags(shared_embeddings=True, g_loss_after_epoch=e))
        grid.append(AblationVariant(f"shared_g_loss_from_{e}", flags))
    if include_never:
        grid.append(AblationVariant("shared_g_loss_never",
                                    RoutingFlags(shared_embeddings=True)))
    return grid


def table8_grid():
    """Single vs dual captions feeding the two encoders."""
    return [
        AblationVariant("single_caption", None, {"caption_policy": "single"}),
        AblationVariant("dual_captions", None, {"caption_policy": "dual"}),
    ]


ABLATION_PRESETS = {
    "table5": table5_grid,
    "table6": table6_grid,
    "table7": table7_grid,
    "table8": table8_grid,
}

CSV_COLUMNS = ("variant", "seed", "r_precision", "fid", "is_mean", "is_std",
               "config_hash", "n_samples")


def write_ablation_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def run_ablation(grid, base_config: TrainConfig, seeds=(0, 1, 2), *,
                 pool_size: int = 50, eval_seed: int = 0, d_f: int = 32,
                 out_csv=None, progress: bool = False):
    """Train every (variant, seed) pair under the shared base budget and score
    it; returns per-run rows plus a mean row per variant. Partial rows are
    written to ``out_csv`` even when a variant fails."""
    if not grid:
        raise ValueError("empty ablation grid")
    rows = []
    try:
        for variant in grid:
            per_seed = []
            for seed in seeds:
                cfg = replace(base_config, seed=seed,
                              flags=variant.flags if variant.flags is not None else base_config.flags,
                              **variant.overrides)
                trainer = Trainer(cfg)
                trainer.train()
                report = evaluate_trainer(trainer, pool_size=pool_size,
                                          seed=eval_seed, d_f=d_f)
                row = {"variant": variant.name, "seed": seed}
                row.update(report.to_dict())
                rows.append(row)
                per_seed.append(report)
                if progress:
                    print(f"[{variant.name} seed={seed}] r={report.r_precision:.3f} "
                          f"fid={report.fid:.2f}", flush=True)
            rows.append({
                "variant": variant.name, "seed": "mean",
                "r_precision": float(np.mean([r.r_precision for r in per_seed])),
                "fid": float(np.mean([r.fid for r in per_seed])),
                "is_mean": float(np.mean([r.is_mean for r in per_seed]))
                if per_seed[0].is_mean is not None else None,
                "is_std": None,
                "config_hash": per_seed[0].config_hash,
                "n_samples": per_seed[0].n_samples,
            })
    except Exception:
        if out_csv is not None and rows:
            write_ablation_csv(rows, out_csv)
        raise
    if out_csv is not None:
        write_ablation_csv(rows, out_csv)
    return rows
