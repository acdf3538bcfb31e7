"""Loss terms and the gradient-routing contract.

The routing plan fixes which parameter group each loss expression may update:
by default the generator total (adversarial + KL + contrastive) trains
{gen, emb_G}, the hinge loss trains {disc}, and the real-pair contrastive
term trains {disc, emb_D}. Ablation flags reorganize these edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

DEFAULT_TEMPERATURE = 0.1
DEFAULT_MAGP_K = 2.0
DEFAULT_MAGP_P = 6.0


def sim(f: Tensor, s: Tensor, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Temperature-scaled cosine similarity between feature and sentence vectors."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    fn = f.norm(dim=-1, keepdim=True)
    sn = s.norm(dim=-1, keepdim=True)
    if bool((fn == 0).any()) or bool((sn == 0).any()):
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return ((f / fn) * (s / sn)).sum(dim=-1) / temperature


def contrastive_loss(features: Tensor, sentences: Tensor,
                     temperature: float = DEFAULT_TEMPERATURE,
                     symmetric: bool = False) -> Tensor:
    """In-batch InfoNCE, image-anchored: mean over i of
    -log softmax_j(sim(f_i, s_j)) at j = i. ``symmetric=True`` averages in the
    text-anchored direction as well (off by default)."""
    if features.dim() != 2 or sentences.dim() != 2:
        raise ValueError("expected (N, d) features and sentences")
    if features.shape != sentences.shape:
        raise ValueError("features and sentences must have matching shapes")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    fn = features.norm(dim=-1, keepdim=True)
    sn = sentences.norm(dim=-1, keepdim=True)
    if bool((fn == 0).any()) or bool((sn == 0).any()):
        raise ValueError("contrastive loss undefined for zero-norm rows")
    logits = (features / fn) @ (sentences / sn).t() / temperature
    targets = torch.arange(features.shape[0], device=features.device)
    loss = F.cross_entropy(logits, targets)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(logits.t(), targets))
    if not bool(torch.isfinite(loss)):
        raise ValueError("non-finite contrastive loss")
    return loss


def hinge_d(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Hinge adversarial loss for the critic: E[max(0, 1 - D(x))] + E[max(0, 1 + D(x_hat))]."""
    if real_logits.numel() == 0 or fake_logits.numel() == 0:
        raise ValueError("hinge loss needs non-empty logit batches")
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def adv_g(fake_logits: Tensor) -> Tensor:
    """Generator adversarial loss: E[-D(x_hat)]."""
    if fake_logits.numel() == 0:
        raise ValueError("generator adversarial loss needs non-empty logits")
    return (-fake_logits).mean()


def magp(real_images: Tensor, s_d: Tensor, discriminator,
         k: float = DEFAULT_MAGP_K, p: float = DEFAULT_MAGP_P) -> Tensor:
    """Matching-aware zero-centered gradient penalty at real matched pairs:
    k * E[(||grad_x D(x, s)|| + ||grad_s D(x, s)||)^p]."""
    if not getattr(discriminator, "conditional", False):
        raise ValueError("gradient penalty requires a conditional discriminator")
    if k <= 0 or p <= 0:
        raise ValueError("k and p must be positive")
    x = real_images.detach().requires_grad_(True)
    s = s_d if s_d.requires_grad else s_d.detach().requires_grad_(True)
    out = discriminator(x, s)
    logit = out if isinstance(out, Tensor) else out.logit
    grad_x, grad_s = torch.autograd.grad(
        outputs=logit.sum(), inputs=[x, s], create_graph=True, allow_unused=True)
    if grad_x is None:
        grad_x = torch.zeros_like(x)
    if grad_s is None:
        grad_s = torch.zeros_like(s)
    gx = grad_x.flatten(1).norm(dim=1)
    gs = grad_s.flatten(1).norm(dim=1)
    return k * ((gx + gs) ** p).mean()


# ---------------------------------------------------------------------------
# routing flags and plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoutingFlags:
    """Which embeddings each network may see, and which losses train them.

    Defaults reproduce the best configuration: the generator sees the
    discriminator-side embedding (detached), the discriminator never sees the
    generator-side one, and the two embedding stacks are independent.
    Epoch-scheduled variants resolve through ``apply_routing_schedule``.
    """

    sd_to_g: bool = True
    sg_to_d: bool = False
    shared_embeddings: bool = False
    g_loss_to_shared: bool = False
    sg_to_d_after_epoch: int = None
    g_loss_after_epoch: int = None

    def validate(self):
        if self.g_loss_to_shared and not self.shared_embeddings:
            raise ValueError("g_loss_to_shared requires shared_embeddings")
        if self.g_loss_after_epoch is not None and not self.shared_embeddings:
            raise ValueError("g_loss_after_epoch requires shared_embeddings")
        if self.g_loss_to_shared and self.g_loss_after_epoch is not None:
            raise ValueError("set either g_loss_to_shared or g_loss_after_epoch, not both")
        if self.sg_to_d and self.sg_to_d_after_epoch is not None:
            raise ValueError("set either sg_to_d or sg_to_d_after_epoch, not both")
        if self.shared_embeddings and (self.sg_to_d or self.sg_to_d_after_epoch is not None):
            raise ValueError("sg_to_d has no meaning with shared embeddings")
        if self.shared_embeddings and not self.sd_to_g:
            raise ValueError("sd_to_g has no meaning with shared embeddings; leave default")

    def to_dict(self) -> dict:
        return {
            "sd_to_g": self.sd_to_g,
            "sg_to_d": self.sg_to_d,
            "shared_embeddings": self.shared_embeddings,
            "g_loss_to_shared": self.g_loss_to_shared,
            "sg_to_d_after_epoch": self.sg_to_d_after_epoch,
            "g_loss_after_epoch": self.g_loss_after_epoch,
        }


G_TERMS = ("adv_g", "ca_kl", "cont_g")


def build_routing_plan(flags: RoutingFlags, magp_mode: bool = False) -> dict:
    """Map each parameter group to the loss terms allowed to update it.

    In MA-GP mode the conditional adversarial loss at real pairs and the
    penalty itself may reach emb_D; the fake-pair conditional term never does.
    """
    flags.validate()
    d_terms = ("adv_d", "cont_d") + (("magp",) if magp_mode else ())
    if flags.shared_embeddings:
        emb_d = ("cont_d",) + (G_TERMS if flags.g_loss_to_shared else ())
        emb_g = ()
    else:
        emb_d = ("cont_d",)
        emb_g = G_TERMS
    if magp_mode:
        emb_d = emb_d + ("adv_d_real", "magp")
    return {"gen": G_TERMS, "disc": d_terms, "emb_G": emb_g, "emb_D": emb_d}


@dataclass
class LossBundle:
    """All loss terms for one step plus their weights and the routing plan.

    ``total_g``/``total_d`` are the exact weighted sums that the optimizer
    phases backpropagate (the penalty enters the discriminator total with
    weight 1 and is zero when disabled).
    """

    adv_g: Tensor
    adv_d: Tensor
    cont_g: Tensor
    cont_d: Tensor
    ca_kl: Tensor
    magp: Tensor
    lambda1: float
    lambda2: float
    lambda3: float
    temperature: float
    routing: dict = field(default_factory=dict)

    @property
    def total_g(self) -> Tensor:
        return self.adv_g + self.lambda1 * self.ca_kl + self.lambda2 * self.cont_g

    @property
    def total_d(self) -> Tensor:
        return self.adv_d + self.lambda3 * self.cont_d + self.magp

    def to_dict(self) -> dict:
        def val(x):
            return float(x.detach()) if isinstance(x, Tensor) else float(x)
        return {"adv_G": val(self.adv_g), "adv_D": val(self.adv_d),
                "cont_G": val(self.cont_g), "cont_D": val(self.cont_d),
                "ca_kl": val(self.ca_kl), "magp": val(self.magp)}


def assemble_losses(adv_g_term, adv_d_term, cont_g_term, cont_d_term, ca_kl_term,
                    magp_term=None, *, flags: RoutingFlags,
                    lambdas=(1.0, 1.0, 1.0), temperature: float = DEFAULT_TEMPERATURE,
                    magp_mode: bool = False) -> LossBundle:
    """Bundle computed terms with their weights and the routing plan."""
    flags.validate()
    if magp_mode and magp_term is None:
        raise ValueError("magp_mode requires a penalty term")
    terms = {"adv_g": adv_g_term, "adv_d": adv_d_term, "cont_g": cont_g_term,
             "cont_d": cont_d_term, "ca_kl": ca_kl_term}
    for name, t in terms.items():
        if isinstance(t, Tensor) and not bool(torch.isfinite(t.detach()).all()):
            raise ValueError(f"non-finite loss term {name}")
    if magp_term is None:
        magp_term = torch.zeros(())
    return LossBundle(
        adv_g=adv_g_term, adv_d=adv_d_term, cont_g=cont_g_term, cont_d=cont_d_term,
        ca_kl=ca_kl_term, magp=magp_term,
        lambda1=float(lambdas[0]), lambda2=float(lambdas[1]), lambda3=float(lambdas[2]),
        temperature=temperature,
        routing=build_routing_plan(flags, magp_mode),
    )
