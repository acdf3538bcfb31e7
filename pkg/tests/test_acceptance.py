"""Acceptance suite: one test per criterion, each printing a PASS line.

Criterion 7 trains a small ablation grid and takes roughly an hour of
single-core CPU; set DTE_SKIP_ABLATION=1 to skip it during development runs
(the full suite is expected to run it).
"""

import dataclasses
import math
import os
import time

import numpy as np
import pytest
import torch

from conftest import finite_difference, rel_error
from dtegan.data import make_batches, synthesize_toy_dataset
from dtegan.discriminator import Discriminator
from dtegan.evaluation import (evaluate_trainer, fid, inception_score,
                               r_precision_from_features, run_ablation,
                               table5_grid)
from dtegan.generator import ConditionAugmentation, ConditionalBatchNorm2d, Generator
from dtegan.losses import (RoutingFlags, adv_g, contrastive_loss, hinge_d, magp)
from dtegan.trainer import (MagpSettings, TrainConfig, Trainer,
                            load_checkpoint, save_checkpoint)


def _report(n, text):
    print(f"\nACCEPTANCE {n} PASS: {text}")


def _zero_module(m):
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()


def _grad_is_zero(params, tol=1e-12):
    return all(p.grad is None or float(p.grad.abs().max()) <= tol for _, p in params)


DESK = dict(resolution=64, ch=16, d_z=32, d_s=64, d_c=32, batch_size=4,
            n_items=8, epochs=1, seed=0, dataset_seed=0)


class TestCriterion1GradientRouting:
    def test_exact_zero_routing(self):
        t0 = time.time()
        cfg = TrainConfig(**DESK)
        tr = Trainer(cfg)
        batch = make_batches(tr.dataset, cfg.batch_size, seed=0)[0]
        images, tg, lg, td, ld = tr.batch_tensors(batch)

        # lambda3 * L_cont^D on real pairs: zero gradient on every emb_G param
        enc = tr.text(tg, lg, td, ld)
        loss_d = cfg.lambda3 * contrastive_loss(
            tr.discriminator(images).f_v, enc.s_d, cfg.temperature)
        loss_d.backward()
        assert _grad_is_zero(tr.groups.named("emb_G"))
        assert not _grad_is_zero(tr.groups.named("emb_D"))

        # L_G with S_D detached: zero gradient on every emb_D param
        for g in ("gen", "disc", "emb_G", "emb_D"):
            for p in tr.groups.parameters(g):
                p.grad = None
        enc2 = tr.text(tg, lg, td, ld)
        z = torch.randn(cfg.batch_size, cfg.d_z,
                        generator=torch.Generator().manual_seed(0))
        fake, cond = tr.generator(z, enc2.s_g, enc2.s_d.detach())
        out = tr.discriminator(fake)
        loss_g = (adv_g(out.logit) + cfg.lambda1 * cond.kl.mean()
                  + cfg.lambda2 * contrastive_loss(out.f_v, enc2.s_d.detach(),
                                                   cfg.temperature))
        loss_g.backward()
        assert _grad_is_zero(tr.groups.named("emb_D"))
        assert not _grad_is_zero(tr.groups.named("emb_G"))

        elapsed = time.time() - t0
        assert elapsed < 30.0
        _report(1, f"exact zero-gradient routing at desk dims ({elapsed:.1f}s < 30s)")


class TestCriterion2LossClosedForms:
    def test_closed_forms(self):
        # contrastive: N=1 exactly 0; N=2 uniform -> ln 2
        f1 = torch.randn(1, 6, dtype=torch.float64)
        assert float(contrastive_loss(f1, f1.clone())) == 0.0
        f2 = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
        assert abs(float(contrastive_loss(f2, f2.clone())) - math.log(2)) <= 1e-9

        # hinge and adv_g trivial cases, exact
        assert float(hinge_d(torch.tensor([1.5]), torch.tensor([-2.0]))) == 0.0
        assert float(hinge_d(torch.tensor([0.0]), torch.tensor([0.0]))) == 2.0
        assert float(adv_g(torch.tensor([2.0, -2.0]))) == 0.0
        assert float(adv_g(torch.tensor([1.0, 3.0]))) == -2.0

        # conditioning KL: (0, 1) -> 0; (1, 1) -> 0.5 per dim
        for d_c in (1, 4):
            ca = ConditionAugmentation(6, d_c, use_spectral_norm=False).double()
            _zero_module(ca.head)
            s = torch.randn(3, 6, dtype=torch.float64)
            assert float(ca(s).kl.detach().abs().max()) == 0.0
            with torch.no_grad():
                ca.head.bias[:d_c] = 1.0
            kl = ca(s).kl
            assert float((kl - 0.5 * d_c).abs().max()) <= 1e-9

        # MA-GP with a linear critic: k * ||w||^p
        class LinearCritic:
            conditional = True

            def __init__(self, w):
                self.w = w

            def __call__(self, x, s):
                return (x.flatten(1) * self.w.flatten()).sum(dim=1)

        torch.manual_seed(0)
        w = torch.randn(3, 5, 5, dtype=torch.float64)
        critic = LinearCritic(w)
        x = torch.randn(4, 3, 5, 5, dtype=torch.float64)
        s = torch.randn(4, 8, dtype=torch.float64)
        k, p = 2.0, 6.0
        expected = k * float(w.norm()) ** p
        got = float(magp(x, s, critic, k=k, p=p))
        assert abs(got - expected) <= 1e-6 * max(1.0, expected)
        _report(2, "contrastive/hinge/adv_g/CA-KL/MA-GP closed forms exact")


class TestCriterion3GradientCorrectness:
    def test_finite_differences(self):
        t0 = time.time()
        # contrastive loss w.r.t. features and sentences (N=3, d=5)
        torch.manual_seed(0)
        f = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
        s = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
        contrastive_loss(f, s, temperature=0.3).backward()
        num_f = finite_difference(
            lambda: contrastive_loss(f.detach(), s.detach(), temperature=0.3),
            f.data, eps=1e-6)
        num_s = finite_difference(
            lambda: contrastive_loss(f.detach(), s.detach(), temperature=0.3),
            s.data, eps=1e-6)
        assert rel_error(f.grad, num_f) <= 1e-4
        assert rel_error(s.grad, num_s) <= 1e-4

        # CBN w.r.t. the gamma projection at a 2x2 map
        torch.manual_seed(1)
        cbn = ConditionalBatchNorm2d(2, 3, use_spectral_norm=False).double()
        x = torch.randn(3, 2, 2, 2, dtype=torch.float64)
        cond = torch.randn(3, 3, dtype=torch.float64)

        def cbn_loss():
            return cbn(x, cond).pow(2).mean()

        cbn_loss().backward()
        num = finite_difference(lambda: cbn_loss().detach(),
                                cbn.fc_gamma.weight.data, eps=1e-6)
        assert rel_error(cbn.fc_gamma.weight.grad, num) <= 1e-4

        # CA-KL w.r.t. the statistics head weight
        torch.manual_seed(2)
        ca = ConditionAugmentation(4, 3, use_spectral_norm=False).double()
        s_t = torch.randn(4, 4, dtype=torch.float64)

        def ca_loss():
            return ca(s_t).kl.mean()

        ca_loss().backward()
        num = finite_difference(lambda: ca_loss().detach(),
                                ca.head.weight.data, eps=1e-6)
        assert rel_error(ca.head.weight.grad, num) <= 1e-4

        elapsed = time.time() - t0
        assert elapsed < 120.0
        _report(3, f"finite-difference checks ({elapsed:.1f}s < 2min, rel err <= 1e-4)")


class TestCriterion4ShapeConformance:
    def test_paper_preset_shapes(self):
        ch = 64
        gen = Generator(256, ch, d_z=100, cond_input_dim=512, d_c=200)
        # published table rows: 512 -> 512 linear, CA to 200, stem to 8ch x 4 x 4
        assert gen.ca.pre.in_features == 512 and gen.ca.pre.out_features == 512
        assert gen.ca.head.out_features == 400
        assert gen.stem.in_features == 300
        assert gen.stem.out_features == 8 * ch * 16
        expected = [(8 * ch, 8), (8 * ch, 16), (4 * ch, 32), (2 * ch, 64),
                    (2 * ch, 128), (ch, 256)]
        with torch.no_grad():
            z = torch.randn(2, 100)
            s_g = torch.randn(2, 256)
            s_d = torch.randn(2, 256)
            cond = gen.ca(torch.cat([s_g, s_d], dim=-1))
            f_g = torch.cat([cond.c_t, z], dim=-1)
            h = gen.stem(f_g).view(2, 8 * ch, 4, 4)
            assert h.shape == (2, 512, 4, 4)
            for block, (c, r) in zip(gen.blocks, expected):
                h = block(h, f_g)
                assert h.shape == (2, c, r, r)
            h = gen.self_mod(h, f_g)
            assert h.shape == (2, ch, 256, 256)
            img = torch.tanh(gen.to_rgb(h))
            assert img.shape == (2, 3, 256, 256)

        disc = Discriminator(256, ch, d_s=256)
        with torch.no_grad():
            t = disc.trunk(img)
            assert t.shape == (2, 4 * ch, 8, 8)
            out = disc(img)
            assert out.f_v.shape == (2, 256)
            assert out.logit.shape == (2,)
        _report(4, "paper-preset generator/discriminator shapes match the tables")


class TestCriterion5MetricOracles:
    def test_metric_oracles(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(500, 6))
        assert abs(fid(a, a.copy())) <= 1e-6

        n = 10_000
        rng2 = np.random.default_rng(0)
        x = rng2.normal(0.0, 1.0, size=(n, 1))
        y = rng2.normal(1.0, 1.0, size=(n, 1))
        assert abs(fid(x, y) - 1.0) <= 0.02

        mean, _ = inception_score(np.full((40, 8), 1.0 / 8))
        assert abs(mean - 1.0) <= 1e-9

        f = rng.normal(size=(1000, 16))
        t = rng.normal(size=(1000, 16))
        r = r_precision_from_features(f, t, pool_size=100, seed=1)
        sigma = math.sqrt(0.01 * 0.99 / 1000)
        assert abs(r - 1.0 / 100) <= 3 * sigma
        _report(5, "FID identity/shift, IS uniform, null R-precision oracles hold")


class TestCriterion6Determinism:
    def test_bit_identical_runs_and_resume(self, tmp_path):
        cfg = TrainConfig(resolution=64, ch=16, d_z=32, d_s=64, d_c=32,
                          batch_size=16, n_items=48, epochs=5, seed=11,
                          dataset_seed=7)
        a = Trainer(cfg)
        a.train(run_dir=tmp_path / "run_a")
        b = Trainer(cfg)
        b.train(run_dir=tmp_path / "run_b")
        pa = torch.load(tmp_path / "run_a/checkpoints/final.pt", weights_only=False)
        pb = torch.load(tmp_path / "run_b/checkpoints/final.pt", weights_only=False)
        for mod in pa["models"]:
            for key, va in pa["models"][mod].items():
                assert torch.equal(va, pb["models"][mod][key]), f"{mod}.{key}"
        for key, va in pa["ema"].items():
            assert torch.equal(va, pb["ema"][key])
        assert torch.equal(pa["rng"], pb["rng"])

        half = Trainer(cfg)
        half.train(epochs=2)
        ck = save_checkpoint(half, tmp_path / "half.pt")
        resumed = load_checkpoint(ck, config=cfg)
        resumed.train()
        final_a = pa["models"]
        payload_r = resumed.state_payload()
        for mod in final_a:
            for key, va in final_a[mod].items():
                assert torch.equal(va, payload_r["models"][mod][key]), f"{mod}.{key}"
        _report(6, "two seeded runs bit-identical; resume equals uninterrupted")


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("DTE_SKIP_ABLATION") == "1",
                    reason="ablation reproduction skipped by DTE_SKIP_ABLATION=1")
class TestCriterion7DirectionalAblation:
    # toy-scale reproduction protocol (single-core CPU budget ~1h):
    # identical data/budget per variant, >= 3 seeds, seed-averaged means
    PROTOCOL = dict(resolution=32, ch=8, d_z=16, d_s=32, d_c=16, batch_size=16,
                    n_items=256, epochs=100, ema_decay=0.98, dataset_seed=0,
                    lambda1=0.05, lr_disc=5e-5)
    SEEDS = (0, 1, 2)
    POOL = 50

    def test_routing_ordering(self):
        base = TrainConfig(**self.PROTOCOL)
        grid = [v for v in table5_grid()
                if v.name in ("shared_dual_loss", "dual_isolated", "dual_routed")]
        rows = run_ablation(grid, base, seeds=self.SEEDS, pool_size=self.POOL,
                            d_f=32, progress=True)
        means = {r["variant"]: r for r in rows if r["seed"] == "mean"}
        routed = means["dual_routed"]
        isolated = means["dual_isolated"]
        shared_dual = means["shared_dual_loss"]
        print(f"\n  dual_routed      r={routed['r_precision']:.3f} fid={routed['fid']:.2f}")
        print(f"  dual_isolated    r={isolated['r_precision']:.3f} fid={isolated['fid']:.2f}")
        print(f"  shared_dual_loss r={shared_dual['r_precision']:.3f} fid={shared_dual['fid']:.2f}")
        assert routed["r_precision"] >= isolated["r_precision"], \
            "default routing should retrieve at least as well as the no-S_D variant"
        assert routed["fid"] <= shared_dual["fid"], \
            "default routing should score FID at least as well as shared-with-dual-loss"
        _report(7, "Table-5 directional ordering reproduced at toy scale "
                   f"(r: {routed['r_precision']:.3f} >= {isolated['r_precision']:.3f}; "
                   f"fid: {routed['fid']:.2f} <= {shared_dual['fid']:.2f})")


class TestCriterion8Magp:
    def test_magp_mode(self):
        cfg = TrainConfig(**{**DESK, "n_items": 8, "batch_size": 4},
                          magp=MagpSettings(enabled=True, k=2.0, p=6.0))
        tr = Trainer(cfg)
        batches = make_batches(tr.dataset, cfg.batch_size, seed=0)
        for i in range(3):
            bundle = tr.train_step(batches[i % len(batches)])
            assert bundle.to_dict()["magp"] >= 0.0

        # criteria 1-2 unchanged with the penalty enabled: routing still exact
        images, tg, lg, td, ld = tr.batch_tensors(batches[0])
        enc = tr.text(tg, lg, td, ld)
        s_for_d = enc.s_d
        loss_d = cfg.lambda3 * contrastive_loss(
            tr.discriminator(images, s_for_d).f_v, s_for_d, cfg.temperature)
        for g in ("gen", "disc", "emb_G", "emb_D"):
            for p in tr.groups.parameters(g):
                p.grad = None
        loss_d.backward()
        assert _grad_is_zero(tr.groups.named("emb_G"))

        # fake-conditional adversarial term never touches emb_D (exact zero)
        for g in ("gen", "disc", "emb_G", "emb_D"):
            for p in tr.groups.parameters(g):
                p.grad = None
        enc2 = tr.text(tg, lg, td, ld)
        with torch.no_grad():
            z = torch.randn(cfg.batch_size, cfg.d_z,
                            generator=torch.Generator().manual_seed(1))
            fake, _ = tr.generator(z, enc2.s_g, enc2.s_d)
        fake_logit = tr.discriminator(fake.detach(), enc2.s_d.detach()).logit
        torch.nn.functional.relu(1.0 + fake_logit).mean().backward()
        assert _grad_is_zero(tr.groups.named("emb_D"))
        assert not _grad_is_zero(tr.groups.named("disc"))
        _report(8, "MA-GP nonnegative; routing intact; fake-conditional never "
                   "reaches the discriminator-side embeddings")
