"""Acceptance criteria, one test each, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or ``python3 scripts/run_acceptance.py``.
"""

import dataclasses
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from facerestore import edm
from facerestore.attention import MultiHeadCrossAttention, mhca_forward, mhsa_forward
from facerestore.config import ArchConfig, EDMConfig, TrainConfig, toy_config
from facerestore.edm import DegradationParams, EvenParams
from facerestore.gradcheck import run_suite
from facerestore.losses import RESTORER_TERMS, LossWeights, SurrogateFeatureNet, total_restorer_loss
from facerestore.metrics import angular_distance, idd, psnr, ssim
from facerestore.restorer import LossSuite, RestorerModel, to_tensor, train_restorer
from facerestore.rohqd import quantize, straight_through
from facerestore.toydata import toy_faces
from facerestore.trend import run_restorer_trend, run_rohqd_trend
from test_attention import make_block, oracle_attend, oracle_block, rand
from test_edm import _tree_digest
from test_rohqd import brute_force_indices

D = torch.float64
FIXTURE = Path(__file__).parent / "fixtures" / "training_oracle.json"


class Verdict:
    """Collects named checks for one criterion and prints one line."""

    def __init__(self, number, title, capsys):
        self.number, self.title, self.capsys = number, title, capsys
        self.failed = []
        self.notes = []

    def check(self, name, ok, note=None):
        if not ok:
            self.failed.append(name)
        if note:
            self.notes.append(note)

    def finish(self):
        status = "FAIL" if self.failed else "PASS"
        detail = "; ".join(self.notes + [f"failed: {', '.join(self.failed)}"] * bool(self.failed))
        with self.capsys.disabled():
            print(f"\n[{status}] criterion {self.number}: {self.title}" + (f" ({detail})" if detail else ""))
        assert not self.failed, f"criterion {self.number} failed: {self.failed}"


def test_criterion_1_gradient_suite(capsys):
    v = Verdict(1, "finite-difference gradient suite", capsys)
    t0 = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    for r in results:
        v.check(r.name, r.passed)
    v.check("runtime < 2 min", elapsed < 120, f"{len(results)} checks in {elapsed:.1f}s")
    worst = max(results, key=lambda r: r.error / r.tolerance)
    v.notes.append(f"worst {worst.name} {worst.error:.1e}/{worst.tolerance:.0e}")
    v.finish()


def test_criterion_2_attention(capsys):
    v = Verdict(2, "attention vs brute-force oracle", capsys)
    blk = make_block(8, 2, seed=11)
    zd, zp = rand(1, 8, 4, 4, seed=12), rand(1, 8, 4, 4, seed=13)
    e_sa = np.abs(mhsa_forward(blk, zd)[0].detach().numpy() - oracle_block(blk, zd[0].numpy(), zd[0].numpy())).max()
    e_ca = np.abs(mhca_forward(blk, zd, zp)[0].detach().numpy() - oracle_block(blk, zd[0].numpy(), zp[0].numpy())).max()
    v.check("MHSA oracle", e_sa < 1e-10)
    v.check("MHCA oracle", e_ca < 1e-10, f"max err {max(e_sa, e_ca):.1e}")
    _, w = blk.attend(zd, zp)
    _, w_ref = oracle_attend(blk, zd[0].numpy(), zp[0].numpy())
    v.check("weights", np.abs(w[0].detach().numpy() - w_ref).max() < 1e-10)
    v.check("rows sum to 1", (w.sum(-1) - 1).abs().max().item() < 1e-6)
    v.check("MHCA(z, z) == MHSA", torch.equal(mhca_forward(blk, zd, zd), mhsa_forward(blk, zd)))
    v.finish()


def test_criterion_3_vector_quantization(capsys):
    v = Verdict(3, "vector quantization and frozen dictionary", capsys)
    gen = torch.Generator().manual_seed(31)
    book = torch.randn(32, 8, generator=gen, dtype=D)
    z = torch.randn(10, 8, 10, 10, generator=gen, dtype=D)
    v.check("exhaustive scan, 1000 queries", np.array_equal(quantize(z, book).indices.numpy(), brute_force_indices(z, book)))

    w = torch.randn(2, 4, 3, 3, generator=gen, dtype=D)
    small = torch.randn(8, 4, generator=gen, dtype=D)
    downstream = [lambda t: (t**3 * w).sum(), lambda t: torch.sin(t * w).sum(), lambda t: (t**2).sum().sqrt()]
    for i, f in enumerate(downstream):
        zz = torch.randn(2, 4, 3, 3, generator=gen, dtype=D, requires_grad=True)
        out = straight_through(zz, quantize(zz, small))
        (g_st,) = torch.autograd.grad(f(out), zz)
        leaf = out.detach().clone().requires_grad_(True)
        (g_sub,) = torch.autograd.grad(f(leaf), leaf)
        v.check(f"straight-through f{i}", torch.equal(g_st, g_sub))

    cfg = toy_config().replace(train=TrainConfig(batch_size=2, steps=5))
    model = RestorerModel(cfg.arch, seed=3)
    before = model.codebook.weight.detach().numpy().tobytes()
    train_restorer(toy_faces(4, 64, 1), toy_faces(4, 64, 2), model, cfg)
    v.check("codebook bytes unchanged", model.codebook.weight.detach().numpy().tobytes() == before, "5-step toy restorer run")
    v.finish()


def _small_arch(scales, k, widths=(4, 8, 8, 8)):
    return ArchConfig(
        image_size=16, widths=widths, blocks_per_level=(1,) * len(widths), scales=scales, mhca_per_scale=k,
        num_heads=2, codebook_size=8, codebook_dim=4, disc_width=4, disc_layers=2, crop_size=8, comp_disc_layers=1,
    )


def test_criterion_4_fusion_composition(capsys):
    v = Verdict(4, "K-block fusion composition and scale ablation path", capsys)
    model = RestorerModel(_small_arch(1, 2, (4, 8, 8)), seed=5)
    _, trace = model(to_tensor(toy_faces(2, 16, 6)))
    chain = []
    for src in model.fusion[0].blocks:
        blk = MultiHeadCrossAttention(src.cfg).to(D)
        blk.load_state_dict(src.state_dict())
        chain.append(blk)
    zd0 = trace.degraded[0]
    zp = straight_through(zd0, quantize(zd0, model.codebook))
    v.check("K=2 equals manual chain", torch.equal(trace.fused[1], chain[1](zd0, chain[0](zd0, zp))))
    for s in (1, 2, 3):
        out, tr = RestorerModel(_small_arch(s, 1), seed=s)(to_tensor(toy_faces(1, 16, 7)))
        v.check(f"S={s}", out.shape == (1, 3, 16, 16) and len(tr.degraded) == s and len(tr.fused) == s + 1)
    v.finish()


def test_criterion_5_edm(capsys, tmp_path):
    v = Verdict(5, "degradation model determinism and fidelity", capsys)
    clean = tmp_path / "clean"
    clean.mkdir()
    for i, img in enumerate(toy_faces(16, 64, seed=9)):
        edm.save_image(img, clean / f"face_{i:02d}.png")
    t0 = time.perf_counter()
    s = edm.synthesize_dataset(clean, tmp_path / "a", EDMConfig(p_uneven=0.5), seed=3)
    elapsed = time.perf_counter() - t0
    edm.synthesize_dataset(clean, tmp_path / "b", EDMConfig(p_uneven=0.5), seed=3)
    v.check("16 images written", s.written == 16)
    v.check("same seed, identical trees", _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b"))
    v.check("runtime < 1 min", elapsed < 60, f"16 images in {elapsed:.1f}s")

    img = toy_faces(1, 64, seed=10)[0]
    near = EvenParams(1.0, 0.05, 1.0, 0.0, 100, 0)
    db = psnr(edm.degrade_even(img, DegradationParams(0, 0, near)), img)
    v.check("near-identity > 50 dB", db > 50, f"near-identity {db:.1f} dB")

    p1, p2 = EvenParams(0.8, 2.0, 3.0, 8.0, 70, 11), EvenParams(1.0, 0.5, 1.5, 3.0, 90, 12)
    out = edm.degrade_uneven(img, DegradationParams(0, 0, p1, p2, 12, 8, 28))
    mask = edm.patch_mask((64, 64), 12, 8, 28)[..., 0].astype(bool)
    outside = edm.degrade_even(img, DegradationParams(0, 0, p2))
    v.check("uneven outside patch bit-exact", np.array_equal(out[~mask], outside[~mask]))

    rng = np.random.default_rng(0)
    draws = [edm.sample_params(rng, EDMConfig(p_haze=0.5, p_uneven=0.5, p_shift=0.5), 512) for _ in range(1000)]
    evens = [d.first for d in draws] + [d.second for d in draws if d.uneven]
    inside = (
        all(0 <= d.shift_h <= 32 and 0 <= d.shift_w <= 32 for d in draws)
        and all(0.7 <= e.alpha <= 1.0 and 0.2 <= e.sigma <= 10 and 1 <= e.scale <= 8 for e in evens)
        and all(0 <= e.noise <= 20 and 60 <= e.quality <= 100 for e in evens)
        and all(128 <= d.patch_size <= 256 for d in draws if d.uneven)
    )
    v.check("1000-draw audit", inside)
    v.finish()


@pytest.mark.slow
def test_criterion_6_training_trend(capsys):
    v = Verdict(6, "desk-scale training trends", capsys)
    oracle = json.loads(FIXTURE.read_text())
    t0 = time.perf_counter()
    rohqd, _ = run_rohqd_trend(**oracle["rohqd"]["args"])
    v.check("ROHQD L1 ratio", rohqd.ratio < oracle["rohqd"]["max_ratio"], f"ROHQD L1 ratio {rohqd.ratio:.3f}")
    rest = run_restorer_trend(**oracle["restorer"]["args"])
    v.check("restorer loss ratio", rest.ratio < oracle["restorer"]["max_ratio"], f"restorer loss ratio {rest.ratio:.3f}")
    v.check(
        "held-out PSNR above degraded",
        rest.psnr_restored - rest.psnr_degraded > oracle["restorer"]["min_psnr_gain_db"],
        f"held-out PSNR {rest.psnr_restored:.2f} vs degraded {rest.psnr_degraded:.2f} dB",
    )
    v.check("codebook unchanged", rest.codebook_unchanged)
    elapsed = time.perf_counter() - t0
    v.check("runtime < 10 min", elapsed < 600, f"{elapsed:.0f}s")
    v.finish()


def test_criterion_7_metrics(capsys):
    v = Verdict(7, "metric identities and hand cases", capsys)
    a = toy_faces(1, 32, seed=2)[0]
    net = SurrogateFeatureNet("identity", seed=0)
    v.check("psnr identical inf", psnr(a, a) == math.inf)
    v.check("ssim identical 1", abs(ssim(a, a) - 1.0) < 1e-12)
    v.check("idd identical 0", idd(a, a, net) == 0.0)
    flat = np.full((16, 16, 3), 0.4)
    v.check("uniform offset 20 dB", abs(psnr(flat, flat + 0.1) - 20.0) < 1e-9)
    e = np.array([0.3, -1.2, 2.0])
    v.check("antipodal pi", abs(angular_distance(e, -e) - math.pi) < 1e-12)
    v.finish()


def _grad_norm(params, loss):
    grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
    return torch.cat([(torch.zeros_like(p) if g is None else g).flatten() for p, g in zip(params, grads)])


def test_criterion_8_loss_aggregation(capsys):
    v = Verdict(8, "weighted loss sum and per-term ablation", capsys)
    terms = dict(zip(RESTORER_TERMS, (1.0, 2.0, 4.0, 0.5, 1.0, 3.0)))
    # 1 + 1*2 + 0.25*4 + 0.8*0.5 + 1*1 + 1*3
    v.check("hand sum 8.4", abs(total_restorer_loss(terms, LossWeights()) - 8.4) < 1e-12)

    arch = _small_arch(2, 1, (4, 8, 8))
    cfg = toy_config().replace(arch=arch)
    model = RestorerModel(arch, seed=2)
    params = [p for p in model.parameters() if p.requires_grad]
    out, trace = model(to_tensor(toy_faces(2, 16, 4)))
    live, _ = LossSuite(cfg).terms(out, to_tensor(toy_faces(2, 16, 5)), trace, cfg.weights)
    for name in RESTORER_TERMS[1:]:
        ablated = LossWeights(**{**dataclasses.asdict(cfg.weights), name: 0.0})
        g_full = _grad_norm(params, total_restorer_loss(live, cfg.weights))
        g_abl = _grad_norm(params, total_restorer_loss(live, ablated))
        rest = live["l1"] + sum(getattr(ablated, k) * live[k] for k in RESTORER_TERMS[1:] if k != name)
        diff = (g_full - g_abl).norm().item()
        expected = getattr(cfg.weights, name) * _grad_norm(params, live[name]).norm().item()
        v.check(
            f"lambda_{name}=0",
            diff > 0 and abs(diff - expected) <= 1e-9 * expected and torch.allclose(g_abl, _grad_norm(params, rest)),
        )
    v.finish()
