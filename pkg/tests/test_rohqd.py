import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from facerestore.config import ArchConfig, TrainConfig, toy_config
from facerestore.errors import ContractError, DimensionError, NonFiniteLossError
from facerestore.losses import LossWeights
from facerestore.rohqd import (
    Codebook,
    VQAutoencoder,
    codebook_loss,
    commitment_loss,
    quantize,
    straight_through,
    train_rohqd,
)
from facerestore.toydata import toy_faces

D = torch.float64


def brute_force_indices(z, book):
    """Loop over every position and element; first strictly smaller distance wins."""
    b, c, h, w = z.shape
    zn, bn = z.numpy(), book.numpy()
    out = np.zeros((b, h, w), dtype=np.int64)
    for n in range(b):
        for i in range(h):
            for j in range(w):
                best, arg = np.inf, -1
                for m in range(bn.shape[0]):
                    d = float(((zn[n, :, i, j] - bn[m]) ** 2).sum())
                    if d < best:
                        best, arg = d, m
                out[n, i, j] = arg
    return out


class TestQuantize:
    def test_matches_exhaustive_scan_1000_queries(self):
        gen = torch.Generator().manual_seed(0)
        book = torch.randn(32, 8, generator=gen, dtype=D)
        z = torch.randn(10, 8, 10, 10, generator=gen, dtype=D)  # 1000 query positions
        res = quantize(z, book)
        assert np.array_equal(res.indices.numpy(), brute_force_indices(z, book))
        assert torch.equal(res.quantized, book[res.indices].permute(0, 3, 1, 2))

    def test_chunked_scan_agrees(self, monkeypatch):
        import facerestore.rohqd as rohqd

        gen = torch.Generator().manual_seed(1)
        book = torch.randn(32, 4, generator=gen, dtype=D)
        z = torch.randn(2, 4, 6, 6, generator=gen, dtype=D)
        full = quantize(z, book).indices
        monkeypatch.setattr(rohqd, "_SCAN_BUDGET", 32 * 4 * 5)
        assert torch.equal(quantize(z, book).indices, full)

    def test_ties_take_lowest_index(self):
        book = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]], dtype=D)
        z = torch.zeros(1, 2, 1, 1, dtype=D)
        assert quantize(z, book).indices.item() == 0
        z[0, 0] = 1.0
        assert quantize(z, book).indices.item() == 0

    def test_exact_member(self):
        book = torch.randn(5, 3, dtype=D)
        z = book[3].reshape(1, 3, 1, 1).clone()
        res = quantize(z, book)
        assert res.indices.item() == 3 and res.distances.item() == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            quantize(torch.zeros(1, 3, 2, 2, dtype=D), torch.zeros(4, 5, dtype=D))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), m=st.integers(1, 12), c=st.integers(1, 5))
    def test_property_exhaustive(self, seed, m, c):
        gen = torch.Generator().manual_seed(seed)
        # coarse integer grid makes ties common
        book = torch.randint(-2, 3, (m, c), generator=gen).to(D)
        z = torch.randint(-2, 3, (1, c, 3, 3), generator=gen).to(D)
        assert np.array_equal(quantize(z, book).indices.numpy(), brute_force_indices(z, book))


class TestCodebook:
    def test_init_range(self):
        book = Codebook(32, 16, generator=torch.Generator().manual_seed(0))
        assert book.weight.abs().max() <= 1.0 / 32
        assert book.weight.dtype == D

    def test_trainable_toggle(self):
        book = Codebook(4, 2)
        assert book.trainable
        book.trainable = False
        assert not book.weight.requires_grad


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), which=st.sampled_from(["cube", "sin", "linear", "norm"]))
def test_straight_through_equals_identity_substitution(seed, which):
    """d loss / d z through the estimator equals d loss / d Z_p at Z_p = quantized."""
    gen = torch.Generator().manual_seed(seed)
    book = torch.randn(8, 4, generator=gen, dtype=D)
    z = torch.randn(2, 4, 3, 3, generator=gen, dtype=D, requires_grad=True)
    w = torch.randn(2, 4, 3, 3, generator=gen, dtype=D)
    f = {
        "cube": lambda t: (t**3 * w).sum(),
        "sin": lambda t: torch.sin(t * w).sum(),
        "linear": lambda t: (t * w).sum(),
        "norm": lambda t: (t**2).sum().sqrt(),
    }[which]
    res = quantize(z, book)
    st_out = straight_through(z, res)
    (g_st,) = torch.autograd.grad(f(st_out), z)
    # substitute a fresh leaf holding the same forward value
    zp = st_out.detach().clone().requires_grad_(True)
    (g_sub,) = torch.autograd.grad(f(zp), zp)
    assert torch.equal(g_st, g_sub)


def test_straight_through_forward_value():
    book = torch.randn(8, 4, dtype=D)
    z = torch.randn(1, 4, 2, 2, dtype=D)
    res = quantize(z, book)
    assert torch.allclose(straight_through(z, res), res.quantized, atol=1e-15)


class TestVQLosses:
    def _single(self):
        z_h = torch.tensor([2.0, 0.0], dtype=D).reshape(1, 2, 1, 1).requires_grad_(True)
        d = torch.zeros(1, 2, 1, 1, dtype=D, requires_grad=True)
        return z_h, d

    def test_codebook_loss_hand_case(self):
        z_h, d = self._single()
        loss = codebook_loss(z_h, d)
        assert loss.item() == 2.0
        loss.backward()
        assert d.grad.flatten().tolist() == [-2.0, 0.0]
        assert z_h.grad is None or torch.equal(z_h.grad, torch.zeros_like(z_h))

    def test_commitment_loss_hand_case(self):
        z_h, d = self._single()
        loss = commitment_loss(z_h, d)
        assert loss.item() == 2.0
        loss.backward()
        assert z_h.grad.flatten().tolist() == [2.0, 0.0]
        assert d.grad is None or torch.equal(d.grad, torch.zeros_like(d))

    def test_equal_inputs_zero(self):
        z = torch.randn(1, 3, 2, 2, dtype=D)
        assert codebook_loss(z, z).item() == 0.0 and commitment_loss(z, z).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            codebook_loss(torch.zeros(1, 2, 1, 1), torch.zeros(1, 2, 2, 1))


def small_cfg(adv=0.0, steps=3, seed=0):
    arch = ArchConfig(
        image_size=16, widths=(4, 8), blocks_per_level=(1, 1), codebook_size=8, codebook_dim=4,
        num_heads=2, disc_width=4, disc_layers=2, crop_size=8, comp_disc_layers=1,
    )
    return toy_config().replace(arch=arch, weights=LossWeights(adv=adv), train=TrainConfig(batch_size=2, steps=steps), seed=seed)


class TestTrainRohqd:
    def test_deterministic_without_adversary(self):
        imgs = toy_faces(4, 16, seed=0)
        a = train_rohqd(imgs, small_cfg())
        b = train_rohqd(imgs, small_cfg())
        assert a.log == b.log
        for pa, pb in zip(a.model.parameters(), b.model.parameters()):
            assert torch.equal(pa, pb)

    def test_log_records_every_term(self, tmp_path):
        path = tmp_path / "log.jsonl"
        res = train_rohqd(toy_faces(4, 16, seed=1), small_cfg(adv=0.8, steps=2), log_path=path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2 == len(res.log)
        assert set(res.log[0]) == {"step", "l1", "per", "adv", "d", "c", "total"}
        assert res.discriminator is not None

    def test_codebook_moves(self):
        cfg = small_cfg(steps=2)
        before = VQAutoencoder(cfg.arch, generator_seed=cfg.seed).codebook.weight.detach().clone()
        after = train_rohqd(toy_faces(4, 16, seed=2), cfg).model.codebook.weight
        assert not torch.equal(before, after)

    def test_empty_dataset(self):
        with pytest.raises(ContractError):
            train_rohqd(np.zeros((0, 16, 16, 3)), small_cfg())

    def test_nan_aborts_with_term(self):
        imgs = toy_faces(2, 16)
        imgs[0, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteLossError, match="'l1'"):
            train_rohqd(imgs, small_cfg(steps=1))
