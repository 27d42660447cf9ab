import numpy as np
import pytest
import torch

from facerestore.attention import MultiHeadCrossAttention
from facerestore.config import ArchConfig, TrainConfig, toy_config
from facerestore.errors import ContractError, DimensionError, NonFiniteLossError
from facerestore.losses import LossWeights, total_restorer_loss
from facerestore.restorer import LossSuite, RestorerModel, restore, to_tensor, train_restorer
from facerestore.rohqd import VQAutoencoder, quantize, straight_through
from facerestore.toydata import toy_faces

D = torch.float64


def arch(scales=2, k=2, size=16, widths=(4, 8, 8), skips=False):
    return ArchConfig(
        image_size=size, widths=widths, blocks_per_level=(1,) * len(widths), scales=scales,
        mhca_per_scale=k, num_heads=2, codebook_size=8, codebook_dim=4, disc_width=4,
        disc_layers=2, crop_size=8, comp_disc_layers=1, decoder_skips=skips,
    )


def images(n=2, size=16, seed=0):
    return to_tensor(toy_faces(n, size, seed))


def test_toy_scales_are_8_and_16():
    model = RestorerModel(toy_config().arch)
    zd, _ = model.encode_multi_scale(images(1, 64))
    assert [tuple(z.shape[1:]) for z in zd] == [(32, 8, 8), (16, 16, 16)]


@pytest.mark.parametrize("scales", [1, 2, 3])
def test_scales_share_one_code_path(scales):
    model = RestorerModel(arch(scales=scales, widths=(4, 8, 8, 8), size=16))
    out, trace = model(images())
    assert out.shape == (2, 3, 16, 16)
    assert len(trace.degraded) == scales and len(trace.fused) == scales + 1
    for s, (zd, zp) in enumerate(zip(trace.degraded, trace.fused[1:])):
        assert zd.shape == zp.shape
        assert zd.shape[2] == 2 * 2**s  # 2x2 latent, doubling per scale


def test_k2_fusion_equals_manual_chain():
    model = RestorerModel(arch(scales=1, k=2))
    x = images()
    _, trace = model(x)
    blocks = []
    for src in model.fusion[0].blocks:
        blk = MultiHeadCrossAttention(src.cfg).to(D)
        blk.load_state_dict(src.state_dict())
        blocks.append(blk)
    zd0 = trace.degraded[0]
    zp = straight_through(zd0, quantize(zd0, model.codebook))
    assert torch.equal(trace.fused[1], blocks[1](zd0, blocks[0](zd0, zp)))


def test_forward_matches_hand_assembled_graph():
    model = RestorerModel(arch(scales=2, k=1))
    x = images()
    out, _ = model(x)
    z0, feats = model.encoder.forward_levels(x)
    zp = straight_through(z0, quantize(z0, model.codebook))
    z = model.fusion[0].blocks[0](z0, zp)

    def hook(level, h):
        return model.fusion[1].blocks[0](feats[1], h) if level == 1 else h

    assert torch.equal(out, model.decoder(z, hook))


def test_decoder_skips_flag_changes_unfused_levels():
    a = RestorerModel(arch(scales=1), seed=0)
    b = RestorerModel(arch(scales=1, skips=True), seed=0)
    x = images()
    assert not torch.equal(a(x)[0], b(x)[0])


def test_encoder_gradients_reach_every_parameter():
    cfg = toy_config().replace(arch=arch(), weights=LossWeights(adv=0.0, comp=0.0))
    model = RestorerModel(cfg.arch, seed=1)
    suite = LossSuite(cfg)
    x, y = images(2, seed=1), images(2, seed=2)
    out, trace = model(x)
    terms, _ = suite.terms(out, y, trace, cfg.weights)
    total_restorer_loss(terms, cfg.weights).backward()
    for name, p in model.encoder.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name
    assert model.codebook.weight.grad is None


def test_wrong_extent():
    model = RestorerModel(arch())
    with pytest.raises(DimensionError):
        model(images(1, 32))


def test_restore_single_image_in_range():
    model = RestorerModel(arch())
    out, trace = restore(toy_faces(1, 16)[0], model, keep_attention=True)
    assert out.shape == (16, 16, 3) and out.min() >= 0 and out.max() <= 1
    assert all(a is not None for a in trace.attention)


def test_from_rohqd_copies_weights():
    a = arch()
    vq = VQAutoencoder(a, generator_seed=5)
    model = RestorerModel.from_rohqd(a, vq)
    assert torch.equal(model.codebook.weight, vq.codebook.weight)
    assert not model.codebook.trainable
    x = images()
    assert torch.equal(model.encoder(x), vq.encoder(x))


class TestTrainRestorer:
    def _cfg(self, steps=2, **w):
        return toy_config().replace(arch=arch(), train=TrainConfig(batch_size=2, steps=steps), weights=LossWeights(**w))

    def test_codebook_bytes_unchanged_and_log(self, tmp_path):
        cfg = self._cfg()
        model = RestorerModel(cfg.arch)
        before = model.codebook.weight.detach().numpy().tobytes()
        deg, clean = toy_faces(4, 16, 1), toy_faces(4, 16, 2)
        res = train_restorer(deg, clean, model, cfg, log_path=tmp_path / "log.jsonl")
        assert model.codebook.weight.detach().numpy().tobytes() == before
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == 2
        assert set(res.log[0]) == {"step", "l1", "per", "p", "adv", "comp", "id", "total"}

    def test_trainable_codebook_rejected(self):
        cfg = self._cfg()
        model = RestorerModel(cfg.arch)
        model.codebook.trainable = True
        with pytest.raises(ContractError):
            train_restorer(toy_faces(2, 16), toy_faces(2, 16), model, cfg)

    def test_nan_names_term(self):
        cfg = self._cfg(steps=1)
        clean = toy_faces(2, 16)
        clean[:, 0, 0, 0] = np.nan
        with pytest.raises(NonFiniteLossError, match="'l1'"):
            train_restorer(toy_faces(2, 16), clean, RestorerModel(cfg.arch), cfg)

    def test_mismatched_pairs(self):
        cfg = self._cfg()
        with pytest.raises(ContractError):
            train_restorer(toy_faces(2, 16), toy_faces(3, 16), RestorerModel(cfg.arch), cfg)
