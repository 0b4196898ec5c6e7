from __future__ import annotations

import numpy as np
import pytest
import torch

from conftest import SMALL, small_model
from lang2motion.model import ModelConfig, build_model
from lang2motion.skeleton import kit_skeleton

SK = kit_skeleton()


def _chan(names):
    return [3 * SK.index(n) + k for n in names for k in range(3)]


ARM_CH = _chan(["LS", "LE", "LW", "RS", "RE", "RW"])
LEG_CH = _chan(["LH", "LK", "LA", "LMrot", "LF", "RH", "RK", "RA", "RMrot", "RF"])


def test_full_size_shapes():
    cfg = ModelConfig.from_skeleton()
    assert cfg.latent_dim == 1024 and cfg.stream_width() == 512
    m = build_model(cfg)
    x = torch.randn(2, 5, 66)
    z = m.pose_encoder(x)
    assert z.shape == (2, 1024)
    zs = m.sentence_encoder(torch.randn(2, 3, 4096))
    assert zs.shape == (2, 1024)
    assert m.decoder(z, x[:, 0], 7).shape == (2, 7, 66)
    p = m.discriminator(x)
    assert p.shape == (2,) and torch.all((p > 0) & (p < 1))


def test_trunk_carries_trajectory():
    cfg = ModelConfig.from_skeleton()
    assert cfg.part_channels["trunk"][-3:] == [63, 64, 65]
    with pytest.raises(ValueError):
        ModelConfig(part_channels={**cfg.part_channels, "trunk": cfg.part_channels["trunk"][:-1]})


def test_wrong_widths_rejected():
    m = small_model()
    with pytest.raises(ValueError):
        m.pose_encoder(torch.randn(1, 3, 65, dtype=torch.float64))
    with pytest.raises(ValueError):
        m.sentence_encoder(torch.randn(1, 3, 13, dtype=torch.float64))


def test_stream_separation():
    m = small_model()
    g = torch.Generator().manual_seed(0)
    x = torch.randn(3, 6, 66, generator=g, dtype=torch.float64)
    ub, lb = m.latent_pair(m.pose_encoder(x))
    xa = x.clone()
    xa[..., ARM_CH] += torch.randn(3, 6, len(ARM_CH), generator=g, dtype=torch.float64)
    ub2, lb2 = m.latent_pair(m.pose_encoder(xa))
    assert torch.equal(lb, lb2) and not torch.equal(ub, ub2)
    xl = x.clone()
    xl[..., LEG_CH] += torch.randn(3, 6, len(LEG_CH), generator=g, dtype=torch.float64)
    ub3, lb3 = m.latent_pair(m.pose_encoder(xl))
    assert torch.equal(ub, ub3) and not torch.equal(lb, lb3)


def test_batch_and_padding_consistency():
    m = small_model()
    x = torch.randn(2, 8, 66, dtype=torch.float64)
    lengths = torch.tensor([8, 5])
    z = m.pose_encoder(x, lengths)
    torch.testing.assert_close(z[1], m.pose_encoder(x[1:, :5])[0])
    e = torch.randn(2, 4, 12, dtype=torch.float64)
    zs = m.sentence_encoder(e, torch.tensor([4, 2]))
    torch.testing.assert_close(zs[1], m.sentence_encoder(e[1:, :2])[0])


def test_zero_delta_is_identity():
    m = small_model()
    m.decoder.zero_delta_()
    init = torch.randn(3, 66, dtype=torch.float64)
    out = m.decoder(torch.randn(3, m.cfg.latent_dim, dtype=torch.float64), init, 11)
    assert torch.equal(out, init[:, None].expand(-1, 11, -1))


def test_decoder_depends_on_initial_pose_and_latent():
    m = small_model()
    z = torch.randn(1, m.cfg.latent_dim, dtype=torch.float64)
    a = m.decoder(z, torch.zeros(1, 66, dtype=torch.float64), 5)
    b = m.decoder(z, torch.ones(1, 66, dtype=torch.float64), 5)
    c = m.decoder(-z, torch.zeros(1, 66, dtype=torch.float64), 5)
    assert not torch.allclose(a, b) and not torch.allclose(a, c)


def test_sentence_encoder_word_order():
    m = small_model()
    e = torch.randn(1, 4, 12, dtype=torch.float64)
    assert not torch.allclose(m.sentence_encoder(e), m.sentence_encoder(e.flip(1)))


def test_discriminator_ignores_padding():
    m = small_model()
    x = torch.randn(1, 6, 66, dtype=torch.float64)
    mask = torch.tensor([[1, 1, 1, 1, 0, 0]], dtype=torch.float64)
    y = x.clone()
    y[:, 4:] = 1e3
    torch.testing.assert_close(m.discriminator(x, mask), m.discriminator(y, mask))
    torch.testing.assert_close(m.discriminator(x, mask), m.discriminator(x[:, :4]))


def test_single_stream_layout():
    cfg = ModelConfig.from_skeleton(**SMALL, embed_dim=12, two_stream=False)
    man = cfg.manifest()
    assert man["latent_layout"] == {"body": 2 * SMALL["h"]}
    m = build_model(cfg, dtype=torch.float64)
    assert m.pose_encoder(torch.randn(2, 3, 66, dtype=torch.float64)).shape == (2, 2 * SMALL["h"])
    with pytest.raises(ValueError):
        m.latent_pair(torch.zeros(1, 2 * SMALL["h"]))


def test_initialization_is_seeded():
    a, b, c = small_model(seed=1), small_model(seed=1), small_model(seed=2)
    for (n, p), q, r in zip(a.named_parameters(), b.parameters(), c.parameters()):
        assert torch.equal(p, q), n
    assert any(not torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))
    w = a.pose_encoder.rnn["ub"].weight_hh_l0
    for block in torch.split(w, SMALL["h"], dim=0):
        torch.testing.assert_close(block @ block.T, torch.eye(SMALL["h"], dtype=torch.float64))
    assert torch.count_nonzero(a.pose_encoder.rnn["ub"].bias_hh_l0) == 0


def test_pose_autoencoder_learns():
    torch.manual_seed(0)
    m = small_model(dtype=torch.float32, h=32)
    x = torch.cumsum(0.1 * torch.randn(4, 10, 66), dim=1)
    opt = torch.optim.Adam(list(m.pose_encoder.parameters()) + list(m.decoder.parameters()), lr=3e-3)
    losses = []
    for _ in range(150):
        out = m.decoder(m.pose_encoder(x), x[:, 0], 10)
        loss = torch.nn.functional.smooth_l1_loss(out, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    assert losses[-1] < 0.5 * losses[0]


def test_decoder_starts_at_initial_pose():
    m = small_model()
    init = torch.randn(2, 66, dtype=torch.float64)
    out = m.decoder(torch.randn(2, m.cfg.latent_dim, dtype=torch.float64), init, 4)
    assert torch.equal(out[:, 0], init)
    assert out.shape == (2, 4, 66) and not torch.equal(out[:, 1], init)
    assert m.decoder(torch.zeros(1, m.cfg.latent_dim, dtype=torch.float64), init[:1], 1).shape == (1, 1, 66)
