from __future__ import annotations

import json
import math

import numpy as np
import pytest
import torch

from conftest import SMALL, random_embeddings, small_model
from lang2motion import kit
from lang2motion.model import ModelConfig
from lang2motion.training import (
    AblationConfig,
    CheckpointError,
    LossWeights,
    TrainConfig,
    TrainingSet,
    compute_losses,
    forward_losses,
    load_checkpoint,
    make_optimizers,
    smooth_l1,
    train,
    train_step,
)

D = torch.float64


@pytest.fixture(scope="module")
def tiny_set(toy_samples):
    samples = toy_samples[:6]
    stats = kit.fit_normalization(samples)
    return TrainingSet(samples, stats, random_embeddings(samples, 12), max_frames=8)


def test_smooth_l1_values():
    a = torch.zeros(4, dtype=D)
    assert smooth_l1(a + 0.5, a).item() == 0.125
    assert smooth_l1(a + 3.0, a).item() == 2.5
    x = torch.tensor([[0.5, 3.0]], dtype=D)
    mask = torch.tensor([[True, False]])
    assert smooth_l1(x, torch.zeros_like(x), mask).item() == 0.125


def _fixture(B=2, T=5, C=66, seed=0):
    g = torch.Generator().manual_seed(seed)
    P = torch.randn(B, T, C, generator=g, dtype=D)
    z = torch.randn(B, 16, generator=g, dtype=D)
    return P, z


def test_perfect_reconstruction_zero_losses():
    P, z = _fixture()
    half = torch.full((2,), 0.5, dtype=D)
    b = compute_losses(P, P.clone(), P.clone(), z, z.clone(), [z.clone()], [half], half, LossWeights())
    for name in ("L_R", "L_M", "L_V", "L_E"):
        assert getattr(b, name).item() == 0.0, name


def test_bce_at_half():
    P, z = _fixture()
    half = torch.full((2,), 0.5, dtype=D)
    b = compute_losses(P, P, P, z, z, [z], [half, half], half, LossWeights())
    assert abs(b.L_G.item() - (-math.log(0.5))) < 1e-9
    assert abs(b.L_D.item() - 2 * math.log(2)) < 1e-9


def test_straight_line_oracle():
    t = torch.arange(6, dtype=D)[None, :, None]
    P = t * torch.ones(1, 1, 66, dtype=D)
    shifted = P + 0.5
    z = torch.zeros(1, 16, dtype=D)
    b = compute_losses(P, shifted, shifted, z, z, None, None, None, LossWeights())
    assert b.L_R.item() == pytest.approx(0.25, abs=1e-12)  # 0.125 from each decode
    assert b.L_V.item() == 0.0


def test_objective_assembly():
    P, z = _fixture(seed=3)
    g = torch.Generator().manual_seed(4)
    Pp, Ps = P + torch.randn(P.shape, generator=g, dtype=D), P + torch.randn(P.shape, generator=g, dtype=D)
    zs, zh = z + 1, z - 0.3
    pf, pr = torch.tensor([0.3, 0.6], dtype=D), torch.tensor([0.8, 0.9], dtype=D)
    w = LossWeights()
    b = compute_losses(P, Pp, Ps, z, zs, [zh], [pf], pr, w)
    expected = b.L_R + 0.001 * b.L_M + 0.1 * b.L_V + 0.1 * b.L_E + 0.001 * b.L_G
    assert abs(b.total_generator.item() - expected.item()) < 1e-12
    assert abs(b.total_discriminator.item() - 0.001 * b.L_D.item()) < 1e-12
    assert b.L_R.item() == pytest.approx((smooth_l1(Pp, P) + smooth_l1(Ps, P)).item())
    # latent terms are summed per stream
    assert b.L_E.item() == pytest.approx((smooth_l1(z[:, :8], zs[:, :8]) + smooth_l1(z[:, 8:], zs[:, 8:])).item())


def _model_for(ts, **kw):
    return small_model(seed=0, dtype=D, **kw)


def test_lr_zero_changes_nothing(tiny_set):
    m = _model_for(tiny_set)
    cfg = TrainConfig(epochs=1, learning_rate=0.0)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    opt_g, opt_d = make_optimizers(m, cfg)
    train_step(m, tiny_set.collate([0, 1, 2], D), opt_g, opt_d, cfg)
    for k, v in m.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_adversarial_weight_zero_gives_no_discriminator_gradient(tiny_set):
    m = _model_for(tiny_set)
    b = forward_losses(m, tiny_set.collate([0, 1], D), TrainConfig(), LossWeights(lambda_G=0.0))
    b.total_discriminator.backward(retain_graph=True)
    for p in m.discriminator.parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0
    m.zero_grad()
    b.total_generator.backward()
    # the discriminator is not a generator parameter even with lambda_G > 0
    assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in m.discriminator.parameters())


def test_discriminator_update_does_not_touch_generator(tiny_set):
    m = _model_for(tiny_set)
    cfg = TrainConfig(epochs=1)
    opt_g, opt_d = make_optimizers(m, cfg)
    opt_g.param_groups[0]["lr"] = 0.0
    gen_before = [p.clone() for p in m.generator_parameters()]
    disc_before = [p.clone() for p in m.discriminator.parameters()]
    train_step(m, tiny_set.collate([0, 1, 2], D), opt_g, opt_d, cfg)
    assert all(torch.equal(a, b) for a, b in zip(gen_before, m.generator_parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(disc_before, m.discriminator.parameters()))


def test_non_finite_batch_is_skipped(tiny_set):
    m = _model_for(tiny_set)
    cfg = TrainConfig(epochs=1)
    batch = tiny_set.collate([0, 1], D)
    batch.motion[0, 1, 3] = float("nan")
    before = [p.clone() for p in m.parameters()]
    out = train_step(m, batch, *make_optimizers(m, cfg), cfg)
    assert out["skipped"] == 1.0
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))


def test_two_phase_schedule(tiny_set):
    ab = AblationConfig("jt")
    assert ab.variant == "no_joint_training"
    assert ab.phases(10, 0.5) == ["pose"] * 5 + ["sentence"] * 5
    assert AblationConfig().phases(3, 0.5) == ["joint"] * 3
    m = _model_for(tiny_set)
    batch = tiny_set.collate([0, 1], D)
    b = forward_losses(m, batch, TrainConfig(), LossWeights(), "sentence")
    b.total_generator.backward()
    assert all(p.grad is None for p in m.pose_encoder.parameters())
    assert any(p.grad is not None for p in m.sentence_encoder.parameters())
    m.zero_grad(set_to_none=True)
    b = forward_losses(m, batch, TrainConfig(), LossWeights(), "pose")
    b.total_generator.backward()
    assert all(p.grad is None for p in m.sentence_encoder.parameters())
    assert any(p.grad is not None for p in m.pose_encoder.parameters())


def test_unknown_ablation():
    with pytest.raises(ValueError):
        AblationConfig("nope")


def _run(tiny_set, run_dir, epochs, resume=True):
    cfg = TrainConfig(epochs=epochs, batch_size=3, seed=5)
    mcfg = ModelConfig.from_skeleton(**SMALL, embed_dim=12)
    return train(tiny_set, tiny_set, cfg, AblationConfig(), run_dir, mcfg, {"hash": "x"}, resume=resume, dtype=D)


def test_training_reproducible(tiny_set, tmp_path):
    m1, h1 = _run(tiny_set, tmp_path / "a", 2)
    m2, h2 = _run(tiny_set, tmp_path / "b", 2)
    for r1, r2 in zip(h1, h2):
        assert r1["train"] == r2["train"]
    for a, b in zip(m1.parameters(), m2.parameters()):
        assert torch.equal(a, b)
    lines = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [0, 1]
    assert (tmp_path / "a" / "best.pt").exists() and (tmp_path / "a" / "architecture.json").exists()


def test_resume_matches_uninterrupted(tiny_set, tmp_path):
    full, _ = _run(tiny_set, tmp_path / "full", 3)
    _run(tiny_set, tmp_path / "part", 2)
    resumed, hist = _run(tiny_set, tmp_path / "part", 3)
    assert [h["epoch"] for h in hist] == [0, 1, 2]
    for a, b in zip(full.parameters(), resumed.parameters()):
        torch.testing.assert_close(a, b, rtol=0, atol=1e-12)


def test_checkpoint_roundtrip(tiny_set, tmp_path):
    model, _ = _run(tiny_set, tmp_path / "r", 1)
    loaded, ckpt = load_checkpoint(tmp_path / "r" / "last.pt")
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert torch.equal(a, b)
    assert ckpt["ablation"] == "full" and ckpt["architecture"]["latent_layout"] == {"ub": 16, "lb": 16}
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "r" / "last.pt", embedder_hash="other")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.pt")


def test_batches_cover_everything(tiny_set):
    rng = np.random.default_rng(0)
    batches = tiny_set.batches(4, rng)
    assert sorted(i for b in batches for i in b) == list(range(len(tiny_set)))
    b = tiny_set.collate(batches[0], D)
    assert b.mask.sum().item() == sum(min(len(tiny_set.samples[i].motion), 8) for i in batches[0])
