"""Loss terms, the weighted objective, the optimisation loop and checkpoints."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .kit import NormalizationStats, Sample
from .model import ModelConfig, Text2Motion, build_model

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
ABLATIONS = ("full", "no_joint_training", "no_two_stream", "no_extra_losses", "no_bert")
ABLATION_ALIASES = {"jt": "no_joint_training", "2st": "no_two_stream", "lo": "no_extra_losses", "bert": "no_bert"}


@dataclass
class LossWeights:
    lambda_M: float = 0.001
    lambda_V: float = 0.1
    lambda_E: float = 0.1
    lambda_G: float = 0.001

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    epochs: int = 350
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_decay: float = 0.99  # multiplicative, per epoch
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float | None = 1.0
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    disc_inputs: str = "both"  # which generated sequences the discriminator scores: "both" | "s" | "p"
    aux_on: str = "s"  # L_M / L_V operands: "s" (sentence decode) or "both"
    joint_phase_split: float = 0.5  # fraction of epochs spent in phase 1 of no_joint_training
    max_frames: int | None = None
    limit: int | None = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("epochs and batch_size must be positive and learning_rate non-negative")
        if self.disc_inputs not in ("both", "s", "p") or self.aux_on not in ("s", "both"):
            raise ValueError("bad disc_inputs / aux_on setting")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class AblationConfig:
    variant: str = "full"

    def __post_init__(self):
        self.variant = ABLATION_ALIASES.get(self.variant, self.variant)
        if self.variant not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.variant!r}; choose from {ABLATIONS}")

    def model_overrides(self) -> dict:
        return {"two_stream": False} if self.variant == "no_two_stream" else {}

    def weights(self, base: LossWeights) -> LossWeights:
        if self.variant == "no_extra_losses":
            return LossWeights(0.0, 0.0, 0.0, 0.0)
        return base

    def phases(self, epochs: int, split: float) -> list[str]:
        if self.variant != "no_joint_training":
            return ["joint"] * epochs
        n1 = min(max(1, int(round(epochs * split))), epochs)
        return ["pose"] * n1 + ["sentence"] * (epochs - n1)


@dataclass
class LossBundle:
    L_R: torch.Tensor
    L_M: torch.Tensor
    L_V: torch.Tensor
    L_E: torch.Tensor
    L_G: torch.Tensor
    L_D: torch.Tensor
    total_generator: torch.Tensor
    total_discriminator: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_floats().values())


# --- losses -------------------------------------------------------------------------


def smooth_l1(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean smooth-l1 (transition at 1.0). mask has the leading dims of a and selects valid entries."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    elem = F.smooth_l1_loss(a, b, reduction="none", beta=1.0)
    if mask is None:
        return elem.mean()
    m = mask.to(elem.dtype)
    while m.dim() < elem.dim():
        m = m.unsqueeze(-1)
    denom = m.expand_as(elem).sum()
    return (elem * m).sum() / denom.clamp(min=1.0)


def _streams(z: torch.Tensor, n: int) -> list[torch.Tensor]:
    return list(torch.chunk(z, n, dim=-1))


def latent_distance(a: torch.Tensor, b: torch.Tensor, n_streams: int) -> torch.Tensor:
    """Sum over streams of the smooth-l1 distance between latent chunks."""
    return sum(smooth_l1(x, y) for x, y in zip(_streams(a, n_streams), _streams(b, n_streams)))


def _bce(p: torch.Tensor, target: float) -> torch.Tensor:
    # torch's BCE raises on NaN input; return NaN instead so the step-skipping guard handles it.
    if not bool(torch.isfinite(p).all()):
        return p.new_full((), float("nan"))
    return F.binary_cross_entropy(p, torch.full_like(p, target))


def compute_losses(
    P: torch.Tensor,
    P_hat_p: torch.Tensor | None,
    P_hat_s: torch.Tensor | None,
    z_p: torch.Tensor | None,
    z_s: torch.Tensor | None,
    z_hat: list[torch.Tensor] | torch.Tensor | None,
    d_fake: list[torch.Tensor] | torch.Tensor | None,
    d_real: torch.Tensor | None,
    weights: LossWeights,
    mask: torch.Tensor | None = None,
    n_streams: int = 2,
    d_fake_detached: list[torch.Tensor] | torch.Tensor | None = None,
    velocity_on: list[torch.Tensor] | None = None,
) -> LossBundle:
    """Assemble all loss terms. Absent inputs contribute zero.

    z_hat: latents re-encoded from generated motion, compared against z_p.
    d_fake: discriminator probabilities on generated motion (graph kept, for L_G).
    d_fake_detached: probabilities on detached generated motion (for L_D);
    defaults to d_fake.
    velocity_on: generated sequences entering L_V; defaults to [P_hat_s].
    """
    zero = P.new_zeros(())
    L_R = zero
    for pred in (P_hat_s, P_hat_p):
        if pred is not None:
            L_R = L_R + smooth_l1(pred, P, mask)

    L_M = zero
    if z_hat is not None and z_p is not None:
        for zh in z_hat if isinstance(z_hat, list) else [z_hat]:
            L_M = L_M + latent_distance(zh, z_p, n_streams)

    L_V = zero
    if velocity_on is None:
        velocity_on = [P_hat_s] if P_hat_s is not None else []
    vel_mask = None if mask is None else (mask[:, 1:] & mask[:, :-1])
    if P.shape[1] >= 2:
        v_gt = P[:, 1:] - P[:, :-1]
        for gen in velocity_on:
            L_V = L_V + smooth_l1(gen[:, 1:] - gen[:, :-1], v_gt, vel_mask)

    L_E = latent_distance(z_p, z_s, n_streams) if (z_p is not None and z_s is not None) else zero

    L_G, L_D = zero, zero
    if d_fake is not None:
        fakes = d_fake if isinstance(d_fake, list) else [d_fake]
        L_G = sum(_bce(p, 1.0) for p in fakes) / len(fakes)
        det = d_fake_detached if d_fake_detached is not None else d_fake
        det = det if isinstance(det, list) else [det]
        L_D = sum(_bce(p, 0.0) for p in det) / len(det)
        if d_real is not None:
            L_D = L_D + _bce(d_real, 1.0)

    w = weights
    total_g = L_R + w.lambda_M * L_M + w.lambda_V * L_V + w.lambda_E * L_E + w.lambda_G * L_G
    total_d = w.lambda_G * L_D
    return LossBundle(L_R, L_M, L_V, L_E, L_G, L_D, total_g, total_d)


# --- data ---------------------------------------------------------------------------


@dataclass
class Batch:
    motion: torch.Tensor  # (B, T, C) normalized
    mask: torch.Tensor  # (B, T) bool
    lengths: torch.Tensor
    emb: torch.Tensor  # (B, W, K)
    emb_lengths: torch.Tensor
    index: list[int]


class TrainingSet:
    """Samples with normalized channel arrays and cached sentence features."""

    def __init__(self, samples: list[Sample], stats: NormalizationStats, embeddings: dict[str, np.ndarray],
                 max_frames: int | None = None):
        self.samples = samples
        self.stats = stats
        self.embeddings = embeddings
        self.channels = []
        for s in samples:
            c = stats.apply(s.motion.to_channels())
            self.channels.append(c[:max_frames] if max_frames else c)
        missing = {s.sentence for s in samples} - set(embeddings)
        if missing:
            raise KeyError(f"{len(missing)} sentence(s) lack embeddings, e.g. {next(iter(missing))!r}")

    def __len__(self):
        return len(self.samples)

    def collate(self, idx: list[int], dtype=torch.float32) -> Batch:
        T = max(self.channels[i].shape[0] for i in idx)
        W = max(self.embeddings[self.samples[i].sentence].shape[0] for i in idx)
        C = self.channels[idx[0]].shape[1]
        K = self.embeddings[self.samples[idx[0]].sentence].shape[1]
        motion = np.zeros((len(idx), T, C))
        emb = np.zeros((len(idx), W, K))
        lengths, emb_lengths = [], []
        for b, i in enumerate(idx):
            c = self.channels[i]
            e = self.embeddings[self.samples[i].sentence]
            motion[b, : len(c)] = c
            emb[b, : len(e)] = e
            lengths.append(len(c))
            emb_lengths.append(len(e))
        lengths_t = torch.tensor(lengths)
        mask = torch.arange(T)[None, :] < lengths_t[:, None]
        return Batch(
            torch.as_tensor(motion, dtype=dtype), mask, lengths_t,
            torch.as_tensor(emb, dtype=dtype), torch.tensor(emb_lengths), list(idx),
        )

    def batches(self, batch_size: int, rng: np.random.Generator | None = None, bucket: int = 8):
        """Shuffled batches; within pools of bucket*batch_size samples, similar lengths are grouped."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        pool = batch_size * bucket
        out = []
        for start in range(0, len(order), pool):
            chunk = sorted(order[start : start + pool], key=lambda i: (self.channels[i].shape[0], i))
            out += [chunk[k : k + batch_size] for k in range(0, len(chunk), batch_size)]
        if rng is not None:
            out = [out[i] for i in rng.permutation(len(out))]
        return [list(map(int, b)) for b in out]


# --- one optimisation step ----------------------------------------------------------


def forward_losses(model: Text2Motion, batch: Batch, cfg: TrainConfig, weights: LossWeights,
                   phase: str = "joint") -> LossBundle:
    """Run the model on a batch and assemble the loss bundle for the given phase.

    phase "joint": end-to-end; "pose": autoencoder only; "sentence": sentence encoder
    and decoder against a frozen pose encoder.
    """
    n_streams = len(model.cfg.streams)
    P, mask, lengths = batch.motion, batch.mask, batch.lengths
    T, initial = P.shape[1], P[:, 0]
    disc = model.discriminator

    if phase == "joint":
        P_hat_p, P_hat_s, z_p, z_s = model(P, lengths, batch.emb, batch.emb_lengths)
        z_hat = [model.pose_encoder(P_hat_s, lengths)]
        vel = [P_hat_s]
        if cfg.aux_on == "both":
            z_hat.append(model.pose_encoder(P_hat_p, lengths))
            vel.append(P_hat_p)
        fakes = {"both": [P_hat_s, P_hat_p], "s": [P_hat_s], "p": [P_hat_p]}[cfg.disc_inputs]
    elif phase == "pose":
        z_p = model.pose_encoder(P, lengths)
        P_hat_p, P_hat_s, z_s = model.decoder(z_p, initial, T), None, None
        z_hat, vel, fakes = [model.pose_encoder(P_hat_p, lengths)], [P_hat_p], [P_hat_p]
    elif phase == "sentence":
        with torch.no_grad():
            z_p = model.pose_encoder(P, lengths)
        z_s = model.sentence_encoder(batch.emb, batch.emb_lengths)
        P_hat_p, P_hat_s = None, model.decoder(z_s, initial, T)
        z_hat, vel, fakes = None, [], []
        weights = LossWeights(0.0, 0.0, weights.lambda_E, 0.0)
    else:
        raise ValueError(f"unknown phase {phase!r}")

    d_fake = [disc(f, mask) for f in fakes] or None
    d_fake_det = [disc(f.detach(), mask) for f in fakes] or None
    d_real = disc(P, mask) if fakes else None
    return compute_losses(
        P, P_hat_p, P_hat_s, z_p, z_s, z_hat, d_fake, d_real, weights, mask, n_streams,
        d_fake_detached=d_fake_det, velocity_on=vel,
    )


def make_optimizers(model: Text2Motion, cfg: TrainConfig):
    opt_g = torch.optim.Adam(model.generator_parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)
    opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)
    return opt_g, opt_d


def _grads_finite(params) -> bool:
    return all(p.grad is None or bool(torch.isfinite(p.grad).all()) for p in params)


def train_step(model: Text2Motion, batch: Batch, opt_g, opt_d, cfg: TrainConfig,
               weights: LossWeights | None = None, phase: str = "joint") -> dict[str, float]:
    """One generator update followed by one discriminator update."""
    weights = weights or cfg.weights
    model.train()
    bundle = forward_losses(model, batch, cfg, weights, phase)
    out = bundle.as_floats()
    if not bundle.is_finite():
        log.error("non-finite loss, step skipped: %s", out)
        return {**out, "skipped": 1.0}

    gen_params = list(model.generator_parameters())
    disc_params = list(model.discriminator.parameters())
    opt_g.zero_grad(set_to_none=True)
    opt_d.zero_grad(set_to_none=True)
    bundle.total_generator.backward()
    skipped = 0.0
    if _grads_finite(gen_params):
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(gen_params, cfg.grad_clip)
        opt_g.step()
    else:
        log.warning("non-finite generator gradient; generator step skipped")
        skipped = 1.0

    opt_d.zero_grad(set_to_none=True)
    if bundle.total_discriminator.requires_grad:
        bundle.total_discriminator.backward()
        if _grads_finite(disc_params):
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(disc_params, cfg.grad_clip)
            opt_d.step()
        else:
            log.warning("non-finite discriminator gradient; discriminator step skipped")
            skipped = 1.0
    return {**out, "skipped": skipped}


@torch.no_grad()
def evaluate_losses(model: Text2Motion, data: TrainingSet, cfg: TrainConfig, weights: LossWeights,
                    phase: str = "joint", dtype=torch.float32) -> dict[str, float]:
    model.eval()
    sums, n = {}, 0
    for idx in data.batches(cfg.batch_size):
        b = data.collate(idx, dtype)
        vals = forward_losses(model, b, cfg, weights, phase).as_floats()
        for k, v in vals.items():
            sums[k] = sums.get(k, 0.0) + v * len(idx)
        n += len(idx)
    return {k: v / n for k, v in sums.items()}


# --- checkpoints --------------------------------------------------------------------


def atomic_torch_save(obj, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)


def make_checkpoint(model, opt_g, opt_d, sched_g, sched_d, epoch, train_cfg, ablation, embedder_info,
                    stats: NormalizationStats, best_val, extra=None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "architecture": model.cfg.manifest(),
        "model_config": model.cfg.to_dict(),
        "ablation": ablation.variant,
        "train_config": _jsonable(asdict(train_cfg)),
        "embedder": embedder_info,
        "normalization": stats.to_dict(),
        "model": model.state_dict(),
        "opt_g": opt_g.state_dict(),
        "opt_d": opt_d.state_dict(),
        "sched_g": sched_g.state_dict(),
        "sched_d": sched_d.state_dict(),
        "epoch": epoch,
        "best_val": best_val,
        "extra": extra or {},
    }


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path, embedder_hash: str | None = None) -> tuple[Text2Motion, dict]:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: no such checkpoint") from exc
    except Exception as exc:  # noqa: BLE001 (torch raises assorted unpickling errors)
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a lang2motion checkpoint (format {CHECKPOINT_FORMAT})")
    if embedder_hash is not None and ckpt["embedder"].get("hash") != embedder_hash:
        raise CheckpointError(
            f"{path}: trained with embedder {ckpt['embedder'].get('hash')}, got {embedder_hash}"
        )
    cfg = ModelConfig.from_dict(ckpt["model_config"])
    model = Text2Motion(cfg)
    state = ckpt["model"]
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the recorded architecture: {exc}") from exc
    model.eval()
    return model, ckpt


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))


# --- the loop -----------------------------------------------------------------------


def set_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def train(
    train_set: TrainingSet,
    val_set: TrainingSet | None,
    cfg: TrainConfig,
    ablation: AblationConfig,
    run_dir: str | Path,
    model_cfg: ModelConfig,
    embedder_info: dict | None = None,
    resume: bool = True,
    dtype=torch.float32,
    on_epoch_end: Callable[[int, Text2Motion], dict | None] | None = None,
) -> tuple[Text2Motion, list[dict]]:
    """Train for cfg.epochs, writing metrics.jsonl, last.pt and best.pt into run_dir."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    set_seed(cfg.seed)
    model = build_model(model_cfg, seed=cfg.seed, dtype=dtype)
    opt_g, opt_d = make_optimizers(model, cfg)
    sched_g = torch.optim.lr_scheduler.ExponentialLR(opt_g, gamma=cfg.lr_decay)
    sched_d = torch.optim.lr_scheduler.ExponentialLR(opt_d, gamma=cfg.lr_decay)
    weights = ablation.weights(cfg.weights)
    phases = ablation.phases(cfg.epochs, cfg.joint_phase_split)
    embedder_info = embedder_info or {}

    (run_dir / "architecture.json").write_text(json.dumps(
        {"ablation": ablation.variant, **model_cfg.manifest()}, indent=2))

    start, best_val, history = 0, math.inf, []
    last = run_dir / "last.pt"
    metrics_path = run_dir / "metrics.jsonl"
    if resume and last.exists():
        ckpt = torch.load(last, map_location="cpu", weights_only=False)
        model.load_state_dict(ckpt["model"])
        opt_g.load_state_dict(ckpt["opt_g"])
        opt_d.load_state_dict(ckpt["opt_d"])
        sched_g.load_state_dict(ckpt["sched_g"])
        sched_d.load_state_dict(ckpt["sched_d"])
        start, best_val = ckpt["epoch"] + 1, ckpt["best_val"]
        if metrics_path.exists():
            history = [json.loads(l) for l in metrics_path.read_text().splitlines() if l.strip()]
            history = [h for h in history if h["epoch"] < start]
        log.info("resuming from epoch %d", start)
    elif metrics_path.exists():
        metrics_path.unlink()

    for epoch in range(start, cfg.epochs):
        t0 = time.time()
        phase = phases[epoch]
        rng = np.random.default_rng([cfg.seed, epoch])
        sums, n = {}, 0
        for idx in train_set.batches(cfg.batch_size, rng):
            vals = train_step(model, train_set.collate(idx, dtype), opt_g, opt_d, cfg, weights, phase)
            for k, v in vals.items():
                sums[k] = sums.get(k, 0.0) + v * len(idx)
            n += len(idx)
        sched_g.step()
        sched_d.step()
        record = {"epoch": epoch, "phase": phase, "lr": opt_g.param_groups[0]["lr"],
                  "train": {k: v / n for k, v in sums.items()}, "seconds": round(time.time() - t0, 3)}
        if val_set is not None and len(val_set):
            record["val"] = evaluate_losses(model, val_set, cfg, weights, phase, dtype)
            score = record["val"]["total_generator"]
        else:
            score = record["train"]["total_generator"]
        if on_epoch_end is not None:
            record.update(on_epoch_end(epoch, model) or {})
        # Phase changes redefine the objective; restart best tracking when they do.
        if epoch > 0 and phases[epoch - 1] != phase:
            best_val = math.inf
        improved = score < best_val
        best_val = min(best_val, score)
        ckpt = make_checkpoint(model, opt_g, opt_d, sched_g, sched_d, epoch, cfg, ablation, embedder_info,
                               train_set.stats, best_val)
        atomic_torch_save(ckpt, last)
        if improved:
            # best.pt is for inference; optimizer state lives only in last.pt
            atomic_torch_save({k: v for k, v in ckpt.items() if not k.startswith(("opt_", "sched_"))},
                              run_dir / "best.pt")
        history.append(record)
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        log.info("epoch %d [%s] train %.5f%s", epoch, phase, record["train"]["total_generator"],
                 f" val {record['val']['total_generator']:.5f}" if "val" in record else "")
    return model, history
