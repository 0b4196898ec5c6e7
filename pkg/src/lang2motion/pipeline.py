"""Glue between the data, model and metrics: synthesis and test-set evaluation."""
from __future__ import annotations

import numpy as np
import torch

from .kit import NormalizationStats, Sample
from .metrics import EvalReport, build_report
from .model import LatentPair, Text2Motion
from .skeleton import MotionSequence, Skeleton, root_path
from .text_embed import (
    BertEmbedder,
    EmbedderConfig,
    StaticEmbedder,
    StaticEmbedderConfig,
    WordEmbeddingSequence,
)


def make_embedder(kind: str = "bert", bert: EmbedderConfig | None = None, static: StaticEmbedderConfig | None = None):
    if kind == "bert":
        return BertEmbedder(bert or EmbedderConfig())
    if kind == "static":
        return StaticEmbedder(static or StaticEmbedderConfig())
    raise ValueError(f"unknown embedder kind {kind!r}")


def embedder_info(embedder) -> dict:
    kind = "bert" if isinstance(embedder, BertEmbedder) else "static"
    return {"kind": kind, "hash": embedder.config_hash(), "dim": embedder.dim}


def _dtype(model: Text2Motion):
    return next(model.parameters()).dtype


@torch.no_grad()
def encode_pose(model: Text2Motion, seq: MotionSequence, stats: NormalizationStats) -> LatentPair | np.ndarray:
    x = torch.as_tensor(stats.apply(seq.to_channels())[None], dtype=_dtype(model))
    z = model.pose_encoder(x)
    return _as_latent(model, z[0])


@torch.no_grad()
def encode_sentence(model: Text2Motion, emb: WordEmbeddingSequence | np.ndarray) -> LatentPair | np.ndarray:
    vecs = emb.vectors if isinstance(emb, WordEmbeddingSequence) else emb
    z = model.sentence_encoder(torch.as_tensor(vecs[None], dtype=_dtype(model)))
    return _as_latent(model, z[0])


def _as_latent(model, z):
    if model.cfg.two_stream:
        ub, lb = model.split_latent(z)
        return LatentPair(ub.numpy(), lb.numpy())
    return z.numpy()


@torch.no_grad()
def generate(
    model: Text2Motion,
    emb: WordEmbeddingSequence | np.ndarray,
    stats: NormalizationStats,
    T: int = 96,
    initial_pose: np.ndarray | None = None,
    fps: float = 12.5,
    n_joints: int = 21,
) -> MotionSequence:
    """Decode T frames from a sentence. initial_pose is a raw (unnormalized) channel vector;
    defaults to the training mean pose."""
    model.eval()
    dtype = _dtype(model)
    vecs = emb.vectors if isinstance(emb, WordEmbeddingSequence) else emb
    init = stats.mean if initial_pose is None else np.asarray(initial_pose, dtype=np.float64).reshape(-1)
    init_n = torch.as_tensor(stats.apply(init)[None], dtype=dtype)
    z_s = model.sentence_encoder(torch.as_tensor(vecs[None], dtype=dtype))
    out = model.decoder(z_s, init_n, T)[0].double().numpy()
    return MotionSequence.from_channels(stats.invert(out), fps, n_joints)


@torch.no_grad()
def predict(model: Text2Motion, samples: list[Sample], stats: NormalizationStats,
            embeddings: dict[str, np.ndarray], batch_size: int = 32):
    """Sentence-driven reconstructions of each sample, plus both latents.

    Returns (generated MotionSequences, z_s (N, 2h), z_p (N, 2h)).
    """
    from .training import TrainingSet

    model.eval()
    dtype = _dtype(model)
    data = TrainingSet(samples, stats, embeddings)
    gens, zs, zp = [None] * len(samples), [None] * len(samples), [None] * len(samples)
    for start in range(0, len(samples), batch_size):
        idx = list(range(start, min(start + batch_size, len(samples))))
        b = data.collate(idx, dtype)
        _, P_hat_s, z_p, z_s = model(b.motion, b.lengths, b.emb, b.emb_lengths)
        for k, i in enumerate(idx):
            L = int(b.lengths[k])
            chans = stats.invert(P_hat_s[k, :L].double().numpy())
            gens[i] = MotionSequence.from_channels(chans, samples[i].motion.fps, samples[i].motion.n_joints)
            zs[i], zp[i] = z_s[k].double().numpy(), z_p[k].double().numpy()
    return gens, np.stack(zs), np.stack(zp)


def report_from_motions(gen: list[MotionSequence], gt: list[MotionSequence], skeleton: Skeleton,
                        zs=None, zp=None, **kw) -> EvalReport:
    return build_report(
        [g.frames for g in gen], [g.frames for g in gt],
        [root_path(g, skeleton)[0] for g in gen], [root_path(g, skeleton)[0] for g in gt],
        skeleton, zs, zp, **kw,
    )


def evaluate(model: Text2Motion, samples: list[Sample], stats: NormalizationStats,
             embeddings: dict[str, np.ndarray], skeleton: Skeleton, **kw) -> EvalReport:
    """Generate from each sample's sentence and initial pose, score in millimetre space."""
    if not samples:
        raise ValueError("nothing to evaluate")
    width = next(iter(embeddings.values())).shape[1]
    if width != model.cfg.embed_dim:
        raise ValueError(f"model expects {model.cfg.embed_dim}-wide word features, embeddings are {width}")
    gens, zs, zp = predict(model, samples, stats, embeddings)
    return report_from_motions(gens, [s.motion for s in samples], skeleton, zs, zp, **kw)


def evaluate_ground_truth(samples: list[Sample], skeleton: Skeleton) -> EvalReport:
    """Score the ground truth against itself (sanity mode; all errors are zero)."""
    motions = [s.motion for s in samples]
    return report_from_motions(motions, motions, skeleton)
