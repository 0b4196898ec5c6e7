"""Two-stream hierarchical pose autoencoder, sentence encoder and pose discriminator.

All modules work on normalized per-frame channel vectors: 21 x 3 joint
coordinates followed by the 3 trajectory channels. Trajectory channels travel
with the trunk.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
from torch import nn

from .skeleton import PART_ORDER, TRAJ_DIM, Skeleton, kit_skeleton

LIMBS = ("left_arm", "right_arm", "left_leg", "right_leg")


@dataclass
class ModelConfig:
    part_channels: dict[str, list[int]]
    n_channels: int = 66
    h1: int = 32
    h2: int = 128
    h: int = 512
    embed_dim: int = 4096
    two_stream: bool = True
    disc_hidden: int = 64
    disc_layers: int = 3
    disc_kernel: int = 5
    streams: dict[str, tuple[str, ...]] = field(init=False)

    def __post_init__(self):
        if self.two_stream:
            self.streams = {"ub": ("left_arm", "right_arm"), "lb": ("left_leg", "right_leg")}
        else:
            self.streams = {"body": LIMBS}
        seen = sorted(c for p in PART_ORDER for c in self.part_channels[p])
        if seen != list(range(self.n_channels)):
            raise ValueError("part channels must cover every channel exactly once")

    @property
    def latent_dim(self) -> int:
        """Width of the full latent (both streams concatenated)."""
        return 2 * self.h

    def stream_width(self) -> int:
        return self.latent_dim // len(self.streams)

    @classmethod
    def from_skeleton(cls, skeleton: Skeleton | None = None, **kw) -> "ModelConfig":
        skeleton = skeleton or kit_skeleton()
        J = skeleton.joint_count
        parts = {}
        for p in PART_ORDER:
            chans = [3 * j + k for j in skeleton.part_indices(p) for k in range(3)]
            if p == "trunk":
                chans += list(range(3 * J, 3 * J + TRAJ_DIM))
            parts[p] = chans
        return cls(part_channels=parts, n_channels=3 * J + TRAJ_DIM, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("streams")
        return d

    def manifest(self) -> dict:
        return {
            **self.to_dict(),
            "streams": {k: list(v) for k, v in self.streams.items()},
            "latent_layout": {k: self.stream_width() for k in self.streams},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["part_channels"] = {k: list(v) for k, v in d["part_channels"].items()}
        return cls(**d)


class LatentPair(NamedTuple):
    z_ub: torch.Tensor
    z_lb: torch.Tensor


def _gather_last(out: torch.Tensor, lengths: torch.Tensor | None) -> torch.Tensor:
    if lengths is None:
        return out[:, -1]
    idx = (lengths.to(out.device).long() - 1).clamp(min=0)
    return out[torch.arange(out.shape[0], device=out.device), idx]


class PartHierarchy(nn.Module):
    """Per-frame parts -> limb/trunk pair features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        for p in PART_ORDER:
            self.register_buffer(f"idx_{p}", torch.tensor(cfg.part_channels[p]), persistent=False)
        self.part = nn.ModuleDict({p: nn.Linear(len(cfg.part_channels[p]), cfg.h1) for p in PART_ORDER})
        self.pair = nn.ModuleDict({limb: nn.Linear(2 * cfg.h1, cfg.h2) for limb in LIMBS})
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        feats = {p: self.act(self.part[p](x[..., getattr(self, f"idx_{p}")])) for p in PART_ORDER}
        trunk = feats["trunk"]
        return {limb: self.act(self.pair[limb](torch.cat([feats[limb], trunk], dim=-1))) for limb in LIMBS}


class PoseEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.hier = PartHierarchy(cfg)
        w = cfg.stream_width()
        self.rnn = nn.ModuleDict(
            {s: nn.GRU(len(limbs) * cfg.h2, w, batch_first=True) for s, limbs in cfg.streams.items()}
        )

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B, T, C) -> latent (B, 2h), streams concatenated in config order."""
        if x.shape[-1] != self.cfg.n_channels:
            raise ValueError(f"expected {self.cfg.n_channels} channels, got {x.shape[-1]}")
        pairs = self.hier(x)
        outs = []
        for s, limbs in self.cfg.streams.items():
            seq, _ = self.rnn[s](torch.cat([pairs[limb] for limb in limbs], dim=-1))
            outs.append(_gather_last(seq, lengths))
        return torch.cat(outs, dim=-1)


class SentenceEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.lstm = nn.LSTM(cfg.embed_dim, cfg.latent_dim, num_layers=2, batch_first=True)

    def forward(self, emb: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if emb.shape[-1] != self.cfg.embed_dim:
            raise ValueError(f"expected word features of width {self.cfg.embed_dim}, got {emb.shape[-1]}")
        out, _ = self.lstm(emb)
        return _gather_last(out, lengths)


class PoseDecoder(nn.Module):
    """Recurrent residual decoder: pose_{t+1} = pose_t + delta(pose_t, state_t)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.stream_width()
        self.hier = PartHierarchy(cfg)
        self.init_state = nn.ModuleDict({s: nn.Linear(w, w) for s in cfg.streams})
        self.cell = nn.ModuleDict({s: nn.GRUCell(len(l) * cfg.h2, w) for s, l in cfg.streams.items()})
        self.to_pairs = nn.ModuleDict({s: nn.Linear(w, len(l) * cfg.h2) for s, l in cfg.streams.items()})
        self.unpair = nn.ModuleDict({limb: nn.Linear(cfg.h2, 2 * cfg.h1) for limb in LIMBS})
        # Output heads producing per-part deltas; zeroing them makes the decoder the identity.
        self.delta = nn.ModuleDict(
            {limb: nn.Linear(cfg.h1, len(cfg.part_channels[limb])) for limb in LIMBS}
            | {f"trunk_{limb}": nn.Linear(cfg.h1, len(cfg.part_channels["trunk"])) for limb in LIMBS}
        )
        self.act = nn.SiLU()
        order = [c for p in PART_ORDER for c in cfg.part_channels[p]]
        inv = torch.empty(len(order), dtype=torch.long)
        inv[torch.tensor(order)] = torch.arange(len(order))
        self.register_buffer("inv_order", inv, persistent=False)

    def initial_state(self, z: torch.Tensor) -> dict[str, torch.Tensor]:
        chunks = torch.split(z, self.cfg.stream_width(), dim=-1)
        return {s: torch.tanh(self.init_state[s](c)) for s, c in zip(self.cfg.streams, chunks)}

    def step(self, pose: torch.Tensor, state: dict[str, torch.Tensor]):
        pairs = self.hier(pose)
        feats, new_state = {}, {}
        for s, limbs in self.cfg.streams.items():
            new_state[s] = self.cell[s](torch.cat([pairs[limb] for limb in limbs], dim=-1), state[s])
            for limb, f in zip(limbs, torch.split(self.act(self.to_pairs[s](new_state[s])), self.cfg.h2, -1)):
                feats[limb] = f
        out, trunk = {}, []
        for limb in LIMBS:
            limb_f, trunk_f = torch.split(self.act(self.unpair[limb](feats[limb])), self.cfg.h1, dim=-1)
            out[limb] = self.delta[limb](limb_f)
            trunk.append(self.delta[f"trunk_{limb}"](trunk_f))
        # Each stream averages its two trunk estimates; the streams are then averaged.
        out["trunk"] = torch.stack(trunk).mean(dim=0)
        delta = torch.cat([out[p] for p in PART_ORDER], dim=-1)[..., self.inv_order]
        return pose + delta, new_state

    def forward(self, z: torch.Tensor, initial_pose: torch.Tensor, T: int) -> torch.Tensor:
        """(B, T, C) sequence pose_0 .. pose_{T-1}; pose_0 is initial_pose, the rest are residual steps,
        so frame t lines up with ground-truth frame t."""
        if T < 1:
            raise ValueError("T must be >= 1")
        state = self.initial_state(z)
        pose, frames = initial_pose, [initial_pose]
        for _ in range(T - 1):
            pose, state = self.step(pose, state)
            frames.append(pose)
        return torch.stack(frames, dim=1)

    def zero_delta_(self) -> None:
        with torch.no_grad():
            for layer in self.delta.values():
                layer.weight.zero_()
                layer.bias.zero_()


class Discriminator(nn.Module):
    """Temporal convolutions, masked mean pooling over frames, sigmoid head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        k = cfg.disc_kernel
        chans = [cfg.n_channels] + [cfg.disc_hidden] * cfg.disc_layers
        self.convs = nn.ModuleList(nn.Conv1d(a, b, k, padding=k // 2) for a, b in zip(chans[:-1], chans[1:]))
        self.head = nn.Linear(cfg.disc_hidden, 1)
        self.act = nn.SiLU()

    def logits(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if mask is None:
            mask = torch.ones(x.shape[:2], dtype=x.dtype, device=x.device)
        m = mask.to(x.dtype).unsqueeze(1)
        h = x.transpose(1, 2) * m
        for conv in self.convs:
            h = self.act(conv(h)) * m
        pooled = h.sum(dim=-1) / m.sum(dim=-1).clamp(min=1.0)
        return self.head(pooled).squeeze(-1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return torch.sigmoid(self.logits(x, mask))


class Text2Motion(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.pose_encoder = PoseEncoder(cfg)
        self.sentence_encoder = SentenceEncoder(cfg)
        self.decoder = PoseDecoder(cfg)
        self.discriminator = Discriminator(cfg)

    def generator_parameters(self):
        for m in (self.pose_encoder, self.sentence_encoder, self.decoder):
            yield from m.parameters()

    def split_latent(self, z: torch.Tensor) -> list[torch.Tensor]:
        return list(torch.split(z, self.cfg.stream_width(), dim=-1))

    def latent_pair(self, z: torch.Tensor) -> LatentPair:
        if not self.cfg.two_stream:
            raise ValueError("single-stream model has no upper/lower latent split")
        ub, lb = self.split_latent(z)
        return LatentPair(ub, lb)

    def forward(self, motion, lengths, emb, emb_lengths):
        """Returns (P_hat_p, P_hat_s, z_p, z_s); both decodes share the decoder weights."""
        z_p = self.pose_encoder(motion, lengths)
        z_s = self.sentence_encoder(emb, emb_lengths)
        T = motion.shape[1]
        initial = motion[:, 0]
        return self.decoder(z_p, initial, T), self.decoder(z_s, initial, T), z_p, z_s


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Fan-in uniform linear/conv weights, orthogonal recurrent kernels, zero recurrent biases."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            bound = 1.0 / math.sqrt(m.weight[0].numel())
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, (nn.GRU, nn.LSTM, nn.GRUCell)):
            for name, p in m.named_parameters():
                with torch.no_grad():
                    if "weight_hh" in name:
                        for block in torch.split(p, m.hidden_size, dim=0):
                            block.copy_(_orthogonal(block.shape, generator, p.dtype))
                    elif "weight_ih" in name:
                        bound = 1.0 / math.sqrt(p.shape[1])
                        p.uniform_(-bound, bound, generator=generator)
                    else:
                        p.zero_()


def _orthogonal(shape, generator, dtype) -> torch.Tensor:
    a = torch.randn(shape, generator=generator, dtype=torch.float64)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r)).unsqueeze(0)
    return q.to(dtype)


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> Text2Motion:
    model = Text2Motion(cfg)
    init_weights(model, torch.Generator().manual_seed(seed))
    return model.to(dtype)
