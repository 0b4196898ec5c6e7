"""Synthetic stand-in corpus in the KIT file layout.

The real corpus is licence-gated; this writes small procedurally animated
21-joint recordings (walking, turning, waving, kicking, jumping, standing) with
matching sentences so the pipeline and CLI can be exercised end to end.

    python -m lang2motion.toy OUT_DIR [--motions N] [--seed S]
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from .skeleton import kit_skeleton

# Standing pose, mm, z up, facing +y, character's left on -x.
TEMPLATE = {
    "root": (0, 0, 950), "BP": (0, 0, 1030), "BT": (0, 0, 1230), "BLN": (0, 0, 1420), "BUN": (0, 0, 1600),
    "LS": (-180, 0, 1400), "LE": (-200, 0, 1120), "LW": (-210, 0, 870),
    "RS": (180, 0, 1400), "RE": (200, 0, 1120), "RW": (210, 0, 870),
    "LH": (-90, 0, 930), "LK": (-90, 0, 520), "LA": (-90, 0, 90), "LMrot": (-90, 90, 30), "LF": (-90, 170, 20),
    "RH": (90, 0, 930), "RK": (90, 0, 520), "RA": (90, 0, 90), "RMrot": (90, 90, 30), "RF": (90, 170, 20),
}

KINDS = {
    "walk": ["a person walks forward", "someone walks forwards slowly", "a human walks straight ahead"],
    "turn": ["a person walks in a circle", "a person turns around while walking"],
    "wave": ["a person waves with the right hand", "someone is waving his right arm"],
    "kick": ["a person kicks with the left foot", "a human kicks forward with his left leg"],
    "jump": ["a person jumps up", "someone jumps in place"],
    "stand": ["a person stands still", "a human is standing"],
}


def _swing(pos, pivot, angle, axis="x"):
    """Rotate points about a horizontal axis through pivot (pitch around x, roll around y)."""
    rel = pos - pivot
    c, s = np.cos(angle), np.sin(angle)
    out = rel.copy()
    if axis == "x":
        out[..., 1] = c * rel[..., 1] - s * rel[..., 2]
        out[..., 2] = s * rel[..., 1] + c * rel[..., 2]
    else:
        out[..., 0] = c * rel[..., 0] - s * rel[..., 2]
        out[..., 2] = s * rel[..., 0] + c * rel[..., 2]
    return out + pivot


def animate(kind: str, T: int, fps: float = 100.0, rng: np.random.Generator | None = None) -> np.ndarray:
    rng = rng or np.random.default_rng(0)
    sk = kit_skeleton()
    base = np.array([TEMPLATE[n] for n in sk.joint_names], dtype=np.float64)
    idx = {n: i for i, n in enumerate(sk.joint_names)}
    t = np.arange(T) / fps
    freq = rng.uniform(0.8, 1.2)
    phase = 2 * np.pi * freq * t
    frames = np.repeat(base[None], T, axis=0)

    def limb(names, pivot_name, angles, axis="x"):
        ids = [idx[n] for n in names]
        pivot = frames[:, idx[pivot_name]][:, None, :]
        frames[:, ids] = _swing(frames[:, ids], pivot, angles[:, None], axis)

    speed, yaw_rate, lift = 0.0, 0.0, np.zeros(T)
    if kind in ("walk", "turn"):
        amp = rng.uniform(0.35, 0.5)
        limb(["LK", "LA", "LMrot", "LF"], "LH", amp * np.sin(phase))
        limb(["RK", "RA", "RMrot", "RF"], "RH", -amp * np.sin(phase))
        limb(["LE", "LW"], "LS", -0.6 * amp * np.sin(phase))
        limb(["RE", "RW"], "RS", 0.6 * amp * np.sin(phase))
        speed = rng.uniform(900, 1300)
        lift = 20 * np.abs(np.sin(phase))
        yaw_rate = rng.uniform(0.6, 1.0) * rng.choice([-1, 1]) if kind == "turn" else 0.0
    elif kind == "wave":
        limb(["RE", "RW"], "RS", np.full(T, 0.0) + 2.6, axis="y")
        limb(["RW"], "RE", 0.5 * np.sin(2 * phase), axis="y")
    elif kind == "kick":
        k = np.clip(np.sin(np.pi * t / t[-1]), 0, None) ** 2
        limb(["LK", "LA", "LMrot", "LF"], "LH", -1.2 * k)
        limb(["LE", "LW"], "LS", 0.5 * k)
    elif kind == "jump":
        lift = 250 * np.clip(np.sin(2 * phase), 0, None)
        limb(["LE", "LW"], "LS", -0.8 * np.clip(np.sin(2 * phase), 0, None))
        limb(["RE", "RW"], "RS", -0.8 * np.clip(np.sin(2 * phase), 0, None))
    elif kind == "stand":
        frames[:, :, 2] += 5 * np.sin(0.5 * phase)[:, None]
    frames[:, :, 2] += lift[:, None]

    heading = rng.uniform(-np.pi, np.pi) + yaw_rate * t
    path = np.zeros((T, 2))
    if speed:
        vel = speed / fps * np.stack([-np.sin(heading), np.cos(heading)], axis=1)
        path = np.cumsum(vel, axis=0) - vel[0]
    c, s = np.cos(heading), np.sin(heading)
    x, y = frames[..., 0].copy(), frames[..., 1].copy()
    frames[..., 0] = c[:, None] * x - s[:, None] * y + path[:, None, 0]
    frames[..., 1] = s[:, None] * x + c[:, None] * y + path[:, None, 1]
    frames += rng.normal(scale=0.5, size=frames.shape)
    return frames


def write_toy_corpus(root, n_motions: int = 24, seed: int = 0, fps: float = 100.0,
                     frames: tuple[int, int] = (200, 400)) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    kinds = list(KINDS)
    for i in range(n_motions):
        kind = kinds[i % len(kinds)]
        T = int(rng.integers(frames[0], frames[1] + 1))
        pos = animate(kind, T, fps, rng)
        mid = f"{i + 1:05d}"
        np.save(root / f"{mid}_positions.npy", pos.astype(np.float64))
        n_ann = int(rng.integers(1, 3))
        sentences = list(rng.choice(KINDS[kind], size=n_ann, replace=False))
        (root / f"{mid}_annotations.json").write_text(json.dumps([str(s) for s in sentences]))
        (root / f"{mid}_meta.json").write_text(json.dumps({"fps": fps, "kind": kind}))
    return root


def write_toy_word_table(path, dim: int = 300, seed: int = 0) -> Path:
    """A word2vec-format text table covering the toy vocabulary."""
    rng = np.random.default_rng(seed)
    vocab = sorted({w.lower() for ss in KINDS.values() for s in ss for w in s.split()})
    with open(path, "w") as fh:
        fh.write(f"{len(vocab)} {dim}\n")
        for w in vocab:
            fh.write(w + " " + " ".join(f"{v:.6f}" for v in rng.normal(scale=0.5, size=dim)) + "\n")
    return Path(path)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--motions", type=int, default=24)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--word-table", help="also write a static word table to this path")
    args = ap.parse_args(argv)
    write_toy_corpus(args.out, args.motions, args.seed)
    if args.word_table:
        write_toy_word_table(args.word_table)


if __name__ == "__main__":
    main()
