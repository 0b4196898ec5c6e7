"""Skeleton definition, motion containers and the root-relative motion representation.

Joint positions are kept in millimetres. A motion is stored as root-relative
("local") joint positions plus three trajectory channels per frame: planar
root velocity in the character's facing frame and angular velocity about the
up axis.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

PART_ORDER = ("left_arm", "right_arm", "trunk", "left_leg", "right_leg")
TRAJ_DIM = 3
_AXES = {"x": 0, "y": 1, "z": 2}


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    name: str
    joint_names: tuple[str, ...]
    parents: tuple[int, ...]
    part_assignment: dict[int, str]
    up_axis: str = "z"
    facing: dict[str, str] = field(default_factory=dict)
    report_rows: dict[str, tuple[str, ...]] = field(default_factory=dict)
    version: int = 1

    def __post_init__(self):
        if len(self.joint_names) != 21:
            raise ConfigError(f"expected 21 joints, got {len(self.joint_names)}")
        if set(self.part_assignment) != set(range(len(self.joint_names))):
            raise ConfigError("every joint must belong to exactly one part")
        for part in PART_ORDER:
            if not self.part_indices(part):
                raise ConfigError(f"part {part!r} is empty")
        if set(self.part_assignment.values()) - set(PART_ORDER):
            raise ConfigError("unknown part name in assignment")

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def index(self, name: str) -> int:
        return self.joint_names.index(name)

    def part_indices(self, part: str) -> list[int]:
        return [j for j in range(len(self.joint_names)) if self.part_assignment[j] == part]

    @property
    def permutation(self) -> np.ndarray:
        """Joint order obtained by concatenating the parts in canonical order."""
        return np.array([j for p in PART_ORDER for j in self.part_indices(p)])

    @property
    def up_index(self) -> int:
        return _AXES[self.up_axis]

    @property
    def ground_indices(self) -> tuple[int, int]:
        a, b = (i for i in range(3) if i != self.up_index)
        return a, b

    def checksum(self) -> str:
        blob = json.dumps(
            [self.joint_names, self.parents, sorted(self.part_assignment.items()), self.up_axis],
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, cfg: dict) -> "Skeleton":
        names = tuple(cfg["joint_names"])
        assignment = {}
        for part, joints in cfg["parts"].items():
            for j in joints:
                idx = names.index(j)
                if idx in assignment:
                    raise ConfigError(f"joint {j!r} assigned to two parts")
                assignment[idx] = part
        return cls(
            name=cfg["name"],
            joint_names=names,
            parents=tuple(cfg["parents"]),
            part_assignment=assignment,
            up_axis=cfg.get("up_axis", "z"),
            facing=dict(cfg.get("facing", {})),
            report_rows={k: tuple(v) for k, v in cfg.get("report_rows", {}).items()},
            version=cfg.get("version", 1),
        )

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Skeleton":
        if path is None:
            text = resources.files("lang2motion.data").joinpath("kit21.json").read_text()
        else:
            text = Path(path).read_text()
        return cls.from_dict(json.loads(text))


def kit_skeleton() -> Skeleton:
    return Skeleton.load()


@dataclass
class MotionSequence:
    """Root-relative joint positions (T, J, 3) plus trajectory channels (T, 3)."""

    frames: np.ndarray
    trajectory: np.ndarray
    fps: float

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.trajectory = np.asarray(self.trajectory)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ShapeError(f"frames must be (T, J, 3), got {self.frames.shape}")
        if self.trajectory.shape != (self.frames.shape[0], TRAJ_DIM):
            raise ShapeError(
                f"trajectory must be ({self.frames.shape[0]}, {TRAJ_DIM}), got {self.trajectory.shape}"
            )
        if not (np.all(np.isfinite(self.frames)) and np.all(np.isfinite(self.trajectory))):
            raise ValueError("motion contains non-finite values")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]

    def to_channels(self) -> np.ndarray:
        """Flatten to (T, J*3 + 3): joint coordinates then trajectory."""
        T = len(self)
        return np.concatenate([self.frames.reshape(T, -1), self.trajectory], axis=1)

    @classmethod
    def from_channels(cls, channels: np.ndarray, fps: float, n_joints: int = 21) -> "MotionSequence":
        channels = np.asarray(channels)
        T = channels.shape[0]
        return cls(
            frames=channels[:, : n_joints * 3].reshape(T, n_joints, 3),
            trajectory=channels[:, n_joints * 3 :],
            fps=fps,
        )


@dataclass
class PartitionedPose:
    left_arm: np.ndarray
    right_arm: np.ndarray
    trunk: np.ndarray
    left_leg: np.ndarray
    right_leg: np.ndarray

    def parts(self) -> list[np.ndarray]:
        return [getattr(self, p) for p in PART_ORDER]


def partition_pose(pose: np.ndarray, skeleton: Skeleton) -> PartitionedPose:
    pose = np.asarray(pose)
    if pose.shape != (skeleton.joint_count, 3):
        raise ShapeError(f"pose must be ({skeleton.joint_count}, 3), got {pose.shape}")
    return PartitionedPose(**{p: pose[skeleton.part_indices(p)].reshape(-1) for p in PART_ORDER})


def unpartition_pose(parts: PartitionedPose, skeleton: Skeleton) -> np.ndarray:
    flat = np.concatenate(parts.parts()).reshape(-1, 3)
    pose = np.empty_like(flat)
    pose[skeleton.permutation] = flat
    return pose


def velocity(seq: MotionSequence | np.ndarray) -> np.ndarray:
    frames = seq.frames if isinstance(seq, MotionSequence) else np.asarray(seq)
    if frames.shape[0] < 2:
        raise ValueError("velocity needs at least 2 frames")
    return frames[1:] - frames[:-1]


def subsample(seq: MotionSequence, target_fps: float) -> MotionSequence:
    ratio = seq.fps / target_fps
    step = int(round(ratio))
    if step < 1 or abs(ratio - step) > 1e-9:
        raise ConfigError(f"fps {seq.fps} is not an integer multiple of {target_fps}")
    return MotionSequence(seq.frames[::step], seq.trajectory[::step], fps=target_fps)


def subsample_positions(positions: np.ndarray, fps: float, target_fps: float) -> np.ndarray:
    ratio = fps / target_fps
    step = int(round(ratio))
    if step < 1 or abs(ratio - step) > 1e-9:
        raise ConfigError(f"fps {fps} is not an integer multiple of {target_fps}")
    return np.asarray(positions)[::step]


# --- root-relative representation -------------------------------------------------


def _wrap(angle):
    return (angle + np.pi) % (2 * np.pi) - np.pi


def _rotate2d(vec: np.ndarray, angle) -> np.ndarray:
    """Rotate (..., 2) vectors counter-clockwise by angle (broadcast over leading dims)."""
    c, s = np.cos(angle), np.sin(angle)
    x, y = vec[..., 0], vec[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def facing_angles(positions: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """Heading of the character on the ground plane for every frame, in radians."""
    a, b = skeleton.ground_indices
    f = skeleton.facing
    across = (
        positions[:, skeleton.index(f["left_shoulder"])] - positions[:, skeleton.index(f["right_shoulder"])]
        + positions[:, skeleton.index(f["left_hip"])] - positions[:, skeleton.index(f["right_hip"])]
    )
    up = np.zeros(3)
    up[skeleton.up_index] = 1.0
    forward = np.cross(across, up)
    return np.arctan2(forward[:, b], forward[:, a])


def from_global(positions: np.ndarray, skeleton: Skeleton, fps: float) -> MotionSequence:
    """Convert global joint positions (T, J, 3) into the root-relative representation.

    Trajectory channel 0/1 hold the root displacement since the previous frame,
    expressed in the current facing frame; channel 2 the heading change. Frame 0
    has zero trajectory.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3 or positions.shape[1:] != (skeleton.joint_count, 3):
        raise ShapeError(f"positions must be (T, {skeleton.joint_count}, 3), got {positions.shape}")
    a, b = skeleton.ground_indices
    theta = facing_angles(positions, skeleton)
    root = positions[:, skeleton.index("root")]
    root_ground = root[:, [a, b]]

    rel = positions.copy()
    rel[..., a] -= root_ground[:, None, 0]
    rel[..., b] -= root_ground[:, None, 1]
    local = rel.copy()
    planar = _rotate2d(rel[..., [a, b]], -theta[:, None])
    local[..., a], local[..., b] = planar[..., 0], planar[..., 1]

    traj = np.zeros((positions.shape[0], TRAJ_DIM))
    if positions.shape[0] > 1:
        traj[1:, :2] = _rotate2d(np.diff(root_ground, axis=0), -theta[1:])
        traj[1:, 2] = _wrap(np.diff(theta))
    return MotionSequence(local, traj, fps=fps)


def root_path(seq: MotionSequence, skeleton: Skeleton) -> tuple[np.ndarray, np.ndarray]:
    """Integrate trajectory channels: ground-plane root positions (T, 2) and headings (T,).

    The path starts at the origin with heading zero.
    """
    theta = np.cumsum(seq.trajectory[:, 2])
    steps = _rotate2d(seq.trajectory[:, :2], theta)
    return np.cumsum(steps, axis=0), theta


def to_global(seq: MotionSequence, skeleton: Skeleton) -> np.ndarray:
    a, b = skeleton.ground_indices
    path, theta = root_path(seq, skeleton)
    out = np.array(seq.frames, dtype=np.float64, copy=True)
    planar = _rotate2d(out[..., [a, b]], theta[:, None])
    out[..., a] = planar[..., 0] + path[:, None, 0]
    out[..., b] = planar[..., 1] + path[:, None, 1]
    return out


# --- files -------------------------------------------------------------------------


def save_motion(path: str | Path, seq: MotionSequence, skeleton: Skeleton) -> None:
    """Write the canonical motion container (.npz, no pickled objects)."""
    np.savez(
        path,
        fps=np.float64(seq.fps),
        joint_names=np.array(skeleton.joint_names),
        frames=seq.frames,
        trajectory=seq.trajectory,
        skeleton=np.array(skeleton.name),
    )


def load_motion(path: str | Path) -> tuple[MotionSequence, list[str]]:
    with np.load(path, allow_pickle=False) as z:
        seq = MotionSequence(z["frames"], z["trajectory"], fps=float(z["fps"]))
        names = [str(n) for n in z["joint_names"]]
    return seq, names


def export_csv(path: str | Path, seq: MotionSequence, skeleton: Skeleton) -> None:
    """Plain-text animation: one row per frame of global joint positions in mm."""
    glob = to_global(seq, skeleton)
    header = ["frame", "time"] + [f"{n}_{ax}" for n in skeleton.joint_names for ax in "xyz"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, pose in enumerate(glob):
            w.writerow([t, f"{t / seq.fps:.4f}"] + [f"{v:.3f}" for v in pose.reshape(-1)])


def plot_trajectory(path: str | Path, seq: MotionSequence, skeleton: Skeleton, title: str | None = None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    glob = to_global(seq, skeleton)
    a, b = skeleton.ground_indices
    root = glob[:, skeleton.index("root")]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(root[:, a], root[:, b], color="tab:blue", lw=1.5)
    feet = [skeleton.index(n) for n in ("LF", "RF") if n in skeleton.joint_names]
    for j in feet:
        ax.scatter(glob[:, j, a], glob[:, j, b], s=4, color="black")
    ax.scatter(root[0, a], root[0, b], marker="x", s=80, color="tab:orange", label="start")
    ax.scatter(root[-1, a], root[-1, b], marker="x", s=80, color="tab:green", label="end")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel(f"{'xyz'[a]} (mm)")
    ax.set_ylabel(f"{'xyz'[b]} (mm)")
    if title:
        ax.set_title(title, fontsize=8)
    ax.legend(loc="best", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_stick_frames(path: str | Path, seq: MotionSequence, skeleton: Skeleton, n_frames: int = 8):
    """Render a strip of stick-figure frames (side view) into one image."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    glob = to_global(seq, skeleton)
    a, _ = skeleton.ground_indices
    u = skeleton.up_index
    idx = np.linspace(0, len(seq) - 1, num=min(n_frames, len(seq))).astype(int)
    fig, axes = plt.subplots(1, len(idx), figsize=(2 * len(idx), 3), squeeze=False)
    for ax, t in zip(axes[0], idx):
        pose = glob[t]
        for j, p in enumerate(skeleton.parents):
            if p >= 0:
                ax.plot([pose[j, a], pose[p, a]], [pose[j, u], pose[p, u]], color="k", lw=1)
        ax.set_title(f"t={t}", fontsize=7)
        ax.set_aspect("equal", adjustable="datalim")
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
