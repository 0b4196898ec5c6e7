"""Evaluation metrics: position error, variance error and the two latent encoding errors.

Sequence inputs are lists (one entry per test sample) of arrays shaped
(T, J, D); samples may differ in T but each generated/ground-truth pair must
match.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

TRAJECTORY_ROW = "Trajectory"
MEAN_ROWS = ("Mean w/o trajectory", "Mean")


def _check_pairs(gen, gt):
    if len(gen) != len(gt):
        raise ValueError(f"{len(gen)} generated vs {len(gt)} ground-truth sequences")
    for n, (a, b) in enumerate(zip(gen, gt)):
        if np.shape(a) != np.shape(b):
            raise ValueError(f"pair {n}: generated shape {np.shape(a)} != ground truth {np.shape(b)}")


def ape(gen: list[np.ndarray], gt: list[np.ndarray]) -> np.ndarray:
    """Per-joint mean Euclidean error over all frames of all samples, shape (J,)."""
    _check_pairs(gen, gt)
    total = sum(np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1).sum(axis=0) for a, b in zip(gen, gt))
    frames = sum(np.shape(a)[0] for a in gen)
    return total / frames


def joint_variance(seq: np.ndarray) -> np.ndarray:
    """Unbiased temporal variance per joint and coordinate, (T, J, D) -> (J, D)."""
    if seq.shape[0] < 2:
        raise ValueError("variance needs T >= 2")
    return np.var(seq, axis=0, ddof=1)


def ave(gen: list[np.ndarray], gt: list[np.ndarray]) -> np.ndarray:
    """Per-joint mean norm of the variance difference, shape (J,)."""
    _check_pairs(gen, gt)
    diffs = [
        np.linalg.norm(joint_variance(np.asarray(b)) - joint_variance(np.asarray(a)), axis=-1)
        for a, b in zip(gen, gt)
    ]
    return np.mean(diffs, axis=0)


def _check_latents(zs, zp):
    zs, zp = np.atleast_2d(np.asarray(zs, dtype=np.float64)), np.atleast_2d(np.asarray(zp, dtype=np.float64))
    if zs.shape != zp.shape:
        raise ValueError(f"latent width mismatch {zs.shape} vs {zp.shape}")
    return zs, zp


def cee(zs, zp, mode: str = "elementwise") -> float:
    """Content encoding error between sentence latents zs and pose latents zp, both (N, M).

    "elementwise": sum of absolute differences / (M N).
    "euclidean": sum over samples of the per-sample Euclidean distance / (M N).
    """
    zs, zp = _check_latents(zs, zp)
    N, M = zs.shape
    d = zs - zp
    if mode == "elementwise":
        return float(np.abs(d).sum() / (M * N))
    if mode == "euclidean":
        return float(np.linalg.norm(d, axis=1).sum() / (M * N))
    raise ValueError(f"unknown CEE mode {mode!r}")


def see(zs, zp, norm: str = "mn") -> float:
    """Style encoding error: Frobenius distance of per-sample Gram (outer-product) matrices.

    norm "mn" divides the summed distances by M N, "m2n" by M^2 N.
    """
    zs, zp = _check_latents(zs, zp)
    N, M = zs.shape
    total = 0.0
    for a, b in zip(zs, zp):
        total += np.linalg.norm(np.outer(a, a) - np.outer(b, b))
    denom = {"mn": M * N, "m2n": M * M * N}.get(norm)
    if denom is None:
        raise ValueError(f"unknown SEE normalisation {norm!r}")
    return float(total / denom)


# --- report -------------------------------------------------------------------------


@dataclass
class EvalReport:
    joint_names: list[str]
    ape_per_joint: list[float]
    ave_per_joint: list[float]
    rows: dict[str, dict[str, float]]  # row label -> {"APE": .., "AVE": ..}, in report order
    ape_mean: float
    ape_mean_without_trajectory: float
    ave_mean: float
    ave_mean_without_trajectory: float
    cee: float | None
    see: float | None
    N: int
    settings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def table_rows(self) -> list[tuple[str, float, float]]:
        out = [(label, v["APE"], v["AVE"]) for label, v in self.rows.items()]
        out.append((MEAN_ROWS[0], self.ape_mean_without_trajectory, self.ave_mean_without_trajectory))
        out.append((MEAN_ROWS[1], self.ape_mean, self.ave_mean))
        return out

    def to_table(self) -> str:
        lines = [f"{'':<22}{'APE (mm)':>12}{'AVE':>12}"]
        for label, a, v in self.table_rows():
            lines.append(f"{label:<22}{a:>12.4f}{v:>12.4f}")
        for name, val in (("CEE", self.cee), ("SEE", self.see)):
            lines.append(f"{name:<22}{'-' if val is None else f'{val:.6f}':>12}")
        lines.append(f"{'N':<22}{self.N:>12d}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse_table(text: str) -> dict[str, tuple[float, float]]:
        out = {}
        for line in text.splitlines()[1:]:
            label, rest = line[:22].strip(), line[22:].split()
            if len(rest) == 2:
                out[label] = (float(rest[0]), float(rest[1]))
        return out


def aggregate_rows(row_values: dict[str, float]) -> tuple[float, float]:
    """Table means: over all rows, and over all rows except the trajectory row."""
    vals = list(row_values.values())
    without = [v for k, v in row_values.items() if k != TRAJECTORY_ROW]
    return float(np.mean(vals)), float(np.mean(without))


def build_report(
    gen_local: list[np.ndarray],
    gt_local: list[np.ndarray],
    gen_path: list[np.ndarray],
    gt_path: list[np.ndarray],
    skeleton,
    zs=None,
    zp=None,
    cee_mode: str = "elementwise",
    see_norm: str = "mn",
) -> EvalReport:
    """Assemble the per-joint and per-row tables.

    gen_local/gt_local are root-relative joint positions (T, J, 3) in mm;
    gen_path/gt_path are integrated ground-plane root paths (T, 2) in mm.
    """
    ape_j, ave_j = ape(gen_local, gt_local), ave(gen_local, gt_local)
    paths = [np.asarray(p)[:, None, :] for p in gen_path], [np.asarray(p)[:, None, :] for p in gt_path]
    rows = {TRAJECTORY_ROW: {"APE": float(ape(*paths)[0]), "AVE": float(ave(*paths)[0])}}
    for label, joints in skeleton.report_rows.items():
        idx = [skeleton.index(j) for j in joints]
        rows[label] = {"APE": float(ape_j[idx].mean()), "AVE": float(ave_j[idx].mean())}
    ape_mean, ape_wo = aggregate_rows({k: v["APE"] for k, v in rows.items()})
    ave_mean, ave_wo = aggregate_rows({k: v["AVE"] for k, v in rows.items()})
    c = s = None
    if zs is not None and zp is not None:
        c, s = cee(zs, zp, cee_mode), see(zs, zp, see_norm)
    return EvalReport(
        list(skeleton.joint_names), ape_j.tolist(), ave_j.tolist(), rows,
        ape_mean, ape_wo, ave_mean, ave_wo, c, s, len(gen_local),
        settings={"cee_mode": cee_mode, "see_norm": see_norm},
    )


def plot_report(report: EvalReport, out_prefix: str) -> list[str]:
    """Bar plots: per-row APE, per-row AVE, and CEE/SEE."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [r[0] for r in report.table_rows()]
    paths = []
    for col, name in ((1, "ape"), (2, "ave")):
        vals = [r[col] for r in report.table_rows()]
        fig, ax = plt.subplots(figsize=(7, 3.5))
        ax.bar(range(len(vals)), vals, color="#1f3b73")
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel(f"{name.upper()}{' (mm)' if name == 'ape' else ''}")
        fig.tight_layout()
        p = f"{out_prefix}_{name}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    if report.cee is not None:
        fig, ax = plt.subplots(figsize=(3, 3.5))
        ax.bar([0, 1], [report.cee, report.see], color="#1f3b73")
        ax.set_xticks([0, 1])
        ax.set_xticklabels(["CEE", "SEE"])
        fig.tight_layout()
        p = f"{out_prefix}_cee_see.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    return paths
