"""Pose-error metrics: MPJPE, Procrustes-aligned MPJPE, PCK, AUC and the
per-PDoF breakdown. Inputs are (F, N, 3) arrays in millimetres."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .skeleton import SkeletonSpec

PCK_THRESHOLD_MM = 150.0
AUC_THRESHOLDS_MM = np.arange(0.0, 151.0, 5.0)  # 0, 5, ..., 150 (31 values)


class AlignmentError(ValueError):
    """Procrustes alignment is undefined for a degenerate point set."""


def _check(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.shape[-1] != 3:
        raise ValueError(f"expected (..., N, 3) poses, got {pred.shape}")
    return pred, gt


def joint_errors(pred, gt) -> np.ndarray:
    pred, gt = _check(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred, gt) -> float:
    return float(joint_errors(pred, gt).mean())


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Best similarity transform s*R*pred + t of one (N, 3) pose onto ``gt``.

    Reflections are excluded (det R = +1).
    """
    pred, gt = _check(pred, gt)
    if pred.ndim != 2 or pred.shape[0] < 3:
        raise AlignmentError(f"need a single (N>=3, 3) pose, got {pred.shape}")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    x, y = pred - mu_p, gt - mu_g
    for name, pts in (("pred", x), ("gt", y)):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[1] <= 1e-9 * max(sv[0], 1.0):
            raise AlignmentError(f"{name} point set has rank < 2")
    u, s, vt = np.linalg.svd(x.T @ y)
    d = np.ones(3)
    d[-1] = np.sign(np.linalg.det(u @ vt)) or 1.0
    rot = (u * d) @ vt  # maps row vectors: x @ rot ~ y
    scale = (s * d).sum() / (x * x).sum()
    return scale * x @ rot + mu_g


def p_mpjpe(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    pred = pred.reshape(-1, *pred.shape[-2:])
    gt = gt.reshape(-1, *gt.shape[-2:])
    aligned = np.stack([procrustes_align(p, g) for p, g in zip(pred, gt)])
    return mpjpe(aligned, gt)


def pck(pred, gt, threshold_mm: float = PCK_THRESHOLD_MM) -> float:
    return float((joint_errors(pred, gt) <= threshold_mm).mean() * 100.0)


def pck_curve(pred, gt, thresholds=AUC_THRESHOLDS_MM) -> np.ndarray:
    err = joint_errors(pred, gt)
    return np.array([(err <= t).mean() * 100.0 for t in thresholds])


def auc(pred, gt) -> float:
    return float(pck_curve(pred, gt).mean())


def pdof_breakdown(pred, gt, spec: SkeletonSpec) -> dict[int, float]:
    """Mean error over all (frame, joint) pairs of each PDoF class."""
    err = joint_errors(pred, gt).reshape(-1, spec.joint_count)
    pdof = np.asarray(spec.pdof)
    return {k: float(err[:, pdof == k].mean()) for k in range(4) if np.any(pdof == k)}


@dataclass
class MetricsReport:
    mpjpe: float
    p_mpjpe: float
    pck: float
    auc: float
    per_pdof_mpjpe: dict[int, float]
    per_joint_mpjpe: list[float]
    frames: int = 0

    CSV_HEADER = "frames,mpjpe,p_mpjpe,pck,auc,pdof0,pdof1,pdof2,pdof3"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_pdof_mpjpe"] = {str(k): v for k, v in self.per_pdof_mpjpe.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["per_pdof_mpjpe"] = {int(k): v for k, v in d["per_pdof_mpjpe"].items()}
        return cls(**d)

    def to_csv_row(self) -> str:
        pd = [self.per_pdof_mpjpe.get(k, float("nan")) for k in range(4)]
        vals = [self.mpjpe, self.p_mpjpe, self.pck, self.auc, *pd]
        return ",".join([str(self.frames)] + [f"{v:.6f}" for v in vals])


def evaluate(pred, gt, spec: SkeletonSpec) -> MetricsReport:
    pred, gt = _check(pred, gt)
    if pred.shape[0] == 0:
        raise ValueError("cannot evaluate an empty set")
    err = joint_errors(pred, gt)
    return MetricsReport(
        mpjpe=float(err.mean()),
        p_mpjpe=p_mpjpe(pred, gt),
        pck=pck(pred, gt),
        auc=auc(pred, gt),
        per_pdof_mpjpe=pdof_breakdown(pred, gt, spec),
        per_joint_mpjpe=err.mean(axis=0).tolist(),
        frames=int(pred.shape[0]),
    )
