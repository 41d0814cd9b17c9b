"""Human-body topology: joints, bones, PDoF labels and limb groups.

A joint's PDoF (part degree of freedom) is its hop distance from the torso
along its limb chain: torso joints are 0, hips/shoulders 1, knees/elbows 2,
ankles/wrists 3.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


class SkeletonError(ValueError):
    """Raised when a skeleton definition violates a topology invariant."""


H36M17_NAMES = (
    "hip", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)
H36M17_PARENTS = (0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
H36M17_PDOF = (0, 1, 2, 3, 1, 2, 3, 0, 0, 0, 0, 1, 2, 3, 1, 2, 3)
# (1-PDoF, 2-PDoF, 3-PDoF) per limb, ordered R-leg, L-leg, L-arm, R-arm.
H36M17_LIMBS = ((1, 2, 3), (4, 5, 6), (11, 12, 13), (14, 15, 16))


@dataclass(frozen=True)
class SkeletonSpec:
    """Validated tree skeleton with PDoF labels and four ordered limbs.

    Construction raises :class:`SkeletonError` if any invariant fails, so an
    existing instance is always usable by the model.
    """

    joint_names: tuple[str, ...]
    parent: tuple[int, ...]
    pdof: tuple[int, ...]
    limbs: tuple[tuple[int, int, int], ...]
    root_index: int = 0
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))
        object.__setattr__(self, "pdof", tuple(int(p) for p in self.pdof))
        object.__setattr__(
            self, "limbs", tuple(tuple(int(j) for j in limb) for limb in self.limbs)
        )
        self._validate()

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    @property
    def edges(self) -> tuple[tuple[int, int], ...]:
        """Undirected bones as (parent, child) pairs, in child index order."""
        return tuple(
            (p, j) for j, p in enumerate(self.parent) if j != self.root_index
        )

    def _validate(self) -> None:
        n = self.joint_count
        if n == 0:
            raise SkeletonError("skeleton has no joints")
        if len(self.parent) != n or len(self.pdof) != n:
            raise SkeletonError(
                f"parent ({len(self.parent)}) and pdof ({len(self.pdof)}) "
                f"must both have {n} entries"
            )
        if not 0 <= self.root_index < n:
            raise SkeletonError(f"root_index {self.root_index} out of range")
        if self.parent[self.root_index] != self.root_index:
            raise SkeletonError("root's parent must be itself")
        for j, p in enumerate(self.parent):
            if not 0 <= p < n:
                raise SkeletonError(f"joint {j} has out-of-range parent {p}")
            if j != self.root_index and p == j:
                raise SkeletonError(f"joint {j} is a second root")
        # every chain must reach the root within n hops (no cycles)
        for j in range(n):
            k, hops = j, 0
            while k != self.root_index:
                k = self.parent[k]
                hops += 1
                if hops > n:
                    raise SkeletonError(f"joint {j} is on a cycle")

        if any(p not in (0, 1, 2, 3) for p in self.pdof):
            raise SkeletonError("pdof labels must be in {0, 1, 2, 3}")
        if len(self.limbs) != 4:
            raise SkeletonError(f"expected exactly 4 limbs, got {len(self.limbs)}")
        seen: set[int] = set()
        for li, limb in enumerate(self.limbs):
            if len(limb) != 3:
                raise SkeletonError(f"limb {li} must list 3 joints")
            for j in limb:
                if not 0 <= j < n:
                    raise SkeletonError(f"limb {li} references joint {j}")
                if j in seen:
                    raise SkeletonError(f"joint {j} appears in two limbs")
                seen.add(j)
            if tuple(self.pdof[j] for j in limb) != (1, 2, 3):
                raise SkeletonError(f"limb {li} joints must have pdof (1, 2, 3)")
            j1, j2, j3 = limb
            if self.parent[j3] != j2 or self.parent[j2] != j1:
                raise SkeletonError(
                    f"limb {li} is not a parent chain {j1} -> {j2} -> {j3}"
                )
        counts = [self.pdof.count(k) for k in range(4)]
        if counts[1:] != [4, 4, 4] or counts[0] != n - 12:
            raise SkeletonError(f"pdof counts {counts} do not match 4 limbs")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "joint_names": list(self.joint_names),
            "parent": list(self.parent),
            "pdof": list(self.pdof),
            "limbs": [list(limb) for limb in self.limbs],
            "root_index": self.root_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonSpec":
        try:
            return cls(
                joint_names=d["joint_names"],
                parent=d["parent"],
                pdof=d["pdof"],
                limbs=d["limbs"],
                root_index=d.get("root_index", 0),
                name=d.get("name", "custom"),
            )
        except (KeyError, TypeError) as exc:
            raise SkeletonError(f"malformed skeleton document: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SkeletonSpec":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SkeletonError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(doc)


def build_h36m17() -> SkeletonSpec:
    """The standard 17-joint Human3.6M-style skeleton."""
    return SkeletonSpec(
        joint_names=H36M17_NAMES,
        parent=H36M17_PARENTS,
        pdof=H36M17_PDOF,
        limbs=H36M17_LIMBS,
        root_index=0,
        name="h36m17",
    )


SKELETONS = {"h36m17": build_h36m17}


def get_skeleton(name: str) -> SkeletonSpec:
    if name not in SKELETONS:
        raise SkeletonError(f"unknown skeleton {name!r}; known: {sorted(SKELETONS)}")
    return SKELETONS[name]()


def normalize_adjacency(edges: Sequence[tuple[int, int]], n: int) -> np.ndarray:
    """Symmetric normalization D^-1/2 (A + I) D^-1/2 of an undirected graph."""
    a = np.eye(n)
    for i, j in edges:
        if not (0 <= i < n and 0 <= j < n):
            raise SkeletonError(f"edge ({i}, {j}) out of range for {n} joints")
        a[i, j] = a[j, i] = 1.0
    d_inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return a * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def normalized_adjacency(spec: SkeletonSpec) -> np.ndarray:
    return normalize_adjacency(spec.edges, spec.joint_count)


@dataclass(frozen=True)
class LimbLayout:
    """Index plan for the part-level block.

    ``group1`` gathers (2-PDoF, 3-PDoF) joints limb by limb (8 rows) and
    ``group2`` gathers (1, 2, 3)-PDoF joints limb by limb (12 rows).
    ``dst1``/``src1`` scatter limb feature ``src1[k]`` onto joint ``dst1[k]``;
    likewise ``dst2``/``src2``.
    """

    joint_count: int
    group1: tuple[int, ...]
    group2: tuple[int, ...]
    dst1: tuple[int, ...]
    src1: tuple[int, ...]
    dst2: tuple[int, ...]
    src2: tuple[int, ...]


def limb_layout(spec: SkeletonSpec) -> LimbLayout:
    if len(spec.limbs) != 4:
        raise SkeletonError("part-level block needs exactly 4 limbs")
    group1 = tuple(j for limb in spec.limbs for j in limb[1:])
    group2 = tuple(j for limb in spec.limbs for j in limb)
    dst1 = tuple(limb[2] for limb in spec.limbs)
    src1 = tuple(range(len(spec.limbs)))
    dst2 = tuple(j for limb in spec.limbs for j in limb[1:])
    src2 = tuple(li for li in range(len(spec.limbs)) for _ in range(2))
    return LimbLayout(spec.joint_count, group1, group2, dst1, src1, dst2, src2)


def replacement_masks(spec: SkeletonSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Masks of joints receiving the first / second limb constraint.

    Returns ``(mask1, mask2, limb_of)``; ``limb_of`` is -1 for joints outside
    every limb.
    """
    pdof = np.asarray(spec.pdof)
    mask1 = pdof == 3
    mask2 = (pdof == 2) | (pdof == 3)
    limb_of = np.full(spec.joint_count, -1, dtype=int)
    for li, limb in enumerate(spec.limbs):
        limb_of[list(limb)] = li
    return mask1, mask2, limb_of
