import json

import numpy as np
import pytest

from htnet.skeleton import (
    SkeletonError,
    SkeletonSpec,
    limb_layout,
    normalize_adjacency,
    normalized_adjacency,
    replacement_masks,
)


def test_h36m17_shape(h36m):
    assert h36m.joint_count == 17
    assert len(h36m.edges) == 16
    pdof = np.array(h36m.pdof)
    assert [(pdof == k).sum() for k in range(4)] == [5, 4, 4, 4]
    assert [h36m.joint_names[j] for j in np.flatnonzero(pdof == 0)] == [
        "hip", "spine", "thorax", "neck", "head"]


def test_limb_order_and_parents(h36m):
    names = [[h36m.joint_names[j] for j in limb] for limb in h36m.limbs]
    assert names == [
        ["r_hip", "r_knee", "r_ankle"], ["l_hip", "l_knee", "l_ankle"],
        ["l_shoulder", "l_elbow", "l_wrist"], ["r_shoulder", "r_elbow", "r_wrist"],
    ]
    wrist, elbow = h36m.joint_names.index("l_wrist"), h36m.joint_names.index("l_elbow")
    assert h36m.parent[wrist] == elbow


def test_adjacency_trivial_graphs():
    np.testing.assert_array_equal(normalize_adjacency([], 1), [[1.0]])
    np.testing.assert_allclose(normalize_adjacency([(0, 1)], 2), [[0.5, 0.5], [0.5, 0.5]])


def test_adjacency_h36m_structure(h36m):
    adj = normalized_adjacency(h36m)
    assert np.abs(adj - adj.T).max() == 0.0
    assert (adj >= 0).all()
    degree = np.zeros(17, int)
    for i, j in h36m.edges:
        degree[i] += 1
        degree[j] += 1
    assert ((adj != 0).sum(axis=1) == degree + 1).all()


def test_adjacency_spectral_radius_by_power_iteration(h36m):
    adj = normalized_adjacency(h36m)
    v = np.ones(17)
    for _ in range(2000):
        v = adj @ v
        v /= np.linalg.norm(v)
    assert v @ adj @ v <= 1 + 1e-9


def test_adjacency_rejects_out_of_range_edge():
    with pytest.raises(SkeletonError, match="out of range"):
        normalize_adjacency([(0, 3)], 2)


def test_replacement_masks(h36m):
    mask1, mask2, limb_of = replacement_masks(h36m)
    assert mask1.sum() == 4 and mask2.sum() == 8
    assert not (mask1 & ~mask2).any()
    torso = np.array(h36m.pdof) == 0
    assert not (mask1 | mask2)[torso].any()
    assert (limb_of[torso] == -1).all()
    assert sorted(limb_of[mask1]) == [0, 1, 2, 3]


def test_limb_layout_is_limb_major(h36m):
    lay = limb_layout(h36m)
    assert lay.group1 == (2, 3, 5, 6, 12, 13, 15, 16)
    assert lay.group2 == (1, 2, 3, 4, 5, 6, 11, 12, 13, 14, 15, 16)
    assert lay.dst1 == (3, 6, 13, 16)
    assert lay.dst2 == lay.group1
    assert lay.src2 == (0, 0, 1, 1, 2, 2, 3, 3)


def _mutate(h36m, **kw):
    d = h36m.to_dict()
    d.update(kw)
    return d


@pytest.mark.parametrize("change", [
    {"pdof": [0, 1, 2, 3, 1, 2, 3, 0, 0, 0, 0, 1, 2, 3, 1, 2, 2]},       # wrist labelled 2
    {"limbs": [[1, 2, 3], [4, 5, 6], [11, 12, 13]]},                     # three limbs
    {"limbs": [[1, 2, 3], [4, 5, 6], [11, 12, 13], [14, 16, 15]]},       # out of order
    {"parent": [0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 12]},  # wrist off elbow
    {"parent": [0, 0, 1, 2, 0, 4, 5, 10, 7, 8, 9, 8, 11, 12, 8, 14, 15]},  # cycle
    {"parent": [0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 99, 8, 11, 12, 8, 14, 15]},
    {"root_index": 3},
])
def test_mutated_specs_are_rejected(h36m, change):
    with pytest.raises(SkeletonError):
        SkeletonSpec.from_dict(_mutate(h36m, **change))


def test_json_round_trip(h36m, tmp_path):
    path = tmp_path / "skel.json"
    h36m.save(path)
    assert json.loads(path.read_text())["limbs"][0] == [1, 2, 3]
    assert SkeletonSpec.load(path) == h36m
