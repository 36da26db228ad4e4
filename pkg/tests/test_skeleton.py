import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hierpose.skeleton import (
    H36M_HIERARCHY,
    H36M_PARENTS,
    BoneDecomposition,
    DegenerateBoneError,
    TopologyError,
    build_topology,
    compose,
    compose_t,
    disentangle,
    disentangle_t,
    h36m_topology,
    hierarchy_groups,
    load_topology,
    save_topology,
)


def dfs_depths(parents):
    """Independent depth oracle: walk up to the root for every joint."""
    depths = []
    for j in range(len(parents)):
        d, k = 0, j
        while parents[k] != -1:
            k = parents[k]
            d += 1
        depths.append(d)
    return depths


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


class TestTopology:
    def test_chain(self):
        topo = build_topology([-1, 0, 1])
        assert topo.hierarchy.tolist() == [0, 1, 2]
        assert topo.triplets == ((0, 1, 2),)

    def test_star(self):
        topo = build_topology([-1, 0, 0])
        assert topo.hierarchy.tolist() == [0, 1, 1]
        assert topo.triplets == ()

    def test_h36m_matches_depth_oracle(self):
        topo = h36m_topology()
        assert topo.hierarchy.tolist() == dfs_depths(H36M_PARENTS) == list(H36M_HIERARCHY)
        assert set(topo.hierarchy.tolist()) == set(range(6))
        assert topo.num_levels == 6

    def test_h36m_named_levels(self):
        topo = h36m_topology()
        level = dict(zip(topo.joint_names, topo.hierarchy.tolist()))
        assert level["pelvis"] == 0
        assert level["r_hip"] == level["spine"] == 1
        assert level["l_knee"] == level["thorax"] == 2
        assert level["r_ankle"] == level["neck"] == level["l_shoulder"] == 3
        assert level["head"] == level["r_elbow"] == 4
        assert level["l_wrist"] == level["r_wrist"] == 5

    @pytest.mark.parametrize(
        "parents, match",
        [([-1, -1, 0], "one root"), ([0, 1, 0], "one root"), ([-1, 5, 0], "out of range"),
         ([-1, 2, 1], "cycle"), ([-1], "two joints")],
    )
    def test_invalid(self, parents, match):
        with pytest.raises(TopologyError, match=match):
            build_topology(parents)

    def test_triplet_soundness(self):
        topo = h36m_topology()
        seen = set()
        for jp, j, jc in topo.triplets:
            assert topo.parents[j] == jp and topo.parents[jc] == j
            assert (j, jc) not in seen
            seen.add((j, jc))
        # every grandchild relation appears exactly once
        expected = {(j, c) for c in range(17) for j in [topo.parents[c]] if j >= 0 and topo.parents[j] >= 0}
        assert seen == expected

    def test_hierarchy_groups(self):
        assert hierarchy_groups(build_topology([-1, 0, 1])) == {0: [0], 1: [1], 2: [2]}
        assert hierarchy_groups(build_topology([-1, 0, 0])) == {0: [0], 1: [1, 2]}
        groups = hierarchy_groups(h36m_topology())
        assert len(groups) == 6
        assert sorted(j for g in groups.values() for j in g) == list(range(17))

    def test_json_roundtrip(self, tmp_path):
        topo = h36m_topology()
        save_topology(topo, tmp_path / "t.json")
        assert "hierarchy" not in json.loads((tmp_path / "t.json").read_text())
        back = load_topology(tmp_path / "t.json")
        assert back.parents.tolist() == topo.parents.tolist()
        assert back.triplets == topo.triplets
        assert back.joint_names == topo.joint_names


class TestDecomposition:
    def test_single_bone(self):
        topo = build_topology([-1, 0])
        d = disentangle(np.array([[[0, 0, 0], [0, 0, 2.0]]]), topo)
        np.testing.assert_array_equal(d.lengths[0, 0], [2.0])
        np.testing.assert_array_equal(d.directions[0, 0], [0, 0, 1.0])

    def test_345_triangle(self):
        topo = build_topology([-1, 0])
        d = disentangle(np.array([[[1, 1, 1], [4, 5, 1.0]]]), topo)
        assert d.lengths[0, 0, 0] == pytest.approx(5.0)
        np.testing.assert_allclose(d.directions[0, 0], [0.6, 0.8, 0.0])

    def test_zero_length_policy(self):
        topo = build_topology([-1, 0, 1])
        pose = np.array([[[0, 0, 0], [0, 0, 0], [1, 0, 0.0]]])
        with pytest.raises(DegenerateBoneError):
            disentangle(pose, topo)
        d = disentangle(pose, topo, allow_zero=True)
        assert d.has_degenerate
        np.testing.assert_array_equal(d.directions[0, 0], 0.0)
        assert d.degenerate.tolist() == [[True, False]]

    def test_compose_all_zero_lengths(self):
        topo = h36m_topology()
        root = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        rng = np.random.default_rng(0)
        d = BoneDecomposition(np.zeros((2, 16, 1)), rng.standard_normal((2, 16, 3)), topo.bone_order)
        out = compose(root, d, topo)
        np.testing.assert_array_equal(out, np.broadcast_to(root[:, None], (2, 17, 3)))

    def test_compose_unit_chain(self):
        topo = build_topology([-1, 0, 1])
        d = BoneDecomposition(np.ones((1, 2, 1)), np.array([[[1, 0, 0], [1, 0, 0.0]]]), topo.bone_order)
        np.testing.assert_array_equal(compose(np.zeros((1, 3)), d, topo)[0, :, 0], [0, 1, 2])

    def test_compose_shape_mismatch(self):
        topo = build_topology([-1, 0, 1])
        d = BoneDecomposition(np.ones((1, 3, 1)), np.ones((1, 3, 3)), topo.bone_order)
        with pytest.raises(ValueError, match="shape mismatch"):
            compose(np.zeros((1, 3)), d, topo)

    def test_roundtrip_random(self):
        topo = h36m_topology()
        pose = np.random.default_rng(1).standard_normal((27, 17, 3))
        back = compose(pose[:, 0], disentangle(pose, topo), topo)
        np.testing.assert_allclose(back, pose, atol=1e-9)

    def test_bone_order_layout(self):
        topo = h36m_topology()
        children = [c for _, c in topo.bone_order]
        assert children == list(range(1, 17))

    def test_rigid_equivariance(self):
        rng = np.random.default_rng(2)
        topo = h36m_topology()
        pose = rng.standard_normal((5, 17, 3))
        R, t = random_rotation(rng), rng.standard_normal(3)
        a = disentangle(pose, topo)
        b = disentangle(pose @ R.T + t, topo)
        np.testing.assert_allclose(b.lengths, a.lengths, atol=1e-6)
        np.testing.assert_allclose(b.directions, a.directions @ R.T, atol=1e-6)

    def test_torch_variants_agree(self):
        topo = h36m_topology()
        pose = np.random.default_rng(3).standard_normal((2, 4, 17, 3))
        d = disentangle(pose, topo)
        l, dirs, deg = disentangle_t(torch.tensor(pose), topo)
        np.testing.assert_allclose(l.numpy(), d.lengths, atol=1e-12)
        np.testing.assert_allclose(dirs.numpy(), d.directions, atol=1e-12)
        assert not deg.any()
        back = compose_t(torch.tensor(pose[..., 0, :]), l, dirs, topo).numpy()
        np.testing.assert_allclose(back, pose, atol=1e-9)


finite = st.floats(-10, 10, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 17, 3), elements=finite))
def test_roundtrip_property(pose):
    topo = h36m_topology()
    vec = pose[:, topo.bone_children] - pose[:, topo.bone_parents]
    if np.linalg.norm(vec, axis=-1).min() <= 1e-6:
        return
    d = disentangle(pose, topo)
    np.testing.assert_allclose(np.linalg.norm(d.directions, axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(compose(pose[:, 0], d, topo), pose, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30).flatmap(lambda n: st.lists(st.integers(0, n - 1), min_size=n - 1, max_size=n - 1)))
def test_random_tree_recurrence(raw):
    # parent of joint j+1 is drawn from [0, j], giving an acyclic tree rooted at 0
    parents = [-1] + [min(p, j) for j, p in enumerate(raw)]
    topo = build_topology(parents)
    for j in range(1, len(parents)):
        assert topo.hierarchy[j] == topo.hierarchy[parents[j]] + 1
    for _, j, _ in topo.triplets:
        assert topo.children(j)
    assert topo.hierarchy.tolist() == dfs_depths(parents)
