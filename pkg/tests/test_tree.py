"""Entity-tree construction, tracking, keyframe refresh, and serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierbc.backends import (
    BackendBundle,
    Observation,
    OracleEncoder,
    OracleEntityMasks,
    OracleSegmenter,
    OracleTracker,
)
from hierbc.masks import CorruptPayloadError, FULL_IMAGE_BOX, LOST_BOX
from hierbc.task import TaskSpec
from hierbc.tree import (
    EntityTree,
    ShapeMismatchError,
    Slot,
    advance_tree,
    build_tree,
    deserialize_tree,
    pool_features,
    refresh_keyframe,
    serialize_tree,
    tree_from_track,
)

H = W = 64
PATCH = 16


def box_mask(r0, r1, c0, c1, h=H, w=W):
    m = np.zeros((h, w), dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def make_obs(rng, entities, frame_index=0):
    return Observation(image=rng.integers(0, 256, (H, W, 3), dtype=np.uint8),
                       entities=entities, frame_index=frame_index)


def two_entity_obs(rng, frame_index=0, shift=0):
    """Entity "a" with two half parts, entity "b" monolithic."""
    a = box_mask(8, 24, 8 + shift, 24 + shift)
    a_left = a.copy()
    a_left[:, 16 + shift:] = False
    a_right = a & ~a_left
    b = box_mask(40, 56, 40, 56)
    ents = [
        OracleEntityMasks("a", a, {"left": a_left, "right": a_right}),
        OracleEntityMasks("b", b, {"whole": b}),
    ]
    return make_obs(rng, ents, frame_index), a, b


class TestPoolFeatures:
    def test_matches_independent_mean(self):
        rng = np.random.default_rng(0)
        enc = OracleEncoder(dim=16, patch_size=PATCH, seed=0)
        for _ in range(200):
            grid = enc.encode(rng.integers(0, 256, (H, W, 3), dtype=np.uint8))
            mask = rng.random((H, W)) < 0.1
            if not mask.any():
                mask[rng.integers(H), rng.integers(W)] = True
            vec, degenerate = pool_features(grid, mask)
            assert not degenerate
            touched = []
            for pr in range(grid.patch_rows):
                for pc in range(grid.patch_cols):
                    if mask[pr * PATCH:(pr + 1) * PATCH, pc * PATCH:(pc + 1) * PATCH].any():
                        touched.append(grid.patch_features[pr, pc])
            np.testing.assert_allclose(vec, np.mean(touched, axis=0), atol=1e-6)

    def test_empty_mask_is_degenerate_zero(self):
        rng = np.random.default_rng(1)
        grid = OracleEncoder(dim=8, patch_size=PATCH).encode(
            rng.integers(0, 256, (H, W, 3), dtype=np.uint8))
        vec, degenerate = pool_features(grid, np.zeros((H, W), dtype=bool))
        assert degenerate and not vec.any()

    def test_shape_mismatch(self):
        rng = np.random.default_rng(2)
        grid = OracleEncoder(dim=8, patch_size=PATCH).encode(
            rng.integers(0, 256, (H, W, 3), dtype=np.uint8))
        with pytest.raises(ShapeMismatchError):
            pool_features(grid, np.zeros((H, W + 3), dtype=bool))


class TestBuildTree:
    def test_scene_slot_is_full_image(self):
        rng = np.random.default_rng(3)
        obs, a, b = two_entity_obs(rng)
        enc = OracleEncoder(dim=16, patch_size=PATCH)
        tree, _ = build_tree(obs, [a, b], enc, OracleSegmenter())
        assert tuple(tree.scene.location) == tuple(FULL_IMAGE_BOX)
        np.testing.assert_array_equal(tree.scene.content,
                                      enc.encode(obs.image).global_summary)

    def test_objects_in_task_mask_order(self):
        rng = np.random.default_rng(4)
        obs, a, b = two_entity_obs(rng)
        enc = OracleEncoder(dim=16, patch_size=PATCH)
        tree, track = build_tree(obs, [b, a], enc, OracleSegmenter(),
                                 entity_names=["b", "a"])
        assert tree.object_ids == ["obj0", "obj1"]
        assert track.object_names == ["b", "a"]

    def test_empty_mask_skipped(self):
        rng = np.random.default_rng(5)
        obs, a, _ = two_entity_obs(rng)
        empty = np.zeros((H, W), dtype=bool)
        tree, _ = build_tree(obs, [empty, a], OracleEncoder(dim=8, patch_size=PATCH),
                             OracleSegmenter())
        assert tree.object_ids == ["obj1"]

    def test_all_empty_warns_scene_only(self):
        rng = np.random.default_rng(6)
        obs, _, _ = two_entity_obs(rng)
        empty = np.zeros((H, W), dtype=bool)
        with pytest.warns(UserWarning):
            tree, _ = build_tree(obs, [empty], OracleEncoder(dim=8, patch_size=PATCH),
                                 OracleSegmenter())
        assert tree.objects == [] and tree.token_count == 1

    def test_parts_assigned_and_duplicates_dropped(self):
        rng = np.random.default_rng(7)
        obs, a, b = two_entity_obs(rng)
        tree, track = build_tree(obs, [a, b], OracleEncoder(dim=8, patch_size=PATCH),
                                 OracleSegmenter())
        # "a" keeps its two half parts; "b"'s only part equals its own mask
        # (IoU 1 >= 0.95) and is dropped as a duplicate.
        assert len(tree.parts["obj0"]) == 2
        assert len(tree.parts["obj1"]) == 0
        assert tree.token_count == 1 + 2 + 2
        assert track.part_parent == {"obj0.p0": "obj0", "obj0.p1": "obj0"}

    def test_no_task_masks_is_scene_only_without_warning(self):
        rng = np.random.default_rng(8)
        obs, _, _ = two_entity_obs(rng)
        import warnings as w

        with w.catch_warnings():
            w.simplefilter("error")
            tree, _ = build_tree(obs, [], OracleEncoder(dim=8, patch_size=PATCH),
                                 OracleSegmenter())
        assert tree.token_count == 1

    def test_distractor_invariance(self):
        """Pixel edits outside an object's touched patches leave its slots
        bit-identical (the scene summary is exempt)."""
        rng = np.random.default_rng(9)
        obs, a, b = two_entity_obs(rng)
        enc = OracleEncoder(dim=16, patch_size=PATCH)
        tree, _ = build_tree(obs, [a, b], enc, OracleSegmenter())
        for _ in range(20):
            img = obs.image.copy()
            img[48:64, 0:16] = rng.integers(0, 256, (16, 16, 3))  # far corner
            edited = Observation(image=img, entities=obs.entities)
            tree2, _ = build_tree(edited, [a, b], enc, OracleSegmenter())
            for s1, s2 in zip(tree2.objects, tree.objects):
                assert tuple(s1.location) == tuple(s2.location)
                assert np.array_equal(s1.content, s2.content)
            for oid in tree.parts:
                for (p1, s1), (p2, s2) in zip(tree2.parts[oid], tree.parts[oid]):
                    assert p1 == p2 and np.array_equal(s1.content, s2.content)


class TestAdvanceAndRefresh:
    def test_tracks_moving_entity(self):
        rng = np.random.default_rng(10)
        obs0, a, b = two_entity_obs(rng)
        enc = OracleEncoder(dim=8, patch_size=PATCH)
        tree0, track = build_tree(obs0, [a, b], enc, OracleSegmenter(),
                                  entity_names=["a", "b"])
        obs1, a1, _ = two_entity_obs(rng, frame_index=1, shift=4)
        tree1 = advance_tree(track, obs1, enc, OracleTracker())
        assert tree1.frame_index == 1
        assert np.array_equal(track.masks["obj0"], a1)
        assert tree1.object_ids == tree0.object_ids

    def test_lost_entity_gets_sentinel_slot(self):
        rng = np.random.default_rng(11)
        obs0, a, b = two_entity_obs(rng)
        enc = OracleEncoder(dim=8, patch_size=PATCH)
        _, track = build_tree(obs0, [a, b], enc, OracleSegmenter())
        # next frame: entity "a" fully invisible
        gone = [OracleEntityMasks("a", np.zeros((H, W), dtype=bool), {}),
                obs0.entities[1]]
        obs1 = make_obs(rng, gone, frame_index=1)
        tree1 = advance_tree(track, obs1, enc, OracleTracker())
        lost_slot = tree1.objects[0]
        assert lost_slot.lost
        assert tuple(lost_slot.location) == tuple(LOST_BOX)
        assert not lost_slot.content.any()
        # kept its token position
        assert tree1.object_ids[0] == "obj0"

    def test_refresh_restores_lost_object_not_parts(self):
        rng = np.random.default_rng(12)
        obs0, a, b = two_entity_obs(rng)
        enc = OracleEncoder(dim=8, patch_size=PATCH)
        _, track = build_tree(obs0, [a, b], enc, OracleSegmenter(),
                              task=TaskSpec("move a near b", ["a", "b"]),
                              entity_names=["a", "b"])
        gone = [OracleEntityMasks("a", np.zeros((H, W), dtype=bool), {}),
                obs0.entities[1]]
        obs1 = make_obs(rng, gone, frame_index=1)
        advance_tree(track, obs1, enc, OracleTracker())
        assert not track.masks["obj0"].any()
        assert not track.masks["obj0.p0"].any()
        # entity reappears
        obs2, a2, _ = two_entity_obs(rng, frame_index=2)
        spec = TaskSpec("move a near b", ["a", "b"])
        refresh_keyframe(track, obs2, spec, BackendBundle.oracle(dim=8))
        assert np.array_equal(track.masks["obj0"], a2)
        assert not track.masks["obj0.p0"].any()  # parts are not re-grounded

    def test_refresh_leaves_good_tracks_alone(self):
        rng = np.random.default_rng(13)
        obs0, a, b = two_entity_obs(rng)
        enc = OracleEncoder(dim=8, patch_size=PATCH)
        _, track = build_tree(obs0, [a, b], enc, OracleSegmenter(),
                              entity_names=["a", "b"])
        before = track.masks["obj0"].copy()
        refresh_keyframe(track, obs0, TaskSpec("move a near b", ["a", "b"]),
                         BackendBundle.oracle(dim=8))
        assert np.array_equal(track.masks["obj0"], before)

    def test_tree_size_law(self):
        """token_count = 1 + n_objects + n_parts, across random scenes."""
        rng = np.random.default_rng(14)
        for _ in range(10):
            obs, a, b = two_entity_obs(rng)
            masks = [a, b][: rng.integers(1, 3)]
            tree, _ = build_tree(obs, masks, OracleEncoder(dim=8, patch_size=PATCH),
                                 OracleSegmenter())
            n_parts = sum(len(v) for v in tree.parts.values())
            assert tree.token_count == 1 + len(tree.objects) + n_parts


class TestSerialization:
    def random_tree(self, rng, dim=8):
        def slot(lost=False):
            if lost:
                return Slot(LOST_BOX, np.zeros(dim), lost=True)
            x0, y0 = rng.random(2) * 0.5
            return Slot(
                location=type(FULL_IMAGE_BOX)(x0, x0 + rng.random() * 0.4 + 0.01,
                                              y0, y0 + rng.random() * 0.4 + 0.01),
                content=rng.standard_normal(dim),
            )

        n_obj = int(rng.integers(0, 4))
        object_ids = [f"obj{i}" for i in range(n_obj)]
        parts = {}
        for oid in object_ids:
            parts[oid] = [(f"{oid}.p{k}", slot(lost=rng.random() < 0.2))
                          for k in range(rng.integers(0, 3))]
        return EntityTree(
            scene=Slot(FULL_IMAGE_BOX, rng.standard_normal(dim)),
            object_ids=object_ids,
            objects=[slot(lost=rng.random() < 0.2) for _ in object_ids],
            parts=parts,
            frame_index=int(rng.integers(0, 1000)),
        )

    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(15)
        for _ in range(100):
            tree = self.random_tree(rng)
            blob = serialize_tree(tree)
            back = deserialize_tree(blob)
            assert serialize_tree(back) == blob
            assert back.object_ids == tree.object_ids
            assert back.frame_index == tree.frame_index
            assert tuple(back.scene.location) == tuple(tree.scene.location)
            np.testing.assert_array_equal(back.scene.content, tree.scene.content)
            for s1, s2 in zip(back.objects, tree.objects):
                assert tuple(s1.location) == tuple(s2.location)
                assert s1.lost == s2.lost
                np.testing.assert_array_equal(s1.content, s2.content)
            for oid in tree.parts:
                assert [p for p, _ in back.parts[oid]] == [p for p, _ in tree.parts[oid]]

    def test_corrupt_payloads(self):
        rng = np.random.default_rng(16)
        blob = serialize_tree(self.random_tree(rng))
        with pytest.raises(CorruptPayloadError):
            deserialize_tree(b"XXXX" + blob[4:])
        with pytest.raises(CorruptPayloadError):
            deserialize_tree(blob[:-1])
        with pytest.raises(CorruptPayloadError):
            deserialize_tree(blob + b"\x00")

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_property(self, seed):
        rng = np.random.default_rng(seed)
        tree = self.random_tree(rng)
        assert serialize_tree(deserialize_tree(serialize_tree(tree))) == serialize_tree(tree)
