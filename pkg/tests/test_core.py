import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from glandseg.core import (
    EdgeMap,
    ImageTensor,
    InstanceMap,
    LabelMap,
    ProbabilityMap,
    TrainingSample,
    ValidationError,
    canonicalize_instances,
    instance_to_edges,
    instance_to_semantic,
)

instance_arrays = arrays(
    dtype=np.int64,
    shape=st.tuples(st.integers(1, 12), st.integers(1, 12)),
    elements=st.integers(0, 5),
)


def edges_oracle(ids: np.ndarray, thickness: int) -> np.ndarray:
    """Per-pixel brute force: object pixels with a differing 4-neighbour,
    then Chebyshev dilation."""
    h, w = ids.shape
    seeds = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            if ids[y, x] == 0:
                continue
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and ids[ny, nx] != ids[y, x]:
                    seeds[y, x] = True
    out = np.zeros((h, w), dtype=bool)
    k = thickness - 1
    for y in range(h):
        for x in range(w):
            ylo, yhi = max(0, y - k), min(h, y + k + 1)
            xlo, xhi = max(0, x - k), min(w, x + k + 1)
            out[y, x] = seeds[ylo:yhi, xlo:xhi].any()
    return out


def random_blob_map(rng, size=20, n_blobs=3):
    ids = np.zeros((size, size), dtype=np.int64)
    for i in range(1, n_blobs + 1):
        cy, cx = rng.integers(2, size - 2, size=2)
        r = rng.integers(2, 4)
        yy, xx = np.ogrid[:size, :size]
        ids[(yy - cy) ** 2 + (xx - cx) ** 2 <= r**2] = i
    return ids


class TestInstanceToSemantic:
    def test_all_zero(self):
        inst = InstanceMap(np.zeros((4, 5), dtype=np.int64))
        assert (instance_to_semantic(inst).data == 0).all()

    def test_two_ids_binary(self):
        ids = np.array([[0, 1], [2, 0]])
        lab = instance_to_semantic(InstanceMap(ids))
        assert (lab.data == np.array([[0, 1], [1, 0]])).all()

    def test_random_blobs_match_pixel_oracle(self):
        rng = np.random.default_rng(0)
        ids = random_blob_map(rng)
        lab = instance_to_semantic(InstanceMap(ids))
        for y in range(20):
            for x in range(20):
                assert lab.data[y, x] == (1 if ids[y, x] > 0 else 0)

    def test_class_table(self):
        ids = np.array([[0, 1], [2, 2]])
        lab = instance_to_semantic(InstanceMap(ids), class_of_id={1: 2, 2: 1},
                                   num_classes=2)
        assert (lab.data == np.array([[0, 2], [1, 1]])).all()


class TestInstanceToEdges:
    def test_single_pixel_object(self):
        ids = np.zeros((5, 5), dtype=np.int64)
        ids[2, 2] = 1
        edges = instance_to_edges(InstanceMap(ids), thickness=1)
        expected = np.zeros((5, 5), dtype=np.uint8)
        expected[2, 2] = 1
        assert (edges.data == expected).all()

    def test_square_boundary_ring(self):
        ids = np.zeros((9, 9), dtype=np.int64)
        ids[2:7, 2:7] = 1
        edges = instance_to_edges(InstanceMap(ids), thickness=1)
        assert edges.data.sum() == 16
        assert (edges.data == edges_oracle(ids, 1)).all()

    def test_shared_border_marked_on_both_sides(self):
        ids = np.zeros((6, 6), dtype=np.int64)
        ids[1:5, 1:3] = 1
        ids[1:5, 3:5] = 2
        edges = instance_to_edges(InstanceMap(ids), thickness=1)
        assert edges.data[2, 2] == 1 and edges.data[2, 3] == 1
        assert (edges.data == edges_oracle(ids, 1)).all()

    @pytest.mark.parametrize("thickness", [1, 2, 3])
    def test_matches_brute_force(self, thickness):
        rng = np.random.default_rng(7)
        for _ in range(5):
            ids = random_blob_map(rng)
            got = instance_to_edges(InstanceMap(ids), thickness=thickness)
            assert (got.data.astype(bool) == edges_oracle(ids, thickness)).all()

    def test_thickness_must_be_positive(self):
        with pytest.raises(ValidationError):
            instance_to_edges(InstanceMap(np.zeros((3, 3), dtype=np.int64)), thickness=0)

    @given(instance_arrays)
    @settings(max_examples=40, deadline=None)
    def test_binary_and_permutation_invariant(self, ids):
        inst = InstanceMap(ids)
        edges = instance_to_edges(inst, thickness=2)
        assert set(np.unique(edges.data)) <= {0, 1}
        perm = np.array([0, 3, 5, 2, 4, 1], dtype=np.int64)
        permuted = instance_to_edges(InstanceMap(perm[ids]), thickness=2)
        assert (edges.data == permuted.data).all()

    @given(instance_arrays, st.integers(1, 4))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_thickness(self, ids, thickness):
        inst = InstanceMap(ids)
        thin = instance_to_edges(inst, thickness=thickness).data
        thick = instance_to_edges(inst, thickness=thickness + 1).data
        assert (thick >= thin).all()


class TestCanonicalize:
    def test_raster_order_relabel(self):
        ids = np.array([[0, 3, 3], [7, 7, 0]])
        out = canonicalize_instances(InstanceMap(ids))
        assert (out.data == np.array([[0, 1, 1], [2, 2, 0]])).all()

    def test_identity_on_canonical(self):
        ids = np.array([[1, 1, 0], [0, 2, 2]])
        out = canonicalize_instances(InstanceMap(ids))
        assert (out.data == ids).all()

    @given(instance_arrays)
    @settings(max_examples=40, deadline=None)
    def test_bijective_on_positive_ids(self, ids):
        inst = InstanceMap(ids)
        out = canonicalize_instances(inst)
        n = len(np.unique(ids[ids > 0]))
        assert sorted(np.unique(out.data[out.data > 0])) == list(range(1, n + 1))
        before = sorted(np.bincount(ids.ravel())[1:], reverse=True)
        after = sorted(np.bincount(out.data.ravel())[1:], reverse=True)
        assert [c for c in before if c] == [c for c in after if c]

    @given(instance_arrays)
    @settings(max_examples=40, deadline=None)
    def test_semantic_invariant_under_relabeling(self, ids):
        inst = InstanceMap(ids)
        direct = instance_to_semantic(inst)
        relabeled = instance_to_semantic(canonicalize_instances(inst))
        assert (direct.data == relabeled.data).all()


class TestTypeInvariants:
    def test_probability_map_sums_enforced(self):
        good = np.stack([np.full((3, 3), 0.25), np.full((3, 3), 0.75)], axis=2)
        ProbabilityMap(good)
        bad = np.stack([np.full((3, 3), 0.3), np.full((3, 3), 0.75)], axis=2)
        with pytest.raises(ValidationError):
            ProbabilityMap(bad)

    def test_probability_map_range_enforced(self):
        bad = np.stack([np.full((2, 2), 1.2), np.full((2, 2), -0.2)], axis=2)
        with pytest.raises(ValidationError):
            ProbabilityMap(bad)

    def test_image_rejects_non_finite(self):
        arr = np.zeros((2, 2, 3), dtype=np.float32)
        arr[0, 0, 0] = np.nan
        with pytest.raises(ValidationError):
            ImageTensor(arr)

    def test_label_range_enforced(self):
        with pytest.raises(ValidationError):
            LabelMap(np.array([[0, 2]]), num_classes=1)

    def test_edge_map_binary_enforced(self):
        with pytest.raises(ValidationError):
            EdgeMap(np.array([[0, 2]]))

    def test_instance_ids_non_negative(self):
        with pytest.raises(ValidationError):
            InstanceMap(np.array([[-1, 0]]))

    def test_training_sample_dimension_check(self):
        img = ImageTensor(np.zeros((4, 4, 3), dtype=np.float32))
        lab = LabelMap(np.zeros((4, 4), dtype=np.int64))
        edg = EdgeMap(np.zeros((4, 4), dtype=np.uint8))
        bad_inst = InstanceMap(np.zeros((5, 4), dtype=np.int64))
        with pytest.raises(ValidationError):
            TrainingSample(image=img, labels=lab, edges=edg, instances=bad_inst, id="x")

    def test_arrays_frozen(self):
        inst = InstanceMap(np.zeros((3, 3), dtype=np.int64))
        with pytest.raises(ValueError):
            inst.data[0, 0] = 1
