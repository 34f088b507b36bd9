import numpy as np
import pytest

from glandseg.core import ProbabilityMap, ValidationError
from glandseg.postprocess import (
    PostprocessConfig,
    bfs_connected_components,
    connected_components,
    extract_instances,
)


def binary_probs(fg: np.ndarray, p_hi=0.9, p_lo=0.05) -> ProbabilityMap:
    fg_prob = np.where(fg, p_hi, p_lo)
    return ProbabilityMap(np.stack([1.0 - fg_prob, fg_prob], axis=2))


class TestConnectedComponents:
    def test_checkerboard_is_all_singletons(self):
        yy, xx = np.mgrid[0:6, 0:6]
        mask = (yy + xx) % 2 == 0
        inst = connected_components(mask)
        assert inst.num_objects == mask.sum()

    def test_full_mask_single_component(self):
        inst = connected_components(np.ones((5, 7), dtype=bool))
        assert inst.num_objects == 1
        assert (inst.data == 1).all()

    def test_matches_bfs_oracle_on_random_masks(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            mask = rng.random((32, 32)) < rng.uniform(0.2, 0.7)
            got = connected_components(mask)
            want = bfs_connected_components(mask)
            assert (got.data == want.data).all()

    def test_diagonal_pixels_are_separate(self):
        mask = np.eye(4, dtype=bool)
        assert connected_components(mask).num_objects == 4


class TestExtractInstances:
    def test_all_background(self):
        probs = binary_probs(np.zeros((8, 8), dtype=bool))
        cfg = PostprocessConfig(min_area=0, dilation_radius=0)
        inst = extract_instances(probs, np.zeros((8, 8)), cfg)
        assert inst.num_objects == 0

    def test_edge_line_splits_two_blobs(self):
        fg = np.zeros((10, 20), dtype=bool)
        fg[1:9, 1:19] = True
        edge = np.zeros((10, 20))
        edge[:, 9:11] = 0.9
        probs = binary_probs(fg)
        split_cfg = PostprocessConfig(min_area=4, dilation_radius=0)
        merged_cfg = PostprocessConfig(suppress_edges=False, min_area=4, dilation_radius=0)
        assert extract_instances(probs, edge, split_cfg).num_objects == 2
        assert extract_instances(probs, edge, merged_cfg).num_objects == 1

    def test_split_survives_dilation(self):
        fg = np.zeros((10, 20), dtype=bool)
        fg[1:9, 1:19] = True
        edge = np.zeros((10, 20))
        edge[:, 9:11] = 0.9
        probs = binary_probs(fg)
        cfg = PostprocessConfig(min_area=4, dilation_radius=2)
        inst = extract_instances(probs, edge, cfg)
        assert inst.num_objects == 2
        # the suppressed strip is reclaimed, split between the two sides
        assert (inst.data[1:9, 9:11] > 0).all()

    def test_hole_filling(self):
        fg = np.zeros((12, 12), dtype=bool)
        fg[2:10, 2:10] = True
        fg[5:7, 5:7] = False
        probs = binary_probs(fg)
        on = PostprocessConfig(suppress_edges=False, min_area=4, fill_holes=True,
                               dilation_radius=0)
        off = PostprocessConfig(suppress_edges=False, min_area=4, fill_holes=False,
                                dilation_radius=0)
        filled = extract_instances(probs, None, on)
        assert filled.num_objects == 1
        assert int((filled.data > 0).sum()) == 64
        hollow = extract_instances(probs, None, off)
        assert int((hollow.data > 0).sum()) == 60

    def test_min_area_removes_specks(self):
        fg = np.zeros((10, 10), dtype=bool)
        fg[1:5, 1:5] = True
        fg[8, 8] = True
        probs = binary_probs(fg)
        cfg = PostprocessConfig(suppress_edges=False, min_area=4, dilation_radius=0)
        inst = extract_instances(probs, None, cfg)
        assert inst.num_objects == 1

    def test_dilation_claims_nearest_with_lower_id_ties(self):
        fg = np.zeros((5, 7), dtype=bool)
        fg[2, 1] = True
        fg[2, 5] = True
        probs = binary_probs(fg)
        cfg = PostprocessConfig(suppress_edges=False, min_area=0, fill_holes=False,
                                dilation_radius=2)
        inst = extract_instances(probs, None, cfg)
        assert inst.num_objects == 2
        assert inst.data[2, 1] == 1 and inst.data[2, 5] == 2
        assert inst.data[2, 3] == 1          # equidistant, lower id wins
        assert inst.data[2, 2] == 1 and inst.data[2, 4] == 2

    def test_raising_threshold_never_grows_foreground(self):
        rng = np.random.default_rng(4)
        fg_prob = rng.random((16, 16))
        probs = ProbabilityMap(np.stack([1 - fg_prob, fg_prob], axis=2))
        areas = []
        for tau in (0.3, 0.5, 0.7, 0.9):
            cfg = PostprocessConfig(threshold=tau, suppress_edges=False,
                                    min_area=0, fill_holes=False, dilation_radius=0)
            inst = extract_instances(probs, None, cfg)
            areas.append(int((inst.data > 0).sum()))
        assert areas == sorted(areas, reverse=True)

    def test_edge_threshold_one_is_noop(self):
        rng = np.random.default_rng(5)
        fg_prob = rng.random((16, 16))
        edge = rng.random((16, 16)) * 0.999
        probs = ProbabilityMap(np.stack([1 - fg_prob, fg_prob], axis=2))
        with_sup = PostprocessConfig(edge_threshold=1.0, min_area=0,
                                     fill_holes=False, dilation_radius=0)
        without = PostprocessConfig(suppress_edges=False, min_area=0,
                                    fill_holes=False, dilation_radius=0)
        a = extract_instances(probs, edge, with_sup)
        b = extract_instances(probs, None, without)
        assert (a.data == b.data).all()

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        fg_prob = rng.random((20, 20))
        edge = rng.random((20, 20))
        probs = ProbabilityMap(np.stack([1 - fg_prob, fg_prob], axis=2))
        cfg = PostprocessConfig()
        a = extract_instances(probs, edge, cfg)
        b = extract_instances(probs, edge, cfg)
        assert (a.data == b.data).all()

    def test_shape_mismatch_rejected(self):
        probs = binary_probs(np.zeros((4, 4), dtype=bool))
        with pytest.raises(ValidationError):
            extract_instances(probs, np.zeros((5, 5)), PostprocessConfig())

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            PostprocessConfig(threshold=0.0)
        with pytest.raises(ValidationError):
            PostprocessConfig(edge_threshold=1.5)
        with pytest.raises(ValidationError):
            PostprocessConfig(min_area=-1)

    def test_output_canonical_and_min_area_respected(self):
        rng = np.random.default_rng(7)
        fg_prob = rng.random((24, 24))
        probs = ProbabilityMap(np.stack([1 - fg_prob, fg_prob], axis=2))
        cfg = PostprocessConfig(threshold=0.6, suppress_edges=False, min_area=3,
                                fill_holes=False, dilation_radius=0)
        inst = extract_instances(probs, None, cfg)
        ids = np.unique(inst.data)
        assert list(ids[ids > 0]) == list(range(1, inst.num_objects + 1))
        counts = np.bincount(inst.data.ravel())[1:]
        assert (counts >= 3).all()
