import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nucleopipe import instseg, synth
from oracles import bfs_components, brute_edt, same_partition


def ellipse(shape, cy, cx, a, b):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0


def two_ellipses():
    labels = np.zeros((40, 50), dtype=np.int32)
    labels[ellipse(labels.shape, 20, 17, 9, 11)] = 1
    labels[ellipse(labels.shape, 20, 33, 9, 11)] = 2
    return labels


def maps_for(labels):
    semantic = (labels > 0).astype(np.float32)
    edges = synth.edges_from_labels(labels).astype(np.float32)
    return semantic, edges


bool_masks = arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9)))


@settings(max_examples=150, deadline=None)
@given(mask=bool_masks)
def test_edt_matches_brute_force(mask):
    np.testing.assert_allclose(instseg.distance_transform(mask), brute_edt(mask), rtol=1e-12)


@settings(max_examples=150, deadline=None)
@given(mask=bool_masks)
def test_components_match_bfs(mask):
    got = instseg.label_components(mask)
    want, n = bfs_components(mask)
    assert got.max() == n
    assert same_partition(got, want)


def test_remove_small_relabels():
    labels = np.array([[1, 1, 0, 2], [1, 0, 0, 0], [0, 3, 3, 3]])
    out = instseg.remove_small(labels, 3)
    assert out.tolist() == [[1, 1, 0, 0], [1, 0, 0, 0], [0, 2, 2, 2]]


def test_two_overlapping_ellipses_partition_foreground():
    labels = two_ellipses()
    semantic, edges = maps_for(labels)
    out = instseg.segment_instances(semantic, edges)
    assert out.max() == 2
    assert ((out > 0) == (semantic >= 0.5)).all()
    for k in (1, 2):
        assert bfs_components(out == k)[1] == 1


def test_single_and_blank():
    single = ellipse((30, 30), 15, 15, 8, 6).astype(np.int32)
    out = instseg.segment_instances(*maps_for(single))
    assert out.max() == 1 and ((out > 0) == (single > 0)).all()
    blank = np.zeros((20, 20), dtype=np.float32)
    assert instseg.segment_instances(blank, blank).max() == 0


def test_bit_identical_reruns():
    semantic, edges = maps_for(two_ellipses())
    rng = np.random.default_rng(0)
    semantic = np.clip(semantic * 0.8 + rng.random(semantic.shape) * 0.2, 0, 1)
    a = instseg.segment_instances(semantic, edges)
    b = instseg.segment_instances(semantic.copy(), edges.copy())
    assert a.tobytes() == b.tobytes()


def test_ridge_between_symmetric_blobs_is_midline():
    for gap in (5, 6):
        comps = np.zeros((9, 6 + gap), dtype=np.int64)
        comps[2:7, 0:3] = 1
        comps[2:7, 3 + gap :] = 2
        ridge = instseg.ridgelines(comps)
        cols = sorted(set(np.nonzero(ridge)[1].tolist()))
        mid = (2 + 3 + gap) / 2
        # one full-height column, on the midline or half a pixel off it for even gaps
        assert len(cols) == 1 and abs(cols[0] - mid) <= 0.5, (gap, cols)
        assert ridge[:, cols[0]].all()


def test_single_component_has_no_ridge():
    comps = np.zeros((10, 10), dtype=np.int64)
    comps[3:6, 3:6] = 1
    assert not instseg.ridgelines(comps).any()


def test_marker_field_invariants():
    labels = two_ellipses()
    semantic, edges = maps_for(labels)
    cfg = instseg.WatershedConfig()
    markers = instseg.build_markers(semantic, edges, cfg)
    assert markers.count == 2
    assert not (markers.background & (markers.foreground > 0)).any()
    # no background marker touches a foreground marker
    assert not (markers.background & instseg.dilate8(markers.foreground > 0)).any()
    seeds = markers.as_seeds()
    assert set(np.unique(seeds).tolist()) <= {0, 1, 2, 3}


def test_edge_threshold_is_inclusive():
    cfg = instseg.WatershedConfig(edge_threshold=0.3)
    assert instseg.threshold_edges(np.array([[0.29, 0.3, 0.31]]), cfg).tolist() == [[False, True, True]]


def test_min_area_filters_markers():
    semantic = np.zeros((10, 10), dtype=np.float32)
    semantic[1:3, 1:3] = 1
    semantic[5:9, 5:9] = 1
    edges = np.zeros_like(semantic)
    out = instseg.segment_instances(semantic, edges, instseg.WatershedConfig(min_instance_area=5))
    assert out.max() == 1 and out[6, 6] == 1 and out[1, 1] == 0


def test_flood_respects_mask_and_priority():
    surface = np.array([[0.0, 0.5, 0.0]])
    seeds = np.array([[1, 0, 2]])
    # equal priorities: the row-major-first seed claims the middle pixel
    assert instseg.flood(surface, seeds).tolist() == [[1, 1, 2]]
    mask = np.array([[True, False, True]])
    assert instseg.flood(surface, seeds, mask).tolist() == [[1, 0, 2]]


def test_uncontrolled_mode_covers_foreground():
    labels = two_ellipses()
    semantic, edges = maps_for(labels)
    out = instseg.segment_instances(semantic, edges, instseg.WatershedConfig(controlled=False))
    assert ((out > 0) == (semantic >= 0.5)).all()
    assert out.max() >= 1


def test_regional_maxima_plateau():
    values = np.array([[1, 2, 2, 1], [1, 2, 2, 3]], dtype=float)
    mask = np.ones_like(values, dtype=bool)
    assert np.argwhere(instseg.regional_maxima(values, mask)).tolist() == [[1, 3]]


@pytest.mark.parametrize("kwargs", [dict(edge_threshold=1.5), dict(semantic_threshold=-0.1), dict(min_instance_area=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        instseg.WatershedConfig(**kwargs)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        instseg.segment_instances(np.zeros((4, 4)), np.zeros((4, 5)))
