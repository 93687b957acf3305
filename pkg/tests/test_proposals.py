import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayeslidar.bev import BevConfig, BevGrid, encode_bev
from bayeslidar.geometry import Box3D, bev_iou
from bayeslidar.pointcloud import PointCloud
from bayeslidar.proposals import (
    BACKGROUND, IGNORED, POSITIVE, Anchor, AnchorSet, anchor_shapes, decode_box, decode_corners,
    encode_box, footprint_scores, generate_anchors, match_targets, pool_roi, propose,
    proposal_record, read_proposals, write_proposals,
)

SMALL = BevConfig(x_range=(0.0, 20.0), y_range=(-10.0, 10.0), z_range=(-3.5, 0.6))


def test_anchor_shapes():
    shapes = anchor_shapes()
    assert len(shapes) == 9
    assert shapes[0] == pytest.approx((1.6, 1.6))
    l, w = shapes[1]
    assert w == pytest.approx(math.sqrt(256 / 2) * 0.1) and w == pytest.approx(1.131, abs=1e-3)
    assert l == pytest.approx(math.sqrt(512) * 0.1) and l == pytest.approx(2.263, abs=1e-3)
    for (l, w), area in zip(shapes, np.repeat([16**2, 32**2, 48**2], 3)):
        assert l * w == pytest.approx(area * 0.01)


def test_default_lattice():
    a = generate_anchors()
    assert len(a) == 125 * 75 * 9 == 84375
    assert np.allclose(a.centers[:9], [0.4, -29.6, -1.0])
    assert np.allclose(a.centers[9], [0.4, -28.8, -1.0])
    first = a[0]
    assert first.index == 0 and first.box.yaw == 0.0 and first.box.h == 2.5
    assert a[-1].index == len(a) - 1


def test_anchor_set_round_trip():
    a = generate_anchors(SMALL, stride=16)
    b = AnchorSet.from_anchors(a[:20])
    assert np.array_equal(b.centers, a.centers[:20])
    with pytest.raises(ValueError):
        AnchorSet.from_anchors([Anchor(Box3D(0, 0, 0, 1, 1, 1, 0.2))])


def test_encode_identity_and_shift():
    anchor = Anchor(Box3D(10, 2, -1, math.sqrt(2), 1, 1))
    assert anchor.diagonal == pytest.approx(2.0)
    assert np.array_equal(encode_box(anchor.box, anchor), np.zeros(24))
    v = encode_box(Box3D(11, 2, -1, math.sqrt(2), 1, 1), anchor)
    assert v[:8] == pytest.approx(np.full(8, 0.5))
    assert v[8:] == pytest.approx(np.zeros(16), abs=1e-12)


def test_decode_zero_is_anchor():
    anchor = Anchor(Box3D(30, -4, -1, 4, 1.8, 2.5))
    assert np.array_equal(decode_corners(np.zeros(24), anchor), anchor.box.corners())
    _, box = decode_box(np.zeros(24), anchor)
    assert box.center == pytest.approx(anchor.box.center)


boxes = st.builds(
    Box3D, st.floats(1, 90), st.floats(-25, 25), st.floats(-2, 0),
    st.floats(0.5, 6), st.floats(0.5, 3), st.floats(0.5, 3), st.floats(-math.pi, math.pi),
)


@given(boxes, boxes)
def test_encode_decode_round_trip(gt, a):
    anchor = Anchor(Box3D(a.x, a.y, a.z, a.l, a.w, a.h))
    back = decode_corners(encode_box(gt, anchor), anchor)
    assert np.allclose(back, gt.corners(), rtol=0, atol=1e-9)


def _grid(cfg=SMALL, fill=None):
    data = np.zeros((cfg.channels, cfg.rows, cfg.cols))
    if fill is not None:
        data[:] = fill
    return BevGrid(data, cfg)


def test_pool_zero_and_constant():
    a = generate_anchors(SMALL)[4000]
    assert not pool_roi(_grid(), a).any()
    f = pool_roi(_grid(fill=0.37), a)
    assert f.shape == (8 * 8 * 6,)
    assert f == pytest.approx(np.full(f.shape, 0.37))


def test_pool_two_by_two_mean():
    cfg = BevConfig(x_range=(0.0, 1.0), y_range=(0.0, 1.0), resolution=0.1)
    g = _grid(cfg)
    g.data[0, 5, 4:6] = 4.0  # footprint cells (4..5, 4..5) hold {0, 0, 4, 4}
    f = pool_roi(g, Anchor(Box3D(0.5, 0.5, -1, 0.2, 0.2, 1)), G=1)
    assert f[0] == pytest.approx(2.0)
    assert not f[1:].any()


def test_pool_is_channel_major():
    g = _grid()
    for k in range(SMALL.channels):
        g.data[k] = k
    f = pool_roi(g, generate_anchors(SMALL)[9 * (12 * 25 + 12)], G=2).reshape(SMALL.channels, 4)
    assert np.array_equal(f, np.repeat(np.arange(6.0)[:, None], 4, axis=1))


def test_pool_out_of_grid_area_counts_as_zero():
    # footprint rows span x in [-0.4, 1.2): 4 of 16 cell rows are off the grid
    a = Anchor(Box3D(0.4, 0.0, -1, 1.6, 1.6, 2.5))
    f = pool_roi(_grid(fill=1.0), a, G=1)
    assert f == pytest.approx(np.full(6, 12 / 16))
    with pytest.raises(ValueError):
        pool_roi(_grid(), Anchor(Box3D(-5.0, 0.0, -1, 1.6, 1.6, 2.5)))


def _brute_scores(grid, anchors):
    cfg = grid.cfg
    xc = cfg.x_range[0] + (np.arange(cfg.rows) + 0.5) * cfg.resolution
    yc = cfg.y_range[0] + (np.arange(cfg.cols) + 0.5) * cfg.resolution
    out = []
    for a in anchors:
        b = a.box
        rm = (xc >= b.x - b.l / 2) & (xc < b.x + b.l / 2)
        cm = (yc >= b.y - b.w / 2) & (yc < b.y + b.w / 2)
        out.append(grid.density[np.ix_(rm, cm)].sum())
    return np.array(out)


def _cluster(x, y, n=40, seed=0):
    r = np.random.default_rng(seed)
    return np.column_stack([x + r.uniform(-0.15, 0.15, n), y + r.uniform(-0.15, 0.15, n),
                            np.full(n, -1.0), np.full(n, 0.5)])


def test_scores_match_brute_force(rng):
    pts = np.vstack([_cluster(5.3, -2.1), _cluster(12.0, 4.4, 80, 1), _cluster(17.9, -9.5, 10, 2)])
    grid = encode_bev(PointCloud(pts), SMALL)
    anchors = list(generate_anchors(SMALL))
    sub = [anchors[i] for i in rng.choice(len(anchors), 800, replace=False)]
    assert footprint_scores(grid, sub) == pytest.approx(_brute_scores(grid, sub), abs=1e-9)


def test_propose_empty_grid():
    assert propose(_grid(), generate_anchors(SMALL)) == []


def test_single_cluster_top_anchor_covers_it():
    grid = encode_bev(PointCloud(_cluster(7.05, 3.05)), SMALL)
    best = propose(grid, generate_anchors(SMALL), top_k=1)[0]
    assert best.box.contains(np.array([[7.05, 3.05, -1.0]]))[0]


def test_equal_clusters_tie_break():
    # stride 16 with the 1.6 m square anchor tiles the grid, so each cluster
    # falls in exactly one anchor and the two scores tie exactly
    lattice = generate_anchors(SMALL, stride=16)
    squares = [a for a in lattice if a.box.l == a.box.w == pytest.approx(1.6)]
    pts = np.vstack([_cluster(12.0, 2.4, seed=3), _cluster(4.0, -5.6, seed=3) + [0, 0, 0, 0]])
    pts[40:, :2] = pts[:40, :2] + [-8.0, -8.0]
    grid = encode_bev(PointCloud(pts), SMALL)
    got = propose(grid, squares, top_k=2)
    scores = _brute_scores(grid, squares)
    oracle = sorted(range(len(squares)), key=lambda i: (-scores[i], i))[:2]
    assert [a.index for a in got] == [squares[i].index for i in oracle]
    assert scores[oracle[0]] == scores[oracle[1]] > 0
    assert got[0].index < got[1].index


def test_match_targets_labels():
    gt = Box3D(10, 0, -1, 2, 2, 1.5)
    a_same = Anchor(gt)
    a_far = Anchor(Box3D(30, 0, -1, 2, 2, 1.5))
    a_mid = Anchor(Box3D(10 + 0.817, 0, -1, 2, 2, 1.5))
    assert bev_iou(a_mid.box, gt) == pytest.approx(0.42, abs=2e-3)
    t = match_targets([a_same, a_far, a_mid], [gt])
    assert [x.label for x in t] == [POSITIVE, BACKGROUND, IGNORED]
    assert np.array_equal(t[0].offsets, np.zeros(24))
    assert t[1].offsets is None and t[2].offsets is None


def test_every_gt_claims_its_best_anchor():
    gt = Box3D(10, 0, -1, 4, 2, 1.5)
    weak = Anchor(Box3D(11.5, 0.5, -1, 2, 2, 2.5))
    assert bev_iou(weak.box, gt) < 0.35
    (t,) = match_targets([weak], [gt])
    assert t.label == POSITIVE
    assert np.allclose(decode_corners(t.offsets, weak), gt.corners())
    assert match_targets([weak], [])[0].label == BACKGROUND
    with pytest.raises(ValueError):
        match_targets([weak], [gt], pos_iou=0.3, neg_iou=0.4)


def test_proposal_jsonl_round_trip(tmp_path):
    a = Anchor(Box3D(10, 1, -1, 4, 2, 2.5), 7)
    recs = [proposal_record("s0", a, 0.9, np.arange(24) * 0.1, np.zeros(24)), proposal_record("s0", a, 0.2, np.zeros(24))]
    write_proposals(tmp_path / "p.jsonl", recs)
    back = read_proposals(tmp_path / "p.jsonl")
    assert [r["anchor"].box for r in back] == [a.box, a.box]
    for r, ref in zip(back, recs):
        assert {k: v for k, v in r.items() if k != "anchor"} == {k: v for k, v in ref.items() if k != "anchor"}
    (tmp_path / "bad.jsonl").write_text('{"scene_id": "s", "anchor": {}, "score": 1}\n')
    with pytest.raises(ValueError, match="offsets"):
        read_proposals(tmp_path / "bad.jsonl")
