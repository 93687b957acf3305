import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from bayeslidar.geometry import Box3D, corners_to_vector
from bayeslidar.nnet import Network
from bayeslidar.proposals import Anchor
from bayeslidar.uncertainty import (
    DEFAULT_PASSES, McSamples, UncertaintyReport, UnsupportedOperationError, aleatoric_variance,
    build_report, corner_groups, epistemic_total_variance, mc_sample, mc_sample_batch, mean_box,
    mutual_information, shannon_entropy, vehicle_prob,
)

LN2 = math.log(2)


def samples(scores, boxes=None, log_vars=None):
    n = len(scores)
    return McSamples(np.asarray(scores, float), np.zeros((n, 24)) if boxes is None else boxes, log_vars)


def test_mc_samples_validation():
    with pytest.raises(ValueError):
        McSamples(np.array([]), np.zeros((0, 24)))
    with pytest.raises(ValueError):
        McSamples(np.array([1.2]), np.zeros((1, 24)))
    with pytest.raises(ValueError):
        McSamples(np.array([0.5, 0.5]), np.zeros((2, 24)), np.zeros((1, 24)))


def test_classification_examples():
    s = samples([0.9, 0.7])
    assert vehicle_prob(s) == pytest.approx(0.8)
    assert shannon_entropy(s) == pytest.approx(-0.8 * math.log(0.8) - 0.2 * math.log(0.2))
    assert shannon_entropy(s) == pytest.approx(0.500402, abs=1e-6)
    h9, h7 = oracles.binary_entropy(0.9), oracles.binary_entropy(0.7)
    assert (h9, h7) == pytest.approx((0.325083, 0.610864), abs=1e-6)
    assert mutual_information(s) == pytest.approx(0.032428, abs=1e-6)
    assert vehicle_prob(samples([0.42])) == 0.42
    assert vehicle_prob(samples([1.0] * 5)) == 1.0


def test_entropy_extremes():
    assert shannon_entropy(samples([0.5])) == pytest.approx(LN2, abs=1e-12)
    assert shannon_entropy(samples([1.0])) == pytest.approx(0.0, abs=2e-6)
    assert shannon_entropy(samples([0.0, 0.0])) == pytest.approx(0.0, abs=2e-6)
    assert mutual_information(samples([0.3, 0.3, 0.3])) == 0.0
    assert mutual_information(samples([1.0, 0.0])) == pytest.approx(LN2, abs=1e-5)


def test_spatial_examples():
    a = np.zeros((2, 24))
    a[1, 0] = 2.0
    s = samples([0.5, 0.5], a)
    assert mean_box(s)[0] == 1.0 and not mean_box(s)[1:].any()
    tv = epistemic_total_variance(s)
    assert tv == pytest.approx((1.0, 1.0, 0.0, 0.0))
    same = samples([0.5] * 3, np.tile(np.arange(24.0), (3, 1)))
    assert mean_box(same) == pytest.approx(np.arange(24.0))
    assert epistemic_total_variance(same) == (0.0, 0.0, 0.0, 0.0)


def test_mean_box_random_set(rng):
    boxes = rng.normal(size=(5, 24))
    ref = oracles.estimators([0.5] * 5, boxes.tolist())["mean_box"]
    assert mean_box(samples([0.5] * 5, boxes)) == pytest.approx(ref, abs=1e-12)


def test_aleatoric_examples():
    box = corners_to_vector(Box3D(10, 0, -1, 4, 2, 1.5).corners())
    al = aleatoric_variance(McSamples(np.ones(3), np.tile(box, (3, 1)), np.zeros((3, 24))))
    assert np.all(al.variance == 1.0)
    assert al.axis_sums == (8.0, 8.0, 8.0)
    assert al.facing_sum == 12.0 and al.occluded_sum == 12.0

    lv = np.zeros((1, 24))
    lv[0, 5] = math.log(4)
    assert aleatoric_variance(McSamples([1.0], box, lv)).variance[5] == pytest.approx(4.0)

    lv2 = np.zeros((2, 24))
    lv2[1, 5] = math.log(4)
    assert aleatoric_variance(McSamples([1.0, 1.0], np.tile(box, (2, 1)), lv2)).variance[5] == pytest.approx(2.0)

    with pytest.raises(UnsupportedOperationError):
        aleatoric_variance(samples([0.5]))


def test_corner_groups():
    # a car ahead of the sensor: its rear face (corners 1, 2, 5, 6) faces the origin
    c = Box3D(20, 0, -1, 4, 2, 1.5).corners()
    assert corner_groups(c) == ((1, 2, 5, 6), (0, 3, 4, 7))
    # all corners equidistant: ties fall to the lower indices
    assert corner_groups(np.zeros((8, 3))) == ((0, 1, 2, 3), (4, 5, 6, 7))


def test_occluded_variance_counts_far_corners():
    c = Box3D(20, 0, -1, 4, 2, 1.5).corners()
    lv = np.zeros((1, 24))
    for k in (0, 3, 4, 7):
        lv[0, [k, 8 + k, 16 + k]] = math.log(2)
    al = aleatoric_variance(McSamples([1.0], corners_to_vector(c), lv))
    assert al.facing == (1, 2, 5, 6)
    assert (al.facing_sum, al.occluded_sum) == pytest.approx((12.0, 24.0))


sample_sets = st.integers(1, 12).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(0, 1)),
    arrays(np.float64, (n, 24), elements=st.floats(-50, 50)),
    arrays(np.float64, (n, 24), elements=st.floats(-8, 8)),
))


@given(sample_sets)
def test_build_report_matches_oracle_and_invariants(data):
    scores, boxes, lv = data
    rep = build_report(McSamples(scores, boxes, lv))
    ref = oracles.estimators(scores.tolist(), boxes.tolist(), lv.tolist())
    assert rep.veh_prob == pytest.approx(ref["veh_prob"], abs=1e-12)
    assert rep.se == pytest.approx(ref["se"], abs=1e-9)
    assert rep.mi == pytest.approx(ref["mi"], abs=1e-9)
    assert rep.epistemic_tv_total == pytest.approx(ref["tv"][0], rel=1e-9, abs=1e-9)
    assert rep.aleatoric_var == pytest.approx(ref["sigma2"], rel=1e-12)
    assert 0 <= rep.mi <= rep.se <= LN2 + 1e-12
    assert rep.epistemic_tv_total >= 0
    assert rep.epistemic_tv_total == pytest.approx(rep.tv_x + rep.tv_y + rep.tv_z)
    assert rep.aleatoric_tv_total == pytest.approx(rep.facing_sum + rep.occluded_sum)
    assert np.all(rep.aleatoric_var > 0)


def test_mc_sampling_passes():
    net = Network(6, (8,), dropout_rate=0.5, rng=0)
    anchor = Anchor(Box3D(15, 0, -1, 3.9, 1.6, 2.5))
    x = np.random.default_rng(0).normal(size=6)
    s = mc_sample(net, x, anchor, rng=np.random.default_rng(1))
    assert s.n == DEFAULT_PASSES == 40
    assert len(np.unique(s.scores)) > 1
    again = mc_sample(net, x, anchor, rng=np.random.default_rng(1))
    assert np.array_equal(s.boxes, again.boxes)

    still = Network(6, (8,), dropout_rate=0.0, rng=0)
    s0 = mc_sample(still, x, anchor, n=7, rng=np.random.default_rng(1))
    assert s0.n == 7 and np.all(s0.boxes == s0.boxes[0])
    det = mc_sample(net, x, anchor, n=1, dropout=False)
    rep = build_report(det)
    assert rep.epistemic_tv_total == 0 and rep.n_passes == 1 and rep.mi == 0.0
    # with zero offsets the sampled boxes decode to the anchor itself
    zero = Network(6, (8,), dropout_rate=0.0, rng=0)
    zero.params["reg.W"][:] = 0
    s1 = mc_sample(zero, x, anchor, n=1)
    assert np.allclose(s1.boxes[0], corners_to_vector(anchor.box.corners()))


def test_batch_sampler_matches_single():
    net = Network(6, (8,), aleatoric=True, dropout_rate=0.0, rng=0)
    anchors = [Anchor(Box3D(15 + k, k, -1, 3.9, 1.6, 2.5)) for k in range(3)]
    x = np.random.default_rng(0).normal(size=(3, 6))
    batch = mc_sample_batch(net, x, anchors, n=4)
    for k in range(3):
        one = mc_sample(net, x[k], anchors[k], n=4)
        assert np.allclose(batch[k].boxes, one.boxes) and np.allclose(batch[k].log_vars, one.log_vars)
    assert mc_sample_batch(net, np.zeros((0, 6)), [], n=4) == []


def test_report_dict_round_trip():
    rep = build_report(McSamples([0.7, 0.9], np.random.default_rng(0).normal(size=(2, 24)), np.zeros((2, 24))))
    back = UncertaintyReport.from_dict(rep.to_dict())
    assert back.se == rep.se and np.array_equal(back.aleatoric_var, rep.aleatoric_var)
    plain = build_report(samples([0.7, 0.9]))
    d = plain.to_dict()
    assert not plain.has_aleatoric
    assert "aleatoric_var" not in d and "facing_sum" not in d
    assert plain.detected and not build_report(samples([0.5])).detected
