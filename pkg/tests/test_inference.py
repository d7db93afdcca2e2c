import numpy as np
import pytest
import torch

from atriaseg.errors import ConfigurationError, IntegrityError
from atriaseg.inference import (
    ProbabilityVolume,
    StructuringElement,
    classify_case,
    dilate,
    erode,
    largest_connected_component,
    morphological_close,
    postprocess,
    predict_volume,
    run_case,
    threshold_argmax,
)
from atriaseg.network import ForwardOutput, NetworkConfig, init_parameters
from atriaseg.volume_io import LabelVolume, Volume3D

from oracles import largest_component_bfs

CROSS = StructuringElement.cross()


def label_volume(arr):
    return LabelVolume(voxels=np.asarray(arr, dtype=np.uint8))


def prob_volume(arr):
    return ProbabilityVolume(values=np.asarray(arr, dtype=np.float32))


# ---------------------------------------------------------------------------
# thresholding
# ---------------------------------------------------------------------------

def test_threshold_all_foreground():
    out = threshold_argmax(prob_volume(np.full((2, 2, 2), 0.9)))
    assert out.voxels.all()


def test_threshold_tie_goes_background():
    out = threshold_argmax(prob_volume(np.full((2, 2, 2), 0.5)))
    assert not out.voxels.any()


def test_threshold_elementwise():
    pv = prob_volume(np.array([0.2, 0.6, 0.5, 0.51]).reshape(1, 2, 2))
    out = threshold_argmax(pv)
    assert out.voxels.ravel().tolist() == [0, 1, 0, 1]


def test_probability_volume_validates_range():
    with pytest.raises(IntegrityError):
        prob_volume(np.full((1, 1, 1), 1.5))


# ---------------------------------------------------------------------------
# morphology
# ---------------------------------------------------------------------------

def test_structuring_element_validation():
    bad = np.zeros((3, 3, 3), dtype=bool)
    with pytest.raises(ConfigurationError):
        StructuringElement(bad)  # no center
    assert CROSS.array.sum() == 7  # center + 6 faces
    assert StructuringElement.full().array.all()


def test_dilation_of_single_voxel_is_cross():
    m = np.zeros((3, 3, 3), dtype=np.uint8)
    m[1, 1, 1] = 1
    d = dilate(label_volume(m), CROSS)
    expected = CROSS.array.astype(np.uint8)
    assert np.array_equal(d.voxels, expected)
    # erosion brings back exactly the single voxel: closing is the identity here
    e = erode(d, CROSS, border_value=1)
    back = morphological_close(label_volume(m), CROSS)
    assert np.array_equal(e.voxels, m) or np.array_equal(back.voxels, m)
    assert np.array_equal(back.voxels, m)


def test_closing_fills_punctured_cube():
    m = np.zeros((7, 7, 7), dtype=np.uint8)
    m[1:6, 1:6, 1:6] = 1
    m[3, 3, 3] = 0  # interior hole
    closed = morphological_close(label_volume(m), CROSS)
    assert closed.voxels[3, 3, 3] == 1
    full = m.copy()
    full[3, 3, 3] = 1
    assert np.array_equal(closed.voxels, full)


def test_closing_empty_mask():
    m = label_volume(np.zeros((4, 4, 4)))
    assert not morphological_close(m).voxels.any()


def test_closing_extensive_including_borders():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = (rng.random((6, 6, 6)) < 0.3).astype(np.uint8)
        closed = morphological_close(label_volume(m), CROSS)
        assert np.all(closed.voxels >= m)  # output contains input everywhere


def test_closing_iterations_validated():
    with pytest.raises(ConfigurationError):
        morphological_close(label_volume(np.zeros((2, 2, 2))), CROSS, iterations=0)


# ---------------------------------------------------------------------------
# connected components
# ---------------------------------------------------------------------------

def test_lcc_keeps_bigger_component():
    m = np.zeros((3, 8, 8), dtype=np.uint8)
    m[0, :2, :5] = 1  # 10 voxels
    m[2, 6:, :3] = 1  # 6 voxels
    out = largest_connected_component(label_volume(m))
    assert out.voxels.sum() == 10
    assert out.voxels[0].sum() == 10


def test_lcc_empty_mask():
    out = largest_connected_component(label_volume(np.zeros((3, 3, 3))))
    assert not out.voxels.any()


@pytest.mark.parametrize("connectivity", [6, 26])
def test_lcc_matches_bfs_oracle(connectivity):
    rng = np.random.default_rng(1)
    for _ in range(100):
        m = (rng.random((12, 12, 12)) < rng.uniform(0.1, 0.4)).astype(np.uint8)
        got = largest_connected_component(label_volume(m), connectivity)
        expected = largest_component_bfs(m, connectivity)
        assert np.array_equal(got.voxels, expected)


def test_lcc_single_component_after():
    rng = np.random.default_rng(2)
    from oracles import flood_fill_components

    for _ in range(10):
        m = (rng.random((8, 8, 8)) < 0.3).astype(np.uint8)
        out = largest_connected_component(label_volume(m))
        _, n = flood_fill_components(out.voxels, 6)
        assert n <= 1


def test_lcc_connectivity_validated():
    with pytest.raises(ConfigurationError):
        largest_connected_component(label_volume(np.zeros((2, 2, 2))), connectivity=8)


# ---------------------------------------------------------------------------
# postprocess pipeline
# ---------------------------------------------------------------------------

def blob_probabilities():
    p = np.zeros((8, 16, 16), dtype=np.float32)
    p[2:6, 4:12, 4:12] = 0.9
    return p


def test_postprocess_leaves_clean_blob():
    p = blob_probabilities()
    out = postprocess(prob_volume(p))
    assert np.array_equal(out.voxels, (p > 0.5).astype(np.uint8))


def test_postprocess_removes_distant_speckle():
    p = blob_probabilities()
    p[7, 15, 15] = 0.9
    out = postprocess(prob_volume(p))
    assert out.voxels[7, 15, 15] == 0
    assert out.voxels[3, 8, 8] == 1


def test_postprocess_all_background():
    out = postprocess(prob_volume(np.zeros((4, 4, 4))))
    assert not out.voxels.any()


def test_postprocess_idempotent_on_own_output():
    p = blob_probabilities()
    p[7, 15, 15] = 0.9
    once = postprocess(prob_volume(p))
    again = postprocess(prob_volume(once.voxels.astype(np.float32)))
    assert np.array_equal(once.voxels, again.voxels)


# ---------------------------------------------------------------------------
# network-driven prediction
# ---------------------------------------------------------------------------

NET = NetworkConfig(base_width=2, fc_hidden=8, spp_levels=(1, 2))


def random_volume(shape=(3, 40, 40), seed=0):
    rng = np.random.default_rng(seed)
    return Volume3D(voxels=rng.normal(size=shape).astype(np.float32))


def test_predict_volume_dims_round_trip():
    model = init_parameters(NET, 0)
    vol = random_volume((3, 40, 40))  # pads to 64x64 then crops back
    pv = predict_volume(model, vol)
    assert pv.values.shape == vol.voxels.shape
    assert pv.spacing == vol.spacing
    assert pv.values.min() >= 0.0 and pv.values.max() <= 1.0


def test_ensemble_of_identical_models_equals_single():
    model = init_parameters(NET, 1)
    vol = random_volume(seed=1)
    single = predict_volume(model, vol)
    five = predict_volume([model] * 5, vol)
    assert np.array_equal(single.values, five.values)
    p1, l1 = classify_case(model, vol)
    p5, l5 = classify_case([model] * 5, vol)
    assert p1 == pytest.approx(p5, abs=1e-12)
    assert l1 == l5


def test_ensemble_mean_commutes_with_permutation():
    models = [init_parameters(NET, s) for s in (1, 2, 3)]
    vol = random_volume(seed=2)
    a = predict_volume(models, vol)
    b = predict_volume(models[::-1], vol)
    assert np.allclose(a.values, b.values, atol=1e-12)


def test_probabilities_in_range_fuzz():
    model = init_parameters(NET, 3)
    for seed in range(3):
        vol = random_volume((2, 32, 32), seed=seed)
        pv = predict_volume(model, vol)
        assert pv.values.min() >= 0.0
        assert pv.values.max() <= 1.0


class StubModel:
    """Duck-typed model emitting fixed classification logits per slice."""

    def __init__(self, logits):
        self.logits = list(logits)
        self.calls = 0

    def eval(self):
        return self

    def __call__(self, x):
        n = x.shape[0]
        out = torch.tensor(self.logits[self.calls : self.calls + n], dtype=torch.float32)
        self.calls += n
        seg = torch.zeros(n, 2, x.shape[-2], x.shape[-1])
        return ForwardOutput(seg_logits=seg, class_logit=out)


def test_classify_zero_logits_ties_to_pre():
    vol = random_volume((2, 32, 32))
    prob, label = classify_case(StubModel([0.0, 0.0]), vol)
    assert prob == pytest.approx(0.5, abs=1e-7)
    assert label == "pre"


def test_classify_symmetric_logits_average_to_half():
    vol = random_volume((2, 32, 32))
    prob, label = classify_case(StubModel([2.0, -2.0]), vol)
    # sigmoid(2) + sigmoid(-2) = 1 exactly, so the mean is 0.5 -> pre
    assert prob == pytest.approx(0.5, abs=1e-7)
    assert label == "pre"


def test_classify_positive_mean_is_post():
    vol = random_volume((2, 32, 32))
    prob, label = classify_case(StubModel([3.0, 1.0]), vol)
    assert prob > 0.5
    assert label == "post"


def test_run_case_consistent_with_parts():
    model = init_parameters(NET, 4)
    vol = random_volume(seed=4)
    pv, prob, label = run_case(model, vol)
    assert np.array_equal(pv.values, predict_volume(model, vol).values)
    p2, l2 = classify_case(model, vol)
    assert prob == pytest.approx(p2, abs=1e-12)
    assert label == l2


def test_empty_ensemble_rejected():
    with pytest.raises(ConfigurationError):
        predict_volume([], random_volume())
