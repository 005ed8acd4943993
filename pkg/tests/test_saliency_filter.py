import cv2
import numpy as np
import pytest

from salient_odometry.errors import ConfigurationError, InputError
from salient_odometry.saliency_filter import (
    CEILING_CLASS,
    FLOOR_CLASS,
    WALL_CLASS,
    ClassWeights,
    SaliencyMap,
    SemanticMap,
    class_median_smooth,
    filter_saliency,
    load_class_weights,
    load_saliency_map,
    load_semantic_map,
    parse_class_weights,
    weight_saliency,
)


def reference_filter(saliency, labels, weights):
    """Two loops over the pixels: weight each one, then take its class median."""
    height, width = saliency.shape
    weighted = np.zeros_like(saliency)
    for y in range(height):
        for x in range(width):
            weighted[y, x] = min(1.0, max(0.0, weights[labels[y, x]] * saliency[y, x]))
    members = {}
    for y in range(height):
        for x in range(width):
            members.setdefault(labels[y, x], []).append(weighted[y, x])
    result = np.zeros_like(saliency)
    for y in range(height):
        for x in range(width):
            result[y, x] = np.median(members[labels[y, x]])
    return result


def test_weighting_by_hand():
    sal = SaliencyMap(np.array([[0.2, 0.4], [0.6, 0.8]]))
    sem = SemanticMap(np.array([[0, 0], [1, 1]]))
    weighted = weight_saliency(sal, sem, ClassWeights({0: 0.5, 1: 1.0}))
    assert np.allclose(weighted.values, [[0.1, 0.2], [0.6, 0.8]])


def test_unit_weights_are_identity(rng):
    sal = SaliencyMap(rng.uniform(size=(8, 8)))
    sem = SemanticMap(rng.integers(0, 3, size=(8, 8)))
    weighted = weight_saliency(sal, sem, ClassWeights({0: 1.0, 1: 1.0, 2: 1.0}))
    assert np.array_equal(weighted.values, sal.values)


def test_zero_wall_weight_clears_walls():
    labels = np.array([[WALL_CLASS, 7], [WALL_CLASS, 7]])
    sal = SaliencyMap(np.full((2, 2), 0.9))
    weighted = weight_saliency(sal, SemanticMap(labels), ClassWeights({WALL_CLASS: 0.0, 7: 1.0}))
    assert np.all(weighted.values[labels == WALL_CLASS] == 0.0)
    assert np.all(weighted.values[labels == 7] == 0.9)


def test_weights_above_one_clamp():
    sal = SaliencyMap(np.array([[0.6, 0.2]]))
    sem = SemanticMap(np.array([[0, 0]]))
    weighted = weight_saliency(sal, sem, ClassWeights({0: 2.0}))
    assert np.allclose(weighted.values, [[1.0, 0.4]])


def test_even_count_median():
    sal = SaliencyMap(np.array([[0.1, 0.2], [0.3, 0.9]]))
    smoothed = class_median_smooth(sal, SemanticMap.single_class(2, 2))
    assert np.allclose(smoothed.values, 0.25)


def test_per_class_median():
    sal = SaliencyMap(np.array([[0.1, 0.5, 0.9, 0.4]]))
    sem = SemanticMap(np.array([[0, 0, 0, 1]]))
    smoothed = class_median_smooth(sal, sem)
    assert np.allclose(smoothed.values, [[0.5, 0.5, 0.5, 0.4]])


def test_uniform_saliency_is_fixed_point(rng):
    sal = SaliencyMap(np.full((6, 9), 0.5))
    sem = SemanticMap(rng.integers(0, 4, size=(6, 9)))
    result = filter_saliency(sal, sem, ClassWeights({c: 1.0 for c in range(4)}))
    assert np.allclose(result.values, 0.5)


def test_zero_weights_annihilate(rng):
    sal = SaliencyMap(rng.uniform(size=(6, 9)))
    sem = SemanticMap(rng.integers(0, 4, size=(6, 9)))
    result = filter_saliency(sal, sem, ClassWeights({c: 0.0 for c in range(4)}))
    assert np.all(result.values == 0.0)


def test_filter_matches_pixel_loop_reference():
    generator = np.random.default_rng(2024)
    for _ in range(50):
        height, width = generator.integers(1, 65, size=2)
        classes = int(generator.integers(1, 9))
        saliency = generator.uniform(size=(height, width))
        labels = generator.integers(0, classes, size=(height, width))
        weights = {c: float(generator.uniform(0.0, 1.5)) for c in range(classes)}

        sem = SemanticMap(labels)
        result = filter_saliency(SaliencyMap(saliency), sem, ClassWeights(weights))
        assert np.array_equal(result.values, reference_filter(saliency, labels, weights))

        # one value per class
        for c in np.unique(labels):
            assert len(np.unique(result.values[labels == c])) == 1
        # smoothing twice is smoothing once
        assert np.array_equal(class_median_smooth(result, sem).values, result.values)
        assert result.values.min() >= 0.0 and result.values.max() <= 1.0


def test_raising_a_weight_never_lowers_its_class(rng):
    saliency = SaliencyMap(rng.uniform(size=(10, 10)))
    labels = rng.integers(0, 3, size=(10, 10))
    sem = SemanticMap(labels)
    low = filter_saliency(saliency, sem, ClassWeights({0: 0.2, 1: 0.5, 2: 1.0}))
    high = filter_saliency(saliency, sem, ClassWeights({0: 0.6, 1: 0.5, 2: 1.0}))
    assert np.all(high.values[labels == 0] >= low.values[labels == 0])
    assert np.array_equal(high.values[labels != 0], low.values[labels != 0])


def test_dimension_mismatch():
    with pytest.raises(InputError):
        filter_saliency(SaliencyMap(np.zeros((2, 3))), SemanticMap.single_class(3, 2), ClassWeights())


def test_out_of_range_saliency_rejected():
    with pytest.raises(InputError):
        SaliencyMap(np.array([[1.5]]))


def test_unlisted_class_uses_default(caplog):
    weights = ClassWeights({0: 0.5}, default=1.0)
    assert weights.weight_for(9) == 1.0
    assert "no weight" in caplog.text


def test_default_indoor_weights():
    weights = ClassWeights.default_indoor()
    for c in (WALL_CLASS, FLOOR_CLASS, CEILING_CLASS):
        assert weights.weight_for(c) == pytest.approx(0.1)
    assert weights.weight_for(64) == 1.0


def test_default_indoor_custom_default():
    weights = ClassWeights.default_indoor(weight=0.2, default=0.0)
    assert weights.weight_for(WALL_CLASS) == pytest.approx(0.2)
    assert weights.weight_for(64) == 0.0
    assert not hasattr(ClassWeights, "unit")


def test_negative_weight_rejected():
    with pytest.raises(ConfigurationError):
        ClassWeights({0: -0.1})


def test_parse_class_weights_file(tmp_path):
    text = "# indoor weights\n0 0.1\n3 0.2  # floor\n\n5 0.3\n"
    path = tmp_path / "weights.txt"
    path.write_text(text)
    weights = load_class_weights(path)
    assert weights.weights == {0: 0.1, 3: 0.2, 5: 0.3}
    with pytest.raises(ConfigurationError):
        parse_class_weights("0 0.1 extra")


def test_map_loaders(tmp_path):
    saliency = np.array([[0, 51], [255, 102]], dtype=np.uint8)
    labels = np.array([[0, 3], [5, 300]], dtype=np.uint16)
    cv2.imwrite(str(tmp_path / "sal.png"), saliency)
    cv2.imwrite(str(tmp_path / "sem.png"), labels)
    loaded = load_saliency_map(tmp_path / "sal.png")
    assert np.allclose(loaded.values, saliency / 255.0)
    semantic = load_semantic_map(tmp_path / "sem.png")
    assert semantic.labels.tolist() == [[0, 3], [5, 300]]
    with pytest.raises(ConfigurationError):
        load_saliency_map(tmp_path / "missing.png")
