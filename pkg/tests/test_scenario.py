import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dreampast.scenario import (
    BACKGROUND,
    SHAPES,
    CorpusSpec,
    LabelSpace,
    ScenarioSpec,
    build_scenario,
    channel_mean_histogram,
    class_name,
    generate_corpus,
    histogram_distance,
    load_corpus,
    load_manifest,
    load_scenario,
    relabel_mask,
    save_corpus,
    save_scenario,
    shape_mask,
    split_validation,
)


@pytest.fixture(scope="module")
def small():
    return generate_corpus(CorpusSpec(num_classes=5, images_per_class=6, seed=2))


def test_corpus_is_deterministic():
    spec = CorpusSpec(num_classes=4, images_per_class=3, seed=11)
    a, b = generate_corpus(spec), generate_corpus(spec)
    for x, y in zip(a, b):
        assert x.id == y.id
        np.testing.assert_array_equal(x.pixels, y.pixels)
        np.testing.assert_array_equal(x.mask, y.mask)
    c = generate_corpus(CorpusSpec(num_classes=4, images_per_class=3, seed=12))
    assert not np.array_equal(a[0].pixels, c[0].pixels)


def test_corpus_contents(small):
    assert len(small) == 30
    for k, item in enumerate(small):
        assert item.pixels.shape == (64, 64, 3) and item.pixels.dtype == np.float32
        assert item.mask.shape == (64, 64) and item.mask.dtype == np.uint8
        assert 0.0 <= item.pixels.min() and item.pixels.max() <= 1.0
        assert item.classes <= set(range(1, 6))
        # the primary shape is drawn last, so it is never fully covered
        assert (k % 5) + 1 in item.classes
    assert len({it.id for it in small}) == len(small)


def test_class_names():
    assert class_name(BACKGROUND) == "background"
    assert [class_name(c) for c in range(1, len(SHAPES) + 1)] == list(SHAPES)


@pytest.mark.parametrize("name", SHAPES)
def test_shape_masks_are_compact(name):
    v, u = np.mgrid[-1:1:64j, -1:1:64j]
    m = shape_mask(name, u, v, 0.6)
    assert 0.02 < m.mean() < 0.6
    assert not m[0].any() and not m[-1].any()


@pytest.mark.parametrize(
    "spec",
    [
        CorpusSpec(style="watercolor"),
        CorpusSpec(num_classes=1),
        CorpusSpec(num_classes=len(SHAPES) + 1),
        CorpusSpec(image_size=(16, 16)),
        CorpusSpec(images_per_class=-1),
    ],
)
def test_invalid_corpus_spec(spec):
    with pytest.raises(ValueError):
        generate_corpus(spec)


def test_styles_are_shifted():
    kw = dict(num_classes=8, images_per_class=20, seed=7)
    pre = [x.pixels for x in generate_corpus(CorpusSpec(style="pretrain", **kw))]
    down = [x.pixels for x in generate_corpus(CorpusSpec(style="downstream", **kw))]
    down2 = [x.pixels for x in generate_corpus(CorpusSpec(style="downstream", **{**kw, "seed": 8}))]
    shift = histogram_distance(pre, down)
    assert shift > 1.0
    assert histogram_distance(down, down2) < 0.3 * shift


def test_histogram_hand_case():
    a = np.zeros((2, 2, 3))
    b = np.ones((2, 2, 3)) * 0.55
    h = channel_mean_histogram([a, b], bins=10)
    assert h.shape == (3, 10)
    np.testing.assert_allclose(h[:, 0], 0.5)
    np.testing.assert_allclose(h[:, 5], 0.5)
    assert histogram_distance([a], [a]) == 0.0
    assert histogram_distance([a], [b]) == pytest.approx(2.0)


def test_label_space_4_1():
    ls = ScenarioSpec(4, 1, 2).label_space(5)
    assert ls.base_classes == (1, 2, 3, 4)
    assert ls.step_classes == ((1, 2, 3, 4), (5,))
    assert ls.classes_upto(1) == [1, 2, 3, 4]
    assert ls.classes_upto(2) == [1, 2, 3, 4, 5]
    assert ls.vocabulary == [1, 2, 3, 4, 5]
    assert LabelSpace.from_dict(ls.to_dict()) == ls


def test_label_space_errors():
    with pytest.raises(ValueError):
        ScenarioSpec(4, 1, 3).label_space(5)
    with pytest.raises(ValueError):
        ScenarioSpec(2, 1, 2, class_order=(1, 1, 2)).label_space(3)
    with pytest.raises(ValueError):
        LabelSpace(base_classes=(1, 2), step_classes=((1, 2), (2,)))


def test_class_order_is_respected():
    ls = ScenarioSpec(2, 1, 3, class_order=(3, 1, 2, 4)).label_space(4)
    assert ls.step_classes == ((3, 1), (2,), (4,))


def test_relabel_mask():
    m = np.array([[0, 1, 2], [3, 2, 1]], dtype=np.uint8)
    np.testing.assert_array_equal(relabel_mask(m, [2]), [[0, 0, 2], [0, 2, 0]])


def test_overlapped_slicing(small):
    ls = ScenarioSpec(3, 1, 3).label_space(5)
    steps = build_scenario(small, ls)
    assert len(steps) == 3
    for t, data in enumerate(steps):
        cls = set(ls.step_classes[t])
        for item in data:
            present = set(np.unique(item.mask)) - {0}
            assert present and present <= cls
        # every image containing a step class is included
        expect = [x.id for x in small if cls & x.classes]
        assert [x.id for x in data] == expect


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 0.5), st.integers(0, 1000))
def test_validation_split_is_disjoint_and_per_class(fraction, seed):
    corpus = generate_corpus(CorpusSpec(num_classes=3, images_per_class=5, seed=0))
    train, val = split_validation(corpus, fraction, seed)
    ids_t, ids_v = {x.id for x in train}, {x.id for x in val}
    assert not ids_t & ids_v
    assert len(ids_t | ids_v) == len(corpus)
    for c in {x.dominant_class for x in corpus}:
        n = sum(x.dominant_class == c for x in corpus)
        assert sum(x.dominant_class == c for x in val) == round(fraction * n)


def test_corpus_roundtrip(tmp_path, small):
    spec = CorpusSpec(num_classes=5, images_per_class=6, seed=2)
    out = save_corpus(small, tmp_path / "c" / "nested", spec)
    manifest = load_manifest(out)
    assert manifest["style"] == "downstream"
    assert manifest["spec"] == spec.to_dict()
    assert manifest["class_names"]["1"] == "circle"
    back = load_corpus(out)
    assert [x.id for x in back] == [x.id for x in small]
    for x, y in zip(back, small):
        np.testing.assert_array_equal(x.pixels, y.pixels)
        np.testing.assert_array_equal(x.mask, y.mask)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path)


def test_scenario_roundtrip(tmp_path):
    sc = ScenarioSpec(4, 1, 2, seed=3)
    save_scenario(sc, sc.label_space(5), tmp_path / "s.json")
    sc2, ls2 = load_scenario(tmp_path / "s.json")
    assert sc2 == ScenarioSpec.from_dict(json.loads((tmp_path / "s.json").read_text())["scenario"])
    assert ls2 == sc.label_space(5)
