import numpy as np
import pytest

from dilseg.autodiff import same_padding
from dilseg.model import Model, init_model
from dilseg.autodiff.tensor import Tensor
from dilseg.netspec import build_spec, parse_layer, preset, preset_names
from dilseg.rf import (
    ERFMap,
    erf_map,
    footprint_1d,
    gradient_footprint_box,
    grid_score,
    input_footprint,
    pyramid_overlap,
    rf_box,
    theoretical_rf,
)

from oracles import footprint_by_dilation


def convs(*pairs):
    """Layer list from (k, d) pairs."""
    return [parse_layer(f"conv-n1-k{k}-d{d}") for k, d in pairs]


def test_single_layer_rf():
    assert theoretical_rf(convs((3, 1))).final_rf == 3
    assert theoretical_rf(convs((3, 2))).final_rf == 5


def test_front_s_d_rf_is_61():
    report = theoretical_rf(preset("front-s-d"))
    assert report.final_rf == 61
    assert report.grid_period == 4
    assert report.format_table().endswith("final RF: 61")
    # front-end alone is 37; the k=7, r=4 head conv adds 24
    front = theoretical_rf(preset("front-s-d").front)
    assert front.final_rf == 37


def test_rf_monotone_and_jump_is_stride_product():
    for name in preset_names():
        rep = theoretical_rf(preset(name))
        rfs = [l.rf for l in rep.layers]
        assert rfs == sorted(rfs)
        pools = 0
        for layer, rec in zip(preset(name).layers, rep.layers):
            if layer.kind == "maxpool":
                pools += 1
            if layer.kind == "deconv":
                pools = 0
            assert rec.jump == 2 ** pools


def test_footprint_examples():
    u = 10
    assert footprint_1d(convs((2, 2)), u) == {u, u + 2}
    assert footprint_1d(convs((3, 1)), u) == {u - 1, u, u + 1}
    assert footprint_1d(convs((2, 2), (2, 3)), u) == {u, u + 2, u + 4, u + 6}


def test_footprint_matches_offset_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pairs = [(int(rng.integers(1, 5)), int(rng.integers(1, 4))) for _ in range(int(rng.integers(1, 5)))]
        layers = convs(*pairs)
        offsets = []
        for k, d in pairs:
            r = 2 ** (d - 1)
            before = same_padding(k, r)[0]
            offsets.append([i * r - before for i in range(k)])
        assert footprint_1d(layers, 0) == footprint_by_dilation(offsets, 0)


def test_footprint_width_equals_rf_for_presets():
    for name in preset_names():
        spec = preset(name)
        rf = theoretical_rf(spec).final_rf
        fp = footprint_1d(spec, 400)
        assert max(fp) - min(fp) + 1 == rf, name


def test_input_footprint_2d_and_errors():
    spec = build_spec("t", ["conv-n2-k3-d2"], [], ["conv-n2-k1-d1"], input_patch=9)
    fp = input_footprint(spec, (4, 4))
    assert fp == {(y, x) for y in (2, 4, 6) for x in (2, 4, 6)}
    corner = input_footprint(spec, (0, 0))
    assert corner == {(0, 0), (0, 2), (2, 0), (2, 2)}
    with pytest.raises(ValueError):
        input_footprint(spec, (9, 0))


def test_pyramid_overlap_examples():
    assert pyramid_overlap(convs((2, 2))) == 0.0
    assert pyramid_overlap(convs((3, 1))) == 0.5


def test_overlap_non_increasing_in_rate():
    for k in (2, 3, 5):
        vals = [pyramid_overlap(convs((k, d))) for d in range(1, 6)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert all(pyramid_overlap(convs((2, d))) == 0.0 for d in range(2, 6))


def test_lfe_increases_overlap():
    for size in ("s", "l"):
        base = preset(f"front-{size}-d")
        with_lfe = preset(f"front-{size}-d-lfe")
        assert pyramid_overlap(list(base.front) + list(with_lfe.lfe)) > pyramid_overlap(base.front)
        assert pyramid_overlap(with_lfe) >= pyramid_overlap(base)


def test_pyramid_overlap_rejects_pooling():
    with pytest.raises(ValueError):
        pyramid_overlap(preset("front-s"))


def test_rf_box_centre():
    box = rf_box(preset("front-s-d"), (38, 38), 76)
    assert box == (8, 68, 8, 68)


# -- effective receptive fields --------------------------------------------


def _one_layer(weight):
    spec = build_spec("one", [], [], ["conv-n2-k3-d1"], input_patch=9)
    w = np.zeros((2, 3, 3, 3))
    w[1] = weight
    params = {"head.0.weight": Tensor(w), "head.0.bias": Tensor(np.zeros(2))}
    return Model(spec, params)


def test_erf_identity_kernel_is_single_pixel():
    w = np.zeros((3, 3, 3))
    w[:, 1, 1] = 1.0
    x = np.random.default_rng(0).normal(size=(4, 3, 9, 9))
    erf = erf_map(_one_layer(w), x)
    assert erf.support_box() == (4, 4, 4, 4)
    assert np.count_nonzero(erf.values) == 1


def test_erf_uniform_kernel_is_uniform_3x3_for_linear_unit():
    # with the class-0 logit fixed at zero, d p1 / d z1 = p1 (1 - p1); scaling is uniform
    w = np.ones((3, 3, 3))
    x = np.zeros((1, 3, 9, 9))
    erf = erf_map(_one_layer(w), x)
    block = erf.values[3:6, 3:6]
    np.testing.assert_allclose(block, block[0, 0])
    assert block[0, 0] > 0
    assert np.count_nonzero(erf.values) == 9
    np.testing.assert_allclose(erf.normalized.max(), 1.0)


def test_erf_restricted_equals_full():
    model = init_model(preset("front-s-d", "micro"), seed=3)
    x = np.random.default_rng(4).uniform(size=(3, 3, 76, 76)).astype(np.float32)
    a = erf_map(model, x, restrict=True)
    b = erf_map(model, x, restrict=False)
    np.testing.assert_allclose(a.values, b.values, rtol=1e-5, atol=1e-12)


def test_erf_errors():
    with pytest.raises(ValueError):
        erf_map(init_model(preset("front-s-d", "micro")), np.zeros((0, 3, 76, 76)))


def test_grid_score_examples():
    assert grid_score(np.ones((61, 61)), 4) == 0.0
    lattice = np.zeros((61, 61))
    lattice[np.ix_((np.arange(61) - 30) % 4 == 0, (np.arange(61) - 30) % 4 == 0)] = 1.0
    assert grid_score(lattice, 4) == 1.0
    assert grid_score(ERFMap(lattice, 1, 1.0), 4) == 1.0
    with pytest.raises(ValueError):
        grid_score(np.zeros((5, 5)), 4)
    with pytest.raises(ValueError):
        grid_score(np.ones((5, 5)), 1)


def test_grid_score_of_iid_noise_is_small():
    rng = np.random.default_rng(0)
    scores = [grid_score(rng.uniform(size=(61, 61)), 4) for _ in range(100)]
    assert abs(np.mean(scores)) <= 0.05


@pytest.mark.parametrize("name", ["front-s", "front-s-d", "front-s-d-lfe", "front-s-d-large"])
def test_gradient_footprint_matches_theoretical_rf(name):
    spec = preset(name, "micro")
    rf = theoretical_rf(spec).final_rf
    extent = rf + 9 + (rf % 2 == 0)
    y0, y1, x0, x1 = gradient_footprint_box(init_model(spec), extent)
    assert y1 - y0 + 1 == rf and x1 - x0 + 1 == rf


def test_windowed_and_full_footprint_oracles_agree():
    model = init_model(preset("front-s-d-lfe", "micro"))
    assert gradient_footprint_box(model, 107, restrict=True) == gradient_footprint_box(model, 107, restrict=False)
