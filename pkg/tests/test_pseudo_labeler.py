"""Pseudo-label strategies: intersection oracle, top-p oracle, invariants."""

import numpy as np
import pytest

from gzlss import augmentation as aug
from gzlss import pseudo_labeler as pl
from gzlss.label_space import build_label_space, make_embedding_table
from gzlss.model import forward_backbone, init_backbone, project_probs


def _brute_intersect(label_grids):
    """Reference: per-pixel all-equal loop."""
    out = np.zeros_like(label_grids[0])
    n, m = out.shape
    for i in range(n):
        for j in range(m):
            vals = {g[i, j] for g in label_grids}
            if len(vals) == 1:
                out[i, j] = label_grids[0][i, j]
    return out


def test_parse_strategy_grammar():
    assert pl.parse_strategy("strict") == ("strict", 0.0)
    assert pl.parse_strategy("raw_st") == ("raw_st", 0.0)
    assert pl.parse_strategy("topp:30") == ("top_p", 30.0)
    assert pl.parse_strategy("topp:2.5") == ("top_p", 2.5)
    for bad in ("hard", "topp:", "topp:-1", "topp:101", "strict "):
        if bad == "strict ":
            assert pl.parse_strategy(bad)[0] == "strict"  # whitespace tolerated
            continue
        with pytest.raises(ValueError):
            pl.parse_strategy(bad)


def test_unlabeled_pixels():
    mask = np.array([[0, 1], [2, 0]])
    np.testing.assert_array_equal(
        pl.unlabeled_pixels(mask), [[True, False], [False, True]]
    )


def test_intersect_matches_brute_force():
    rng = np.random.default_rng(31)
    for _ in range(300):
        n, m = rng.integers(1, 9, size=2)
        k = int(rng.integers(1, 5))
        grids = [rng.integers(0, 4, size=(n, m)) for _ in range(k)]
        masks = [pl.PseudoMask(g, "hard", (f"v{i}",)) for i, g in enumerate(grids)]
        got = pl.consistency_intersect(masks)
        np.testing.assert_array_equal(got.labels, _brute_intersect(grids))
        assert got.spec_names == tuple(f"v{i}" for i in range(k))


def test_intersect_shrinks_and_ignores_order():
    rng = np.random.default_rng(32)
    for _ in range(100):
        grids = [rng.integers(0, 3, size=(5, 5)) for _ in range(3)]
        masks = [pl.PseudoMask(g, "hard", ()) for g in grids]
        full = pl.consistency_intersect(masks)
        sub = pl.consistency_intersect(masks[:2])
        # more views can only remove labels
        assert np.all((full.labels == 0) | (full.labels == sub.labels))
        perm = pl.consistency_intersect(masks[::-1])
        np.testing.assert_array_equal(full.labels, perm.labels)


def test_intersect_rejects_mismatched_shapes():
    a = pl.PseudoMask(np.zeros((2, 2), dtype=int), "hard", ())
    b = pl.PseudoMask(np.zeros((2, 3), dtype=int), "hard", ())
    with pytest.raises(ValueError):
        pl.consistency_intersect([a, b])
    with pytest.raises(ValueError):
        pl.consistency_intersect([])


def _setup(rng, n=6, m=7):
    space = build_label_space([1, 2], [3, 4, 5])
    vecs = rng.standard_normal((5, 4))
    table = make_embedding_table({c: vecs[c - 1] for c in space.all_ids})
    params = init_backbone(3, 4, rng=rng)
    image = rng.standard_normal((3, n, m))
    y = rng.integers(0, 3, size=(n, m))
    return space, table, params, image, y


SPECS = [aug.identity_spec(), aug.mirror_spec(), aug.scale_spec(2)]


def test_generate_safety_invariants():
    """Only unseen ids, and never on a pixel that already has a real label."""
    rng = np.random.default_rng(33)
    for strategy in ("strict", "raw_st", "topp:40"):
        space, table, params, image, y = _setup(rng)
        pm = pl.generate(strategy, params, image, y, SPECS, table, space)
        assert set(np.unique(pm.labels)) <= {0, *space.unseen_ids}
        assert np.all(pm.labels[y > 0] == 0)


def test_generate_requires_identity_first():
    rng = np.random.default_rng(34)
    space, table, params, image, y = _setup(rng)
    with pytest.raises(ValueError):
        pl.generate("strict", params, image, y, [aug.mirror_spec()], table, space)


def test_raw_st_equals_strict_with_identity_only():
    rng = np.random.default_rng(35)
    for _ in range(5):
        space, table, params, image, y = _setup(rng)
        raw = pl.generate("raw_st", params, image, y, SPECS, table, space)
        strict1 = pl.generate("strict", params, image, y, [aug.identity_spec()], table, space)
        np.testing.assert_array_equal(raw.labels, strict1.labels)


def test_strict_subset_of_raw():
    rng = np.random.default_rng(36)
    for _ in range(5):
        space, table, params, image, y = _setup(rng)
        raw = pl.generate("raw_st", params, image, y, SPECS, table, space)
        strict = pl.generate("strict", params, image, y, SPECS, table, space)
        keep = strict.labels > 0
        np.testing.assert_array_equal(strict.labels[keep], raw.labels[keep])


def test_top_p_matches_sort_and_cut():
    """Drop count and drop set match an explicit sort over confidences."""
    rng = np.random.default_rng(37)
    for p in (0.0, 25.0, 50.0, 100.0):
        space, table, params, image, y = _setup(rng)
        pm = pl.generate(f"topp:{p}", params, image, y, SPECS, table, space)
        unlabeled = pl.unlabeled_pixels(y)
        n_i = int(unlabeled.sum())
        want_kept = n_i - int(np.floor(p * n_i / 100.0))
        assert int((pm.labels > 0).sum()) == want_kept

        # reference: rank I pixels by assigned-label prob under the full softmax
        feat = forward_backbone(image, params)
        probs = project_probs(feat, table, space.all_ids)
        full = pl.generate("topp:0", params, image, y, SPECS, table, space)
        conf = np.zeros(unlabeled.shape)
        for i, j in zip(*np.nonzero(unlabeled)):
            conf[i, j] = probs.values[i, j, full.labels[i, j] - 1]
        flat_i = np.flatnonzero(unlabeled.ravel())
        order = np.argsort(conf.ravel()[flat_i], kind="stable")
        dropped = set(flat_i[order[: n_i - want_kept]].tolist())
        got_dropped = {
            int(k) for k in flat_i if pm.labels.ravel()[k] == 0
        }
        assert got_dropped == dropped


def test_top_p_hundred_drops_everything():
    rng = np.random.default_rng(38)
    space, table, params, image, y = _setup(rng)
    pm = pl.generate("topp:100", params, image, y, SPECS, table, space)
    assert np.all(pm.labels == 0)


def test_provenance_recorded():
    rng = np.random.default_rng(39)
    space, table, params, image, y = _setup(rng)
    pm = pl.generate("strict", params, image, y, SPECS, table, space, generator_id="c3")
    assert pm.strategy == "strict"
    assert pm.generator_id == "c3"
    assert pm.num_augmentations == 3
    assert pm.spec_names[0] == "identity"
