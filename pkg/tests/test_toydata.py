import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tscir import toydata
from tscir.toydata import ALL_SPECS, SceneSpec

specs = st.sampled_from(ALL_SPECS)


def test_scene_space_size_and_ids():
    assert len(ALL_SPECS) == 4 * 8 * 3 * 5 * 3
    assert toydata.spec_from_id(ALL_SPECS[17].image_id) == ALL_SPECS[17]
    with pytest.raises(KeyError):
        toydata.spec_from_id("img9999")
    with pytest.raises(ValueError):
        SceneSpec("hexagon", "red", "small", "center", "white")


def test_render_is_deterministic_and_valued():
    spec = SceneSpec("circle", "red", "medium", "center", "gray")
    a, b = toydata.render(spec), toydata.render(spec)
    assert a.shape == (32, 32, 3) and a.dtype == np.float32
    assert np.array_equal(a, b)
    assert np.array_equal(a[0, 0], np.array([128, 128, 128], np.float32) / 255)
    assert np.array_equal(a[16, 16], np.array([220, 30, 30], np.float32) / 255)
    # filled pixel count tracks the analytic area of a radius-6 disc
    filled = np.any(a != a[0, 0], axis=-1).sum()
    assert abs(filled - math.pi * 6**2) <= 2


def test_render_copy_does_not_alias_cache():
    spec = ALL_SPECS[0]
    img = toydata.render(spec)
    img[...] = 0
    assert not np.array_equal(toydata.render(spec), img)


def test_sizes_are_ordered():
    area = {s: np.any(toydata.render(SceneSpec("square", "blue", s, "center", "white")) < 1,
                      axis=-1).sum() for s in toydata.SIZES}
    assert area["small"] < area["medium"] < area["large"]


def test_generate_pairs_uniform_chi_square():
    n = 10_000
    pairs = toydata.generate_pairs(n, 0)
    counts = np.bincount([s.index for s, _ in pairs], minlength=len(ALL_SPECS))
    expected = n / len(ALL_SPECS)
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    dof = len(ALL_SPECS) - 1
    assert abs(chi2 - dof) < 3 * math.sqrt(2 * dof)


@given(specs)
def test_caption_parses_back(spec):
    assert toydata.parse_caption(toydata.caption(spec)) == {
        "shape": spec.shape, "color": spec.color, "size": spec.size,
        "position": spec.position, "background": spec.background,
    }


@given(specs, st.sets(st.sampled_from(toydata.ATTRIBUTES)))
def test_partial_caption_mentions_exactly_kept_attributes(spec, drop):
    parsed = toydata.parse_caption(toydata.caption(spec, drop))
    assert set(parsed) == set(toydata.ATTRIBUTES) - drop
    assert all(parsed[a] == getattr(spec, a) for a in parsed)


def test_partial_mode_drops_some_attributes():
    pairs = toydata.generate_pairs(200, 4, partial=True)
    kept = [len(toydata.parse_caption(c)) for _, c in pairs]
    assert min(kept) < 5 and max(kept) > 0
    assert 1.5 < np.mean(kept) < 3.5


def test_bad_captions_and_modifications_rejected():
    for bad in ["", "the red circle", "a red circle extra"]:
        with pytest.raises(ValueError):
            toydata.parse_caption(bad)
    for bad in ["paint it red", "change color to red and change color to blue"]:
        with pytest.raises(ValueError):
            toydata.parse_modification(bad)
    with pytest.raises(ValueError):
        toydata.apply_delta(SceneSpec("circle", "red", "large", "top", "white"), {"size": 1})


@given(specs, st.data())
def test_edit_grammar_round_trip(spec, data):
    delta = data.draw(st.sampled_from(toydata.enumerate_edits(spec)))
    text = toydata.modification_text(delta)
    assert toydata.parse_modification(text) == delta
    target = toydata.apply_delta(spec, delta)
    changed = {a for a in toydata.ATTRIBUTES if getattr(target, a) != getattr(spec, a)}
    assert changed == set(delta)


def test_triplets_are_sound_and_single_target():
    recs = toydata.generate_triplets(500, 3)
    assert len({(r.reference, r.modification) for r in recs}) == 500
    for r in recs:
        assert toydata.apply_delta(r.reference, toydata.parse_modification(r.modification)) == r.target
        assert r.target_ids == (r.target.image_id,)
        assert r.reference_caption == toydata.caption(r.reference)
    arity = [len(toydata.parse_modification(r.modification)) for r in recs]
    assert 0.4 < arity.count(1) / len(arity) < 0.6


def test_gallery_queries_have_targets_in_gallery_and_no_leakage():
    split = toydata.make_split(1, n_pairs=8, n_triplets=300, gallery_size=128, n_queries=200)
    gallery = set(split.gallery)
    assert len(split.gallery) == 128 == len(gallery)
    for q in split.queries:
        assert q.target_ids == (q.target.image_id,) and q.target.image_id in gallery
        assert q.reference_id not in gallery
    assert not {t.reference_id for t in split.triplets} & gallery


def test_multi_target_counts_match_brute_force_scan():
    gallery = toydata.build_gallery(120, 7, multi_target=True)
    assert len(gallery) % len(toydata.BACKGROUNDS) == 0 and len(gallery) <= 120
    recs = toydata.generate_triplets(150, 8, multi_target=True, gallery=gallery, exclude=gallery)
    for r in recs:
        scan = sorted(g for g in gallery
                      if toydata.spec_from_id(g).key(True) == r.target.key(True))
        assert list(r.target_ids) == scan and len(scan) == len(toydata.BACKGROUNDS)
    with pytest.raises(ValueError):
        toydata.generate_triplets(5, 0, multi_target=True)
    with pytest.raises(ValueError):
        toydata.build_gallery(2, 0, multi_target=True)


def test_capacity_error():
    gallery = toydata.build_gallery(1, 0)
    with pytest.raises(ValueError, match="exceeds"):
        toydata.generate_triplets(10_000, 0, gallery=gallery)
    with pytest.raises(ValueError):
        toydata.build_gallery(len(ALL_SPECS) + 1, 0)


def test_noisy_fraction():
    recs = toydata.generate_triplets(1000, 5, noisy_fraction=0.3)
    noisy = [r for r in recs if r.noisy]
    assert 0.25 < len(noisy) / len(recs) < 0.35
    for r in noisy:
        assert toydata.apply_delta(r.reference, toydata.parse_modification(r.modification)) != r.target
    assert not any(r.noisy for r in toydata.generate_triplets(100, 5))


def test_manifests_reproduce_bytewise(tmp_path):
    a = toydata.triplets_manifest(toydata.generate_triplets(200, 9))
    b = toydata.triplets_manifest(toydata.generate_triplets(200, 9))
    assert a == b and a != toydata.triplets_manifest(toydata.generate_triplets(200, 10))
    assert toydata.pairs_manifest(toydata.generate_pairs(50, 2)) == \
        toydata.pairs_manifest(toydata.generate_pairs(50, 2))
    path = tmp_path / "t.jsonl"
    path.write_text(a)
    assert toydata.triplets_manifest(toydata.read_triplets(path)) == a
    pairs = toydata.generate_pairs(20, 1)
    path.write_text(toydata.pairs_manifest(pairs))
    assert toydata.read_pairs(path) == pairs
    g = toydata.build_gallery(30, 1)
    path.write_text(toydata.gallery_manifest(g))
    assert toydata.read_gallery(path) == g


def test_empty_requests():
    assert toydata.generate_pairs(0, 0) == []
    assert toydata.generate_triplets(0, 0) == []
    assert toydata.pairs_manifest([]) == ""
