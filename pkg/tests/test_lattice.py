import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latticegp.utils.lattice import (
    DesignSpec,
    ObservationMask,
    build_embedding,
    build_lattice,
    load_mask_file,
    make_mask,
    torus_offsets,
    wrap_distance,
    write_mask_file,
)


def test_build_lattice_spacing():
    base = build_lattice(16, 16, 0.7071)
    assert base.delta == pytest.approx(0.04419, abs=1e-5)
    tiny = build_lattice(2, 2, 1.0)
    assert tiny.delta == 0.5
    assert tiny.size == 4
    assert build_lattice(128, 128, 0.7071).size == 16384


def test_build_lattice_rejects_degenerate():
    with pytest.raises(ValueError):
        build_lattice(1, 5, 1.0)
    with pytest.raises(ValueError):
        build_lattice(4, 4, 0.0)


@pytest.mark.parametrize("r_factor, size", [(1.5, 48), (1.0, 32)])
def test_square_embedding_sizes(r_factor, size):
    emb = build_embedding(build_lattice(16, 16, 1 / math.sqrt(2)), r_factor)
    assert emb.shape == (size, size)
    assert emb.period == pytest.approx(2 * emb.r)


def test_rectangular_embedding_rounds_to_fast_size():
    emb = build_embedding(build_lattice(120, 80, 1.0), 1.5)
    assert emb.shape == (320, 320)


def test_embedding_rejects_small_factor():
    with pytest.raises(ValueError):
        build_embedding(build_lattice(8, 8, 1.0), 0.9)


def test_complete_design_observes_base():
    emb = build_embedding(build_lattice(16, 16, 1 / math.sqrt(2)), 1.5)
    mask = make_mask(emb, DesignSpec("complete"))
    assert mask.n == 256
    assert mask.design_tag == "complete"
    np.testing.assert_array_equal(mask.observed, np.sort(emb.footprint()))


def test_mask_partitions_embedding(random_mask):
    both = np.concatenate([random_mask.observed, random_mask.unobserved])
    assert both.size == random_mask.emb.N
    np.testing.assert_array_equal(np.sort(both), np.arange(random_mask.emb.N))
    assert np.all(np.diff(random_mask.observed) > 0)
    assert not random_mask.observed.flags.writeable


def test_random_design_count_is_binomial():
    base = build_lattice(64, 64, 1.0)
    emb = build_embedding(base, 1.5)
    mask = make_mask(emb, DesignSpec("random", 0.5), np.random.default_rng(1))
    sd = math.sqrt(base.size * 0.25)
    assert abs(mask.n - 0.5 * base.size) < 3 * sd
    assert mask.design_tag == "random(0.5)"


def test_disk_design_matches_large_lattice_count():
    emb = build_embedding(build_lattice(128, 128, 1 / math.sqrt(2)), 1.5)
    mask = make_mask(emb, DesignSpec("disk", 0.10))
    assert emb.shape == (384, 384)
    assert abs(mask.n - 14743) <= 40
    flags = mask.base_flags()
    assert not flags[64, 64] and flags[0, 0]


def test_mask_file_round_trip(tmp_path, small_emb):
    flags = np.ones((8, 8), dtype=bool)
    flags[2:4, 5] = False
    path = tmp_path / "mask.txt"
    write_mask_file(path, flags)
    np.testing.assert_array_equal(load_mask_file(path), flags)
    mask = make_mask(small_emb, DesignSpec("file", path=str(path)))
    assert mask.n == 62


def test_mask_file_rejects_bad_characters(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("oo.\no?o\n")
    with pytest.raises(ValueError, match="invalid characters"):
        load_mask_file(path)


def test_scatter_and_base_grid(random_mask):
    x = np.arange(random_mask.n, dtype=float)
    full = random_mask.scatter(x, fill=-1.0)
    assert full.shape == (random_mask.emb.N,)
    np.testing.assert_array_equal(full[random_mask.observed], x)
    grid = random_mask.to_base_grid(x)
    assert grid.shape == (8, 8)
    assert np.isnan(grid).sum() == 64 - random_mask.n


def test_from_indices_rejects_out_of_range(small_emb):
    with pytest.raises(ValueError):
        ObservationMask.from_indices(small_emb, [0, small_emb.N])


def test_wrap_distance_examples(small_emb):
    assert wrap_distance(small_emb, 5, 5) == 0.0
    assert wrap_distance(small_emb, 0, small_emb.N2 - 1) == pytest.approx(small_emb.delta)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 24 * 24 - 1), st.integers(0, 24 * 24 - 1))
def test_wrap_distance_matches_periodic_images(a, b):
    emb = build_embedding(build_lattice(8, 8, 1.0), 1.5)
    ra, ca = divmod(a, emb.N2)
    rb, cb = divmod(b, emb.N2)
    brute = min(
        math.hypot(ra - rb + k1 * emb.N1, ca - cb + k2 * emb.N2)
        for k1, k2 in itertools.product((-1, 0, 1), repeat=2)
    )
    assert wrap_distance(emb, a, b) == pytest.approx(brute * emb.delta)
    assert wrap_distance(emb, a, b) == pytest.approx(wrap_distance(emb, b, a))


def test_torus_offsets_are_symmetric(small_emb):
    d1, d2 = torus_offsets(small_emb)
    assert d1.shape == small_emb.shape
    np.testing.assert_array_equal(d1[1:], d1[1:][::-1])
    np.testing.assert_array_equal(d2[:, 1:], d2[:, 1:][:, ::-1])
