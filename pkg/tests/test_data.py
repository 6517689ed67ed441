from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcpcn.data import (
    SHAPE_KINDS,
    ShapeSpec,
    build_dataset,
    gen_shape,
    load_split,
    make_partial,
    normalization,
    normalize,
    random_unit_vector,
    read_xyz,
    resample_surface,
    write_xyz,
)
from dcpcn.errors import DataError
from dcpcn.geometry import chamfer_l1


def test_sphere_and_cube_surfaces():
    sphere = gen_shape(ShapeSpec("sphere", 500, 1)).points
    assert np.all(np.abs(np.linalg.norm(sphere, axis=1) - 1) <= 1e-9)
    cube = gen_shape(ShapeSpec("cube", 500, 1)).points
    assert np.all(np.abs(cube) <= 1)
    assert np.all(np.isclose(np.abs(cube).max(axis=1), 1.0, rtol=0, atol=0))


@pytest.mark.parametrize("kind", SHAPE_KINDS)
def test_generators_are_deterministic(kind):
    spec = ShapeSpec(kind, 64, 3)
    assert np.array_equal(gen_shape(spec).points, gen_shape(spec).points)
    assert np.array_equal(resample_surface(spec, 9).points, resample_surface(spec, 9).points)
    assert not np.array_equal(resample_surface(spec, 9).points, resample_surface(spec, 10).points)


def test_unknown_kind():
    with pytest.raises(ValueError):
        ShapeSpec("teapot", 10, 0)


def test_resampling_is_closer_than_another_shape():
    sphere = ShapeSpec("sphere", 2048, 0)
    same = chamfer_l1(gen_shape(sphere), resample_surface(sphere, 1))
    other = chamfer_l1(gen_shape(sphere), gen_shape(ShapeSpec("cube", 2048, 1)))
    assert same < other


def test_make_partial_contract():
    pts = gen_shape(ShapeSpec("torus", 200, 0))
    v = random_unit_vector(np.random.default_rng(0))
    assert np.array_equal(make_partial(pts, v, 1.0).points, pts.points)
    half = make_partial(pts, v, 0.5).points
    assert len(half) == 100
    assert np.all(half @ v <= np.median(pts.points @ v))
    rows = {tuple(r) for r in pts.points}
    assert all(tuple(r) in rows for r in half)
    with pytest.raises(ValueError):
        make_partial(pts, np.array([1.0, 1.0, 0.0]), 0.5)
    with pytest.raises(ValueError):
        make_partial(pts, v, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(SHAPE_KINDS), st.integers(0, 2**31 - 1))
def test_normalize_contract_and_idempotence(kind, seed):
    once = normalize(gen_shape(ShapeSpec(kind, 128, seed))).points
    assert np.abs(once.mean(axis=0)).max() <= 1e-12
    assert abs(np.abs(once).max() - 1) <= 1e-12
    assert np.abs(normalize(once).points - once).max() <= 1e-12


def test_normalize_degenerate():
    with pytest.raises(DataError):
        normalization(np.ones((5, 3)))


def test_xyz_roundtrip_and_errors(tmp_path):
    pts = np.random.default_rng(0).normal(size=(20, 3)) * 1e3
    write_xyz(pts, tmp_path / "a.xyz")
    assert np.array_equal(read_xyz(tmp_path / "a.xyz").points, pts)
    (tmp_path / "h.xyz").write_text("# header\n\n1 2 3\n# more\n4 5 6\n")
    assert read_xyz(tmp_path / "h.xyz").points.tolist() == [[1, 2, 3], [4, 5, 6]]
    (tmp_path / "bad.xyz").write_text("1 2 3\n4 5\n")
    with pytest.raises(DataError, match=r"bad.xyz:2: expected 3 values, got 2"):
        read_xyz(tmp_path / "bad.xyz")
    (tmp_path / "empty.xyz").write_text("# nothing\n")
    with pytest.raises(DataError):
        read_xyz(tmp_path / "empty.xyz")
    with pytest.raises(DataError, match="missing.xyz"):
        read_xyz(tmp_path / "missing.xyz")


def test_build_and_load_dataset(tmp_path):
    manifest = build_dataset(tmp_path, 3, ["sphere", "cube"], per_category=2, test_per_category=1, n_gt=128, n_partial=32)
    doc = json.loads(manifest.read_text())
    assert len(doc["samples"]) == 6
    train = load_split(tmp_path, "train")
    test = load_split(tmp_path, "test")
    assert train.partial.shape == (4, 32, 3) and train.gt.shape == (4, 128, 3)
    assert test.categories == ["sphere", "cube"]
    # the partial is expressed in its own normalized frame
    for p in train.partial:
        assert np.abs(p.mean(axis=0)).max() <= 1e-12
        assert abs(np.abs(p).max() - 1) <= 1e-12
    again = build_dataset(tmp_path / "again", 3, ["sphere", "cube"], per_category=2, test_per_category=1, n_gt=128, n_partial=32)
    assert load_split(again, "train").digest() == train.digest()
    with pytest.raises(DataError):
        load_split(tmp_path / "nowhere", "train")
    with pytest.raises(DataError):
        build_dataset(tmp_path / "x", 0, ["teapot"], 1, 1)
