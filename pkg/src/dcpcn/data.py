"""Synthetic shapes, partial views, normalization and XYZ/manifest I/O."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .geometry import PointCloud, as_points, farthest_point_sample

SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus", "plane")
TORUS_MAJOR, TORUS_MINOR = 1.0, 0.35


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    n: int
    seed: int
    category: int | None = None

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; expected one of {SHAPE_KINDS}")
        if self.n < 1:
            raise ValueError("shape needs at least one point")


def _sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng, n):
    face = rng.integers(0, 6, size=n)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = face % 3
    pts[np.arange(n), axis] = np.where(face < 3, 1.0, -1.0)
    return pts


def _cylinder(rng, n):
    # radius 1, height 2: lateral area 4*pi, caps 2*pi together
    theta = rng.uniform(0, 2 * np.pi, size=n)
    on_side = rng.uniform(size=n) < 4.0 / 6.0
    r = np.where(on_side, 1.0, np.sqrt(rng.uniform(size=n)))
    z = np.where(on_side, rng.uniform(-1.0, 1.0, size=n), np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _torus(rng, n):
    # area element is proportional to (R + r cos v); rejection-sample v
    vs = []
    while sum(len(v) for v in vs) < n:
        v = rng.uniform(0, 2 * np.pi, size=2 * n)
        accept = rng.uniform(size=2 * n) * (TORUS_MAJOR + TORUS_MINOR) <= TORUS_MAJOR + TORUS_MINOR * np.cos(v)
        vs.append(v[accept])
    v = np.concatenate(vs)[:n]
    u = rng.uniform(0, 2 * np.pi, size=n)
    ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)], axis=1)


def _plane(rng, n):
    xy = rng.uniform(-1.0, 1.0, size=(n, 2))
    return np.concatenate([xy, np.zeros((n, 1))], axis=1)


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "torus": _torus, "plane": _plane}


def gen_shape(spec: ShapeSpec) -> PointCloud:
    """``spec.n`` points sampled uniformly by area on the surface."""
    rng = np.random.default_rng(spec.seed)
    label = spec.category if spec.category is not None else spec.kind
    return PointCloud(_SAMPLERS[spec.kind](rng, spec.n), label)


def resample_surface(spec: ShapeSpec, seed2: int) -> PointCloud:
    return gen_shape(replace(spec, seed=seed2))


def make_partial(cloud, view_dir, keep_ratio: float) -> PointCloud:
    """Half-space crop: keep the ``ceil(keep_ratio*N)`` points with the smallest
    projection on ``view_dir``, in their original order."""
    pts = as_points(cloud)
    v = np.asarray(view_dir, dtype=np.float64)
    if v.shape != (3,) or not math.isclose(float(np.linalg.norm(v)), 1.0, abs_tol=1e-9):
        raise ValueError("view_dir must be a unit 3-vector")
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    count = math.ceil(keep_ratio * len(pts))
    if count == 0:
        raise ValueError("crop would leave no points")
    order = np.argsort(pts @ v, kind="stable")
    keep = np.sort(order[:count])
    label = cloud.label if isinstance(cloud, PointCloud) else None
    return PointCloud(pts[keep].copy(), label)


def normalization(cloud) -> tuple[np.ndarray, float]:
    pts = as_points(cloud)
    centroid = pts.mean(axis=0)
    scale = float(np.abs(pts - centroid).max())
    if scale == 0:
        raise DataError("cannot normalize a cloud whose points all coincide")
    return centroid, scale


def normalize(cloud) -> PointCloud:
    """Center at the centroid and scale so the largest |coordinate| is 1."""
    pts = as_points(cloud)
    centroid, scale = normalization(pts)
    label = cloud.label if isinstance(cloud, PointCloud) else None
    return PointCloud((pts - centroid) / scale, label)


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


# ------------------------------------------------------------------------ I/O


def write_xyz(cloud, path) -> None:
    pts = as_points(cloud)
    lines = [" ".join(format(float(c), ".17g") for c in row) for row in pts]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_xyz(path) -> PointCloud:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if len(fields) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 values, got {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise DataError(f"{path}:{lineno}: not a number in {stripped!r}") from None
    if not rows:
        raise DataError(f"{path}: no points")
    pts = np.array(rows, dtype=np.float64)
    if not np.isfinite(pts).all():
        raise DataError(f"{path}: non-finite coordinates")
    return PointCloud(pts)


# -------------------------------------------------------------------- datasets

MANIFEST_NAME = "manifest.json"


@dataclass
class Dataset:
    """Stacked arrays for one split, in manifest order."""

    partial: np.ndarray
    gt: np.ndarray
    categories: list[str]
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.partial).tobytes())
        h.update(np.ascontiguousarray(self.gt).tobytes())
        h.update("\n".join(self.categories).encode())
        return h.hexdigest()[:16]

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = list(idx)
        return Dataset(
            self.partial[idx], self.gt[idx], [self.categories[i] for i in idx], [self.ids[i] for i in idx]
        )


def make_sample(kind: str, seed: int, rng: np.random.Generator, n_gt: int, n_partial: int, keep_ratio: float):
    """One (partial, gt) pair; the GT surface is normalized before cropping."""
    gt = normalize(gen_shape(ShapeSpec(kind, n_gt, seed)))
    cropped = make_partial(gt, random_unit_vector(rng), keep_ratio)
    if len(cropped) < n_partial:
        raise DataError(f"crop kept {len(cropped)} points, fewer than the requested {n_partial}")
    picked = farthest_point_sample(cropped, n_partial, 0).coords
    # express the pair in the partial's own normalized frame, which is the
    # only frame available when completing a raw scan
    centroid, scale = normalization(picked)
    return PointCloud((picked - centroid) / scale, kind), PointCloud((gt.points - centroid) / scale, kind)


def build_dataset(
    out_dir,
    seed: int,
    categories: Sequence[str] = SHAPE_KINDS,
    per_category: int = 200,
    test_per_category: int = 40,
    n_gt: int = 2048,
    n_partial: int = 512,
    keep_ratio: float = 0.5,
) -> Path:
    """Write clouds and a manifest; returns the manifest path."""
    out = Path(out_dir)
    for kind in categories:
        if kind not in SHAPE_KINDS:
            raise DataError(f"unknown category {kind!r}; available: {', '.join(SHAPE_KINDS)}")
    rng = np.random.default_rng(seed)
    samples = []
    for split, count in (("train", per_category), ("test", test_per_category)):
        for kind in categories:
            folder = out / split / kind
            folder.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                shape_seed = int(rng.integers(0, 2**31 - 1))
                partial, gt = make_sample(kind, shape_seed, rng, n_gt, n_partial, keep_ratio)
                stem = f"{split}/{kind}/{i:04d}"
                write_xyz(partial, out / f"{stem}.partial.xyz")
                write_xyz(gt, out / f"{stem}.gt.xyz")
                samples.append(
                    {
                        "id": stem,
                        "category": kind,
                        "split": split,
                        "partial": f"{stem}.partial.xyz",
                        "gt": f"{stem}.gt.xyz",
                    }
                )
    manifest = {
        "version": 1,
        "seed": seed,
        "categories": list(categories),
        "n_gt": n_gt,
        "n_partial": n_partial,
        "keep_ratio": keep_ratio,
        "samples": samples,
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> tuple[Path, dict]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"no dataset manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(manifest, dict) or "samples" not in manifest:
        raise DataError(f"{path}: manifest lacks a 'samples' list")
    return path.parent, manifest


def load_split(path, split: str | None) -> Dataset:
    """Load every sample of ``split`` (or all samples when ``split`` is None)."""
    root, manifest = read_manifest(path)
    chosen = [s for s in manifest["samples"] if split is None or s.get("split") == split]
    if not chosen:
        raise DataError(f"{root}: no samples in split {split!r}")
    partial, gt = [], []
    for s in chosen:
        partial.append(read_xyz(root / s["partial"]).points)
        gt.append(read_xyz(root / s["gt"]).points)
    try:
        partial_arr, gt_arr = np.stack(partial), np.stack(gt)
    except ValueError:
        raise DataError(f"{root}: clouds in split {split!r} have differing point counts") from None
    return Dataset(partial_arr, gt_arr, [s["category"] for s in chosen], [s["id"] for s in chosen])
