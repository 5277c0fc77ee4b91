"""Synthetic torus-with-bump dataset: four generative factors, CSV manifest."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .mesh import TriMesh, save_mesh

# Base torus and bump profile constants (model units). The bump is a
# Gaussian displacement along outward normals centered at (u, v) = (0, 0).
MAJOR_RADIUS = 2.0
MINOR_RADIUS = 0.7
BUMP_KAPPA = 4.0

DEFAULT_SCALE_RANGE = (0.8, 1.2)
DEFAULT_BUMP_RANGE = (0.1 * MINOR_RADIUS, 0.5 * MINOR_RADIUS)
DEFAULT_NOISE_RANGE = (0.0, 0.01)


@dataclass(frozen=True)
class TorusFactors:
    """Generative factors of one sample."""

    scale: float
    bump_present: bool
    bump_height: float
    noise_sigma: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.bump_height < 0 or self.noise_sigma < 0:
            raise ValueError("bump_height and noise_sigma must be non-negative")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    y_cls: int
    y_reg: float
    factors: TorusFactors
    seed: int
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    root: str = "."

    def split_entries(self, split: str):
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def mesh_path(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.path)


def _torus_grid(n_major: int, n_minor: int):
    u = 2 * np.pi * np.arange(n_major) / n_major
    v = 2 * np.pi * np.arange(n_minor) / n_minor
    uu, vv = np.meshgrid(u, v, indexing="ij")
    return uu.ravel(), vv.ravel()


def torus_faces(n_major: int, n_minor: int) -> np.ndarray:
    """Face list shared by every sample at one resolution (outward-oriented)."""
    i = np.repeat(np.arange(n_major), n_minor)
    j = np.tile(np.arange(n_minor), n_major)
    a = i * n_minor + j
    b = ((i + 1) % n_major) * n_minor + j
    c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
    d = i * n_minor + (j + 1) % n_minor
    return np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)]).astype(np.int64)


def generate_torus(factors: TorusFactors, resolution=(32, 32), seed: int = 0) -> TriMesh:
    """Parametric torus, optionally bumped along outward normals, plus noise.

    Geometry is ``scale * (base_point + bump * normal)`` so doubling the
    scale exactly doubles every coordinate; Gaussian noise (std
    ``noise_sigma`` per coordinate) is added after scaling.
    """
    n_major, n_minor = resolution
    if n_major < 8 or n_minor < 8:
        raise ValueError(f"resolution must be at least 8x8, got {resolution}")
    uu, vv = _torus_grid(n_major, n_minor)
    ring = MAJOR_RADIUS + MINOR_RADIUS * np.cos(vv)
    base = np.stack([ring * np.cos(uu), ring * np.sin(uu), MINOR_RADIUS * np.sin(vv)], 1)
    pts = base
    if factors.bump_present and factors.bump_height > 0:
        normal = np.stack([np.cos(vv) * np.cos(uu), np.cos(vv) * np.sin(uu), np.sin(vv)], 1)
        du = np.angle(np.exp(1j * uu))  # wrapped distance to u=0
        dv = np.angle(np.exp(1j * vv))
        d2 = (MAJOR_RADIUS * du) ** 2 + (MINOR_RADIUS * dv) ** 2
        amp = factors.bump_height * np.exp(-BUMP_KAPPA * d2)
        pts = base + amp[:, None] * normal
    pts = factors.scale * pts
    if factors.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        pts = pts + rng.normal(0.0, factors.noise_sigma, size=pts.shape)
    return TriMesh(pts, torus_faces(n_major, n_minor))


@dataclass(frozen=True)
class FactorRanges:
    scale: tuple = DEFAULT_SCALE_RANGE
    bump_height: tuple = DEFAULT_BUMP_RANGE
    noise_sigma: tuple = DEFAULT_NOISE_RANGE


def _draw_factors(seed: int, index: int, ranges: FactorRanges, attempt: int) -> TorusFactors:
    rng = np.random.default_rng([seed, index, attempt])
    scale = rng.uniform(*ranges.scale)
    bump_present = bool(rng.random() < 0.5)
    bump_height = rng.uniform(*ranges.bump_height)
    noise_sigma = rng.uniform(*ranges.noise_sigma)
    return TorusFactors(scale, bump_present, bump_height, noise_sigma)


def _sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


MANIFEST_COLUMNS = ["path", "y_cls", "y_reg", "scale", "bump_present",
                    "bump_height", "noise_sigma", "seed", "split"]


def generate_dataset(count: int, out_dir, resolution=(32, 32), seed: int = 0,
                     ranges: FactorRanges = FactorRanges()) -> DatasetManifest:
    """Write ``count`` torus meshes plus a CSV manifest and template mesh.

    Factors are drawn per sample from an RNG keyed on (seed, index), so
    generation order does not matter. If a draw yields a single bump class
    the bump labels are redrawn with a bumped attempt counter (documented
    behavior for tiny counts). Split sizes follow an 80/10/10 policy.
    """
    if count < 10:
        raise ValueError(f"count must be >= 10, got {count}")
    os.makedirs(os.path.join(out_dir, "meshes"), exist_ok=True)

    attempt = 0
    while True:
        factors = [_draw_factors(seed, i, ranges, attempt) for i in range(count)]
        classes = {f.bump_present for f in factors}
        if len(classes) == 2:
            break
        attempt += 1

    n_val = count // 10
    n_test = count // 10
    perm = np.random.default_rng([seed, count, 2 ** 20]).permutation(count)
    split = np.empty(count, dtype=object)
    split[perm[:count - n_val - n_test]] = "train"
    split[perm[count - n_val - n_test:count - n_test]] = "val"
    split[perm[count - n_test:]] = "test"

    template = generate_torus(TorusFactors(1.0, False, 0.0, 0.0), resolution, seed=0)
    save_mesh(template, os.path.join(out_dir, "template.obj"))

    entries = []
    for i, f in enumerate(factors):
        rel = os.path.join("meshes", f"sample_{i:05d}.obj")
        s = _sample_seed(seed, i)
        mesh = generate_torus(f, resolution, seed=s)
        save_mesh(mesh, os.path.join(out_dir, rel))
        entries.append(ManifestEntry(rel, int(f.bump_present), f.scale, f, s, split[i]))

    manifest_path = os.path.join(out_dir, "manifest.csv")
    with open(manifest_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for e in entries:
            w.writerow([e.path, e.y_cls, f"{e.y_reg:.17g}", f"{e.factors.scale:.17g}",
                        int(e.factors.bump_present), f"{e.factors.bump_height:.17g}",
                        f"{e.factors.noise_sigma:.17g}", e.seed, e.split])
    return DatasetManifest(tuple(entries), root=str(out_dir))


def read_manifest(path) -> DatasetManifest:
    entries = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            factors = TorusFactors(float(row["scale"]), bool(int(row["bump_present"])),
                                   float(row["bump_height"]), float(row["noise_sigma"]))
            entries.append(ManifestEntry(row["path"], int(row["y_cls"]), float(row["y_reg"]),
                                         factors, int(row["seed"]), row["split"]))
    return DatasetManifest(tuple(entries), root=os.path.dirname(os.path.abspath(path)))
