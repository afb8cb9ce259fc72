"""Synthetic multi-view benchmark and manifest-based image loading.

Each synthetic sample shares one smooth low-frequency field across its views
(each view sees it through a small fixed translation) and carries its grade
as ``grade`` small bright dots drawn in exactly one randomly chosen view.
No single view therefore determines the grade.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

MEAN = 0.5
STD = 0.25
BACKGROUND_MAX = 0.6
DOT_VALUE = 1.0
DOT_THRESHOLD = 0.8


class ManifestError(ValueError):
    pass


@dataclass
class MultiViewSample:
    views: list[np.ndarray]
    grade: int
    sample_id: str
    cue_view: int | None = None


@dataclass
class Manifest:
    path: Path
    rows: list[tuple[str, int, list[str]]] = field(default_factory=list)

    @property
    def views(self) -> int:
        return len(self.rows[0][2]) if self.rows else 0


def view_shifts(K: int) -> list[tuple[int, int]]:
    # axis-aligned, so two views are never more than 4 px apart
    base = [(0, -2), (0, 2), (-2, 0), (2, 0), (-2, -2), (2, 2), (-2, 2), (2, -2)]
    return [base[k % len(base)] for k in range(K)]


def dot_radius(S: int) -> float:
    return max(1.5, S / 32.0)


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Sum of a few wide Gaussian blobs, stretched onto [0, BACKGROUND_MAX]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size, 3))
    for _ in range(int(rng.integers(3, 6))):
        cy, cx = rng.uniform(0, size, 2)
        s = rng.uniform(size / 4.0, size / 2.0)
        color = rng.uniform(0.2, 1.0, 3)
        img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))[..., None] * color
    # stretch to the full range so the shared background dominates blurred views
    img -= img.min()
    img /= max(img.max(), 1e-12)
    return BACKGROUND_MAX * img


def _place_dots(rng: np.random.Generator, n: int, S: int, r: float) -> list[tuple[float, float]]:
    margin = r + 2
    min_dist = 3 * r + 2
    centers: list[tuple[float, float]] = []
    while len(centers) < n:
        c = tuple(rng.uniform(margin, S - margin, 2))
        if all((c[0] - d[0]) ** 2 + (c[1] - d[1]) ** 2 >= min_dist**2 for d in centers):
            centers.append(c)
    return centers


def render_sample(index: int, grade: int, K: int, S: int, seed: int) -> MultiViewSample:
    rng = np.random.default_rng([seed, index])
    pad = 2
    field_ = _smooth_field(rng, S + 2 * pad)
    cue_view = int(rng.integers(0, K))
    r = dot_radius(S)
    centers = _place_dots(rng, grade, S, r)
    yy, xx = np.mgrid[0:S, 0:S]
    views = []
    for k, (dy, dx) in enumerate(view_shifts(K)):
        img = field_[pad + dy:pad + dy + S, pad + dx:pad + dx + S].copy()
        if k == cue_view:
            for cy, cx in centers:
                img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = DOT_VALUE
        views.append(np.round(img * 255).astype(np.uint8))
    return MultiViewSample(views=views, grade=grade, sample_id=f"s{index:06d}", cue_view=cue_view)


def balanced_grades(n: int, G: int, seed: int) -> np.ndarray:
    grades = np.arange(n) % G
    np.random.default_rng([seed, 0xBA1A]).shuffle(grades)
    return grades


def generate_synthetic(n_samples: int, K: int = 4, G: int = 5, S: int = 64, seed: int = 0,
                       out_dir=".") -> Manifest:
    out = Path(out_dir)
    img_dir = out / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {img_dir}: {exc}") from exc
    grades = balanced_grades(n_samples, G, seed)
    rows, cues = [], {}
    for i in range(n_samples):
        sample = render_sample(i, int(grades[i]), K, S, seed)
        paths = []
        for k, arr in enumerate(sample.views):
            rel = f"images/{sample.sample_id}_v{k + 1}.png"
            try:
                Image.fromarray(arr, mode="RGB").save(out / rel, format="PNG")
            except OSError as exc:
                raise OSError(f"failed writing {out / rel}: {exc}") from exc
            paths.append(rel)
        rows.append((sample.sample_id, sample.grade, paths))
        cues[sample.sample_id] = sample.cue_view
    manifest = Manifest(path=out / "manifest.csv", rows=rows)
    write_manifest(manifest)
    meta = {"seed": seed, "K": K, "G": G, "S": S, "n_samples": n_samples, "cue_view": cues}
    (out / "generator.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return manifest


def write_manifest(manifest: Manifest) -> None:
    K = manifest.views
    with open(manifest.path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "grade", *[f"view{k + 1}" for k in range(K)]])
        for sid, grade, paths in manifest.rows:
            w.writerow([sid, grade, *paths])


def read_manifest(path, views: int | None = None, classes: int | None = None) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: manifest not found")
    rows, seen = [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}:1: missing header line")
        header = [h.strip() for h in header]
        if header[:2] != ["sample_id", "grade"] or len(header) < 3:
            raise ManifestError(f"{path}:1: header must start with sample_id,grade,view1,...; got {header}")
        view_cols = header[2:]
        expected = [f"view{k + 1}" for k in range(len(view_cols))]
        if view_cols != expected:
            raise ManifestError(f"{path}:1: view columns must be {expected}, got {view_cols}")
        if views is not None and len(view_cols) != views:
            raise ManifestError(f"{path}:1: manifest has {len(view_cols)} view columns, expected {views}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            sid = row[0].strip()
            try:
                grade = int(row[1])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: grade {row[1]!r} is not an integer") from None
            if grade < 0 or (classes is not None and grade >= classes):
                raise ManifestError(f"{path}:{lineno}: grade {grade} out of range")
            if sid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate sample_id {sid!r} (first on line {seen[sid]})")
            seen[sid] = lineno
            paths = [c.strip() for c in row[2:]]
            for p in paths:
                if not (path.parent / p).is_file():
                    raise ManifestError(f"{path}:{lineno}: image {p!r} not found")
            rows.append((sid, grade, paths))
    rows.sort(key=lambda r: r[0])
    return Manifest(path=path, rows=rows)


def preprocess(image, size: int = 64) -> torch.Tensor:
    """Decode, bilinear-resize to ``(size, size)``, scale to [0, 1] and
    standardize. Returns ``(size, size, 3)`` float32."""
    try:
        if isinstance(image, (str, Path)):
            with Image.open(image) as im:
                im = im.convert("RGB")
                im.load()
        elif isinstance(image, Image.Image):
            im = image.convert("RGB")
        else:
            im = Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB")
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot decode image {image!r}: {exc}") from exc
    if im.size != (size, size):
        im = im.resize((size, size), Image.BILINEAR)
    arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy((arr - MEAN) / STD)


class MultiViewDataset(torch.utils.data.Dataset):
    """Lazily decoded views; items are ``(views (K, 3, S, S), grade)``."""

    def __init__(self, manifest: Manifest, size: int = 64, cache: bool = True):
        self.manifest = manifest
        self.root = manifest.path.parent
        self.size = size
        self.cache = cache
        self._cache: dict[int, torch.Tensor] = {}

    def __len__(self):
        return len(self.manifest.rows)

    @property
    def grades(self) -> list[int]:
        return [g for _, g, _ in self.manifest.rows]

    def views(self, i: int) -> torch.Tensor:
        if i in self._cache:
            return self._cache[i]
        _, _, paths = self.manifest.rows[i]
        x = torch.stack([preprocess(self.root / p, self.size).permute(2, 0, 1) for p in paths])
        if self.cache:
            self._cache[i] = x
        return x

    def __getitem__(self, i):
        return self.views(i), self.manifest.rows[i][1]

    def batch(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        xs = torch.stack([self.views(int(i)) for i in indices])
        ys = torch.tensor([self.manifest.rows[int(i)][1] for i in indices], dtype=torch.long)
        return xs, ys

    def select_views(self, keep: list[int]) -> "MultiViewDataset":
        rows = [(sid, g, [paths[k] for k in keep]) for sid, g, paths in self.manifest.rows]
        return MultiViewDataset(Manifest(self.manifest.path, rows), size=self.size, cache=self.cache)


def load_manifest(path, views: int | None = None, classes: int | None = None, size: int = 64,
                  cache: bool = True) -> MultiViewDataset:
    return MultiViewDataset(read_manifest(path, views=views, classes=classes), size=size, cache=cache)


def count_dots(image: np.ndarray) -> int:
    """Connected components of saturated pixels in an 8-bit view."""
    from scipy import ndimage

    mask = (np.asarray(image, dtype=np.float64) / 255.0 >= DOT_THRESHOLD).all(axis=-1)
    return int(ndimage.label(mask)[1])
