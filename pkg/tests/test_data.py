import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image
from scipy import ndimage

from mvgfdr.data import (
    ManifestError,
    count_dots,
    generate_synthetic,
    load_manifest,
    preprocess,
    read_manifest,
    render_sample,
)


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    generate_synthetic(40, K=4, G=5, S=64, seed=7, out_dir=root)
    return root


def _views(root, row):
    return [np.asarray(Image.open(root / p)) for p in row[2]]


def test_manifest_header_and_roundtrip(gen_dir):
    header = (gen_dir / "manifest.csv").read_text().splitlines()[0]
    assert header == "sample_id,grade,view1,view2,view3,view4"
    ds = load_manifest(gen_dir / "manifest.csv", views=4, classes=5)
    assert len(ds) == 40
    assert [ds[i][1] for i in range(40)] == [g for _, g, _ in read_manifest(gen_dir / "manifest.csv").rows]
    x, y = ds[0]
    assert x.shape == (4, 3, 64, 64)
    ids = [r[0] for r in ds.manifest.rows]
    assert ids == sorted(ids)


def test_grade_balance(gen_dir):
    ds = load_manifest(gen_dir / "manifest.csv")
    counts = np.bincount(ds.grades, minlength=5)
    assert counts.max() - counts.min() <= 1


def test_grade_balance_indivisible(tmp_path):
    generate_synthetic(13, seed=1, S=32, out_dir=tmp_path)
    counts = np.bincount(load_manifest(tmp_path / "manifest.csv").grades, minlength=5)
    assert counts.max() - counts.min() <= 1


def test_dot_oracle_recovers_grade(gen_dir):
    rows = read_manifest(gen_dir / "manifest.csv").rows
    for row in rows:
        per_view = [count_dots(v) for v in _views(gen_dir, row)]
        assert sum(per_view) == row[1]
        assert sum(c > 0 for c in per_view) <= 1
        if row[1] == 0:
            assert per_view == [0, 0, 0, 0]


def test_low_frequency_shared_across_views(gen_dir):
    for row in read_manifest(gen_dir / "manifest.csv").rows:
        blurred = [ndimage.gaussian_filter(v.astype(float), sigma=(4, 4, 0)) for v in _views(gen_dir, row)]
        for a in range(4):
            for b in range(a + 1, 4):
                r = np.corrcoef(blurred[a].ravel(), blurred[b].ravel())[0, 1]
                assert r > 0.9


def test_cue_view_differs_at_dots():
    s = render_sample(5, 3, 4, 64, seed=0)
    cue = s.views[s.cue_view].astype(int)
    other = s.views[(s.cue_view + 1) % 4].astype(int)
    assert (cue == 255).all(-1).sum() > 0 and (other == 255).all(-1).sum() == 0


def test_generation_is_byte_identical(tmp_path):
    def digest(root):
        h = hashlib.sha256()
        for p in sorted(Path(root).rglob("*")):
            if p.is_file():
                h.update(p.name.encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    generate_synthetic(6, S=32, seed=2, out_dir=tmp_path / "a")
    generate_synthetic(6, S=32, seed=2, out_dir=tmp_path / "b")
    generate_synthetic(6, S=32, seed=3, out_dir=tmp_path / "c")
    assert digest(tmp_path / "a") == digest(tmp_path / "b") != digest(tmp_path / "c")


def test_single_view_bound_analytic():
    """Bayes accuracy of one fixed view, by enumerating (grade, cue view)."""
    G, K = 5, 4
    # observation: the dot count seen in view 0 (0 when the cue is elsewhere)
    joint = {}
    for g in range(G):
        for cue in range(K):
            seen = g if cue == 0 else 0
            joint.setdefault(seen, np.zeros(G))[g] += 1 / (G * K)
    bayes = sum(p.max() for p in joint.values())
    assert bayes == pytest.approx(0.25 + 0.75 / G)
    assert bayes == pytest.approx(0.40)


def test_single_view_oracle_empirical():
    samples = [render_sample(i, i % 5, 4, 64, seed=11) for i in range(500)]
    for view in range(4):
        hits = sum(count_dots(s.views[view]) == s.grade for s in samples)
        # a dot-counter on one view can only be right when it sees the cue or the grade is 0
        assert hits / len(samples) <= 0.40 + 0.05


def empty_manifest(path):
    path.write_text("sample_id,grade,view1,view2,view3,view4\n")
    return path


def test_empty_manifest(tmp_path):
    assert len(load_manifest(empty_manifest(tmp_path / "m.csv"))) == 0


def test_manifest_errors(gen_dir, tmp_path):
    header, *body = (gen_dir / "manifest.csv").read_text().splitlines()
    # absolute image paths, so copies of the manifest can live elsewhere
    src = [header] + [",".join(r.split(",")[:2] + [str(gen_dir / p) for p in r.split(",")[2:]]) for r in body]
    with pytest.raises(ManifestError, match="not found"):
        read_manifest(tmp_path / "missing.csv")
    bad = tmp_path / "cols.csv"
    bad.write_text("sample_id,grade,view1,view2\n")
    with pytest.raises(ManifestError, match="expected 4"):
        read_manifest(bad, views=4)
    short = tmp_path / "short.csv"
    short.write_text(src[0] + "\n" + "x,1,a.png\n")
    with pytest.raises(ManifestError, match=":2:"):
        read_manifest(short)
    dup = tmp_path / "dup.csv"
    dup.write_text("\n".join([src[0], src[1], src[1]]) + "\n")
    with pytest.raises(ManifestError, match="duplicate"):
        read_manifest(dup)
    grade = tmp_path / "grade.csv"
    fields = src[1].split(",")
    fields[1] = "9"
    grade.write_text(src[0] + "\n" + ",".join(fields) + "\n")
    with pytest.raises(ManifestError, match="out of range"):
        read_manifest(grade, classes=5)


def test_preprocess_contract():
    out = preprocess(Image.fromarray(np.full((64, 64, 3), 128, dtype=np.uint8)), 64)
    assert out.shape == (64, 64, 3)
    np.testing.assert_allclose(out.numpy(), (128 / 255 - 0.5) / 0.25, atol=1e-6)
    img = np.random.default_rng(0).integers(0, 256, (64, 64, 3), dtype=np.uint8)
    np.testing.assert_allclose(preprocess(img, 64).numpy() * 0.25 + 0.5, img / 255.0, atol=1e-6)
    assert preprocess(Image.fromarray(img).resize((100, 80)), 64).shape == (64, 64, 3)


def test_preprocess_black_floor():
    img = Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8))
    assert preprocess(img, 8).min().item() == pytest.approx(-2.0)


def test_preprocess_undecodable(tmp_path):
    p = tmp_path / "junk.png"
    p.write_bytes(b"not an image")
    with pytest.raises(ValueError):
        preprocess(p)
