import numpy as np
import pytest

from qrlab.datagen import (
    SceneParams,
    cell_coverage,
    dataset,
    generate_scene,
    load_archive,
    render,
    sample_seed,
    save_archive,
)
from qrlab.errors import SchemaError
from qrlab.geometry import pairwise_iou


def test_scene_deterministic():
    a, b = generate_scene(42), generate_scene(42)
    assert np.array_equal(a.gt.boxes, b.gt.boxes) and np.array_equal(a.gt.labels, b.gt.labels)


def test_scene_invariants_and_count_coverage():
    counts = set()
    p = SceneParams()
    for seed in range(10000):
        gt = generate_scene(seed, p).gt
        counts.add(len(gt))
        if seed % 10:
            continue
        b = gt.boxes
        assert np.all(b[:, 2:] >= p.min_side) and np.all(b[:, 2:] <= p.max_side)
        assert np.all(b[:, :2] - b[:, 2:] / 2 >= 0) and np.all(b[:, :2] + b[:, 2:] / 2 <= 1)
        ious = pairwise_iou(b, b)
        np.fill_diagonal(ious, 0)
        assert ious.max() <= p.max_pair_iou
        assert np.all((gt.labels >= 0) & (gt.labels < p.num_classes))
    assert counts == set(range(2, 9))


def test_zero_noise_single_box_pattern():
    from qrlab.datagen import GroundTruth, Scene

    p = SceneParams(grid=8)
    box = np.array([0.375, 0.5, 0.25, 0.5])  # covers columns 2..3, rows 2..5 exactly
    s = render(Scene(0, GroundTruth(box[None], [2])), p, noise=False)
    inside = np.zeros((8, 8), dtype=bool)
    inside[2:6, 2:4] = True
    assert np.array_equal(s.features[:, :, 2] > 0, inside)
    assert np.allclose(s.features[inside, 2], 1.0)
    for c in (0, 1, 3, p.num_classes + 3):
        assert not s.features[:, :, c].any()


def test_disjoint_boxes_paint_disjoint_regions():
    a = cell_coverage(np.array([0.2, 0.2, 0.2, 0.2]), 16)
    b = cell_coverage(np.array([0.75, 0.75, 0.3, 0.3]), 16)
    assert not np.any((a > 0) & (b > 0))


def test_noise_variance_matches_sigma():
    p = SceneParams(noise_sigma=0.1)
    k = p.num_classes
    noise = []
    for seed in range(200):
        sc = generate_scene(seed, p)
        noise.append(render(sc, p).features[:, :, k + 3].ravel())  # pure-noise channel
    v = np.var(np.concatenate(noise))
    assert abs(v / 0.01 - 1.0) < 0.05


def test_linear_probe_recovers_cell_classes():
    """Least-squares probe on per-cell features; label = dominant class, or background."""
    p = SceneParams()
    k = p.num_classes

    def cells(seeds):
        X, y = [], []
        for seed in seeds:
            sc = generate_scene(seed, p)
            f = render(sc, p).features.reshape(-1, p.channels)
            clean = render(sc, p, noise=False).features.reshape(-1, p.channels)
            cov = clean[:, :k]
            lab = np.where(cov.max(1) >= 0.5, cov.argmax(1), k)
            X.append(f)
            y.append(lab)
        return np.concatenate(X), np.concatenate(y)

    X, y = cells(range(300))
    Xt, yt = cells(range(1000, 1100))
    feat = lambda a: np.column_stack([a, np.ones(len(a))])
    W = np.linalg.lstsq(feat(X), np.eye(k + 1)[y], rcond=None)[0]
    acc = (feat(Xt) @ W).argmax(1) == yt
    assert acc.mean() > 0.95


def test_splits_disjoint_and_reproducible():
    tr = {sample_seed(0, "train", i) for i in range(2000)}
    va = {sample_seed(0, "val", i) for i in range(200)}
    assert not tr & va and len(tr) == 2000
    a = [s.features for s in dataset("val", 5)]
    b = [s.features for s in dataset("val", 5)]
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))


def test_archive_round_trip(tmp_path):
    p = SceneParams(grid=8)
    samples = list(dataset("train", 6, 3, p))
    path = tmp_path / "s.npz"
    save_archive(path, samples, p)
    back, p2 = load_archive(path)
    assert p2 == p
    for s, r in zip(samples, back):
        assert s.seed == r.seed
        assert s.features.tobytes() == r.features.tobytes()
        assert s.gt.boxes.tobytes() == r.gt.boxes.tobytes()
        assert np.array_equal(s.gt.labels, r.gt.labels)


def test_archive_version_mismatch(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, header=np.array('{"format": "qrlab-samples", "version": 99}'))
    with pytest.raises(SchemaError):
        load_archive(path)
