import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from gestpose.data import (ARRAY_FIELDS, DEFAULT_NOISE_DEG, build_taxonomy, gaussian_splats,
                           generate_dataset, nearest_centroid_accuracy, read_dataset,
                           render_image_grid, sample_pose, split_counts, stack_batch,
                           write_dataset)
from gestpose.errors import ConfigError, LabelError, ParseError
from gestpose.hand import CameraConvention, default_tree, hand_forward_np, rot6d_to_matrix

TREE = default_tree()
IMG = CameraConvention(grid_size=16)
VOL = CameraConvention(grid_size=4)


@pytest.fixture(scope="module")
def tax():
    return build_taxonomy(0)


@pytest.fixture(scope="module")
def dataset(tax):
    return generate_dataset(tax, n_per_fine=50, seed=0, noise_deg=5.0)


# ---------------------------------------------------------------- taxonomy

def test_taxonomy_deterministic(tax):
    again = build_taxonomy(0)
    for a, b in zip(tax.canonical, again.canonical):
        assert a.pose6d.tobytes() == b.pose6d.tobytes()
    assert not np.array_equal(build_taxonomy(1).curls_deg, tax.curls_deg)


def test_taxonomy_hierarchy(tax):
    counts = np.bincount(tax.fine_to_coarse, minlength=tax.n_coarse)
    assert np.all(counts >= 1) and np.any(counts >= 2)
    m = build_taxonomy(0, 2, 2)
    assert list(m.fine_to_coarse) == [0, 1]


def test_taxonomy_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        build_taxonomy(0, 6, 5)
    with pytest.raises(ConfigError):
        build_taxonomy(0, 1, 3)


def _canonical_joints(tax, f):
    j, _ = hand_forward_np(TREE, tax.canonical[f].pose6d, np.zeros(10))
    return j


def test_variants_differ_in_few_joints(tax):
    found_subtle = False
    for c in range(tax.n_coarse):
        fines = tax.fine_labels_of(c)
        for f in fines[1:]:
            ra = rot6d_to_matrix(tax.canonical[fines[0]].pose6d).data
            rb = rot6d_to_matrix(tax.canonical[f].pose6d).data
            changed = np.abs(ra - rb).max(axis=(1, 2)) > 1e-6
            assert 1 <= changed.sum() <= 4
            d = np.linalg.norm(_canonical_joints(tax, fines[0]) - _canonical_joints(tax, f), axis=1).mean()
            found_subtle |= 0 < d < 15
    assert found_subtle


def test_coarse_of_validates(tax):
    with pytest.raises(LabelError):
        tax.coarse_of(10)


# ---------------------------------------------------------------- pose sampling

def test_sample_pose_noise_free_and_deterministic(tax):
    s = sample_pose(tax, 3, noise_deg=0.0, seed=7)
    np.testing.assert_array_equal(s.pose6d, tax.canonical[3].pose6d)
    assert np.all(np.abs(s.shape) <= 3)
    a, b = sample_pose(tax, 3, 5.0, seed=7), sample_pose(tax, 3, 5.0, seed=7)
    assert a.pose6d.tobytes() == b.pose6d.tobytes()
    assert not np.array_equal(a.pose6d, sample_pose(tax, 3, 5.0, seed=8).pose6d)


def test_sample_pose_errors(tax):
    with pytest.raises(LabelError):
        sample_pose(tax, 99)
    with pytest.raises(ConfigError):
        sample_pose(tax, 0, noise_deg=25.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 9), st.integers(0, 10 ** 6), st.floats(0.0, 20.0))
def test_sample_pose_noise_bounded(fine, seed, noise):
    tax = build_taxonomy(0)
    s = sample_pose(tax, fine, noise, seed)
    ra = rot6d_to_matrix(tax.canonical[fine].pose6d).data.astype(np.float64)
    rb = rot6d_to_matrix(s.pose6d).data.astype(np.float64)
    rel = np.einsum("nji,njk->nik", ra, rb)
    u, _, vt = np.linalg.svd(rel)  # re-orthonormalize the f32 product
    angle = np.degrees(Rotation.from_matrix(u @ vt).magnitude())
    assert np.all(angle <= noise + 1e-2)


def test_noise5_displacement_below_20mm(tax):
    for f in range(tax.n_fine):
        canon = _canonical_joints(tax, f)
        for seed in range(5):
            s = sample_pose(tax, f, 5.0, seed)
            j, _ = hand_forward_np(TREE, s.pose6d, np.zeros(10))
            assert np.linalg.norm(j - canon, axis=1).mean() < 20


# ---------------------------------------------------------------- rendering

def test_single_joint_at_centre():
    img = render_image_grid(np.zeros((1, 3)), IMG)
    peak = np.unravel_index(np.argmax(img[..., 0]), img.shape[:2])
    assert peak in {(7, 7), (7, 8), (8, 7), (8, 8)}
    assert img.min() >= 0 and img.max() <= 1


def test_clamped_joints_pile_into_corner():
    far = np.tile([[1000.0, 1000.0, 0.0]], (21, 1))
    img = render_image_grid(far, IMG)[..., 0]
    assert img[-4:, -4:].sum() > 0.9 * img.sum()


def test_splat_mass_matches_gaussian_integral():
    xy = np.random.default_rng(0).uniform(6.0, 9.0, size=(21, 2))
    mass = gaussian_splats(xy, 16, sigma=1.5).sum()
    assert mass == pytest.approx(21 * 2 * np.pi * 1.5 ** 2, rel=1e-3)


def test_occlusion_drops_splats():
    j, _ = hand_forward_np(TREE, np.tile([1.0, 0, 0, 0, 1, 0], (16, 1)), np.zeros(10))
    full = render_image_grid(j, IMG)
    dropped = render_image_grid(j, IMG, drop=tuple(range(1, 21)))
    single = render_image_grid(j[:1], IMG)
    np.testing.assert_allclose(dropped[..., :2], single[..., :2], atol=1e-6)
    assert not np.allclose(full, dropped)


# ---------------------------------------------------------------- dataset

def test_split_counts_and_errors():
    assert split_counts(500, (0.7, 0.15, 0.15)) == (350, 75, 75)
    with pytest.raises(ConfigError):
        split_counts(500, (0.5, 0.6, 0.1))


def test_dataset_counts_and_stratification(dataset):
    assert [len(dataset[k]) for k in ("train", "val", "test")] == [350, 75, 75]
    for split in dataset.values():
        hist = np.bincount([s.fine for s in split], minlength=10)
        assert hist.max() - hist.min() <= 1


def test_generator_consistency(dataset, tax):
    batch = stack_batch(dataset["train"][:60])
    joints, _ = hand_forward_np(TREE, batch["gt_pose6d"], batch["gt_shape"])
    np.testing.assert_allclose(joints, batch["gt_joints_mm"], atol=1e-4)
    np.testing.assert_allclose(VOL.volume_to_camera(batch["gt_25d"]), batch["gt_joints_mm"], atol=1e-3)
    for s in dataset["train"]:
        assert s.coarse == tax.coarse_of(s.fine)
        assert s.image.shape == (16, 16, 3)


def test_generation_deterministic(tax, tmp_path):
    a = generate_dataset(tax, n_per_fine=5, seed=3)
    b = generate_dataset(tax, n_per_fine=5, seed=3)
    write_dataset(a["train"], tmp_path / "a.jsonl")
    write_dataset(b["train"], tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_default_noise_is_within_sampler_range():
    assert 0 <= DEFAULT_NOISE_DEG <= 20


def test_separability_floor(dataset):
    assert nearest_centroid_accuracy(dataset["train"], dataset["test"]) >= 0.95


# ---------------------------------------------------------------- file format

def test_dataset_round_trip(dataset, tmp_path):
    samples = dataset["val"][:10]
    write_dataset(samples, tmp_path / "x.jsonl")
    back = read_dataset(tmp_path / "x.jsonl")
    assert len(back) == 10
    for a, b in zip(samples, back):
        assert (a.coarse, a.fine) == (b.coarse, b.fine)
        for k in ARRAY_FIELDS:
            np.testing.assert_array_equal(getattr(a, k), getattr(b, k))


def test_empty_dataset_round_trip(tmp_path):
    write_dataset([], tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_text() == ""
    assert read_dataset(tmp_path / "e.jsonl") == []


def test_truncated_file_reports_line(dataset, tmp_path):
    write_dataset(dataset["val"][:3], tmp_path / "t.jsonl")
    text = (tmp_path / "t.jsonl").read_text()
    (tmp_path / "t.jsonl").write_text(text[: len(text) - 40])
    with pytest.raises(ParseError, match="line 3"):
        read_dataset(tmp_path / "t.jsonl")
