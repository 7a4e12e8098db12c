import shutil

from sfgan import synth
from sfgan.dataset import build_index, load_sample


def test_empty_directory_gives_empty_index(tmp_path):
    index = build_index(tmp_path, "train", "synthetic")
    assert len(index) == 0 and index.diagnostics == []


def test_generated_set_indexed_sorted(synthetic_index):
    assert len(synthetic_index) == 4
    ids = [r.id for r in synthetic_index]
    assert ids == sorted(ids) == ["000000", "000001", "000002", "000003"]


def test_missing_disparity_excluded(tmp_path, synthetic_root):
    root = tmp_path / "copy"
    shutil.copytree(synthetic_root, root)
    (root / "synthetic" / "train" / "000002" / "disp_t1.pfm").unlink()
    index = build_index(root, "train", "synthetic")
    assert len(index) == 3
    assert index.excluded_count == 1
    assert "000002" in index.diagnostics[0] and "disp_t1" in index.diagnostics[0]


def test_inconsistent_dimensions_excluded(tmp_path, synthetic_root):
    root = tmp_path / "copy"
    shutil.copytree(synthetic_root, root)
    d = root / "synthetic" / "train"
    other = tmp_path / "small"
    synth.generate_dataset(1, 99, other, synth.GenerationConfig(height=32, width=32))
    shutil.copy(other / "synthetic" / "train" / "000000" / "flow.flo", d / "000003" / "flow.flo")
    index = build_index(root, "train", "synthetic")
    assert [r.id for r in index] == ["000000", "000001", "000002"]
    assert "inconsistent dimensions" in index.diagnostics[0]


def test_load_sample_ground_truth_valid(synthetic_index):
    quad, gt = load_sample(synthetic_index[0])
    assert quad.hw == gt.hw == (64, 64)
    assert gt.is_ground_truth_valid()
