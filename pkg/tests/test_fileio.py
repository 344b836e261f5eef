import hashlib
import json

import numpy as np
import pytest

from ringseg import (BinaryMask, LandmarkTriple, PointCloud, RasterMask,
                     RegressorModel, TrainReport)
from ringseg.fileio import (load_dataset, load_dataset_lenient, load_fmask,
                            load_image_pgm, load_landmarks, load_mask_pgm,
                            load_model, load_pgm, load_points,
                            load_regressor, load_report, save_dataset,
                            save_fmask, save_image_pgm, save_landmarks,
                            save_mask_pgm, save_model, save_pgm, save_points,
                            save_regressor, save_report, sha256_file,
                            write_run_manifest)


def random_cloud(rng, t=12):
    return PointCloud(rng.normal(10.0, 3.0, (t, 2)), t // 2)


def test_points_round_trip_is_exact(tmp_path):
    cloud = random_cloud(np.random.default_rng(0))
    path = tmp_path / "c.pts"
    save_points(path, cloud)
    back = load_points(path)
    assert np.array_equal(back.points, cloud.points)
    assert back.inner_count == cloud.inner_count


def test_points_loader_rejects_bad_files(tmp_path):
    short = tmp_path / "short.pts"
    short.write_text("8\n")
    with pytest.raises(ValueError, match="truncated"):
        load_points(short)
    wrong = tmp_path / "wrong.pts"
    wrong.write_text("8 4\n1 2\n3 4\n")
    with pytest.raises(ValueError, match="expected 16 coordinates"):
        load_points(wrong)


def test_landmarks_round_trip_is_exact(tmp_path):
    lmk = LandmarkTriple(apex=(3.25, 7.5), basal_a=(1.0, 2.0),
                         basal_b=(9.125, 2.0))
    path = tmp_path / "a.lmk"
    save_landmarks(path, lmk)
    back = load_landmarks(path)
    assert np.array_equal(back.apex, lmk.apex)
    assert np.array_equal(back.basal_a, lmk.basal_a)
    assert np.array_equal(back.basal_b, lmk.basal_b)


def test_landmarks_loader_rejects_wrong_count(tmp_path):
    path = tmp_path / "bad.lmk"
    path.write_text("1 2 3 4 5\n")
    with pytest.raises(ValueError, match="3 x/y pairs"):
        load_landmarks(path)


def test_pgm_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(1)
    gray = rng.integers(0, 256, (13, 17), dtype=np.uint8)
    path = tmp_path / "g.pgm"
    save_pgm(path, gray)
    assert np.array_equal(load_pgm(path), gray)


def test_pgm_loader_handles_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    body = bytes(range(6))
    path.write_bytes(b"P5\n# a comment line\n3 2\n255\n" + body)
    assert np.array_equal(load_pgm(path),
                          np.arange(6, dtype=np.uint8).reshape(2, 3))


def test_pgm_loader_rejects_bad_files(tmp_path):
    ascii_pgm = tmp_path / "a.pgm"
    ascii_pgm.write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
    with pytest.raises(ValueError, match="not a binary PGM"):
        load_pgm(ascii_pgm)
    deep = tmp_path / "deep.pgm"
    deep.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(ValueError, match="8-bit"):
        load_pgm(deep)
    cut = tmp_path / "cut.pgm"
    cut.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
    with pytest.raises(ValueError, match="truncated"):
        load_pgm(cut)
    with pytest.raises(ValueError, match="uint8"):
        save_pgm(tmp_path / "f.pgm", np.zeros((2, 2)))


def test_image_round_trip_quantizes_to_half_step(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.random((9, 9))
    path = tmp_path / "i.pgm"
    save_image_pgm(path, img)
    back = load_image_pgm(path)
    assert np.max(np.abs(back - img)) <= 0.5 / 255.0 + 1e-12
    # values already on the 8-bit grid survive exactly
    grid = np.round(img * 255.0) / 255.0
    save_image_pgm(path, grid)
    assert np.array_equal(load_image_pgm(path), grid)


def test_mask_round_trip_is_exact(rings20, tmp_path):
    mask = rings20[0].mask
    path = tmp_path / "m.pgm"
    save_mask_pgm(path, mask)
    back = load_mask_pgm(path, spacing_mm=2.5)
    assert np.array_equal(back.data, mask.data)
    assert back.spacing_mm == 2.5


def test_fmask_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(3)
    soft = RasterMask(rng.random((6, 11)), spacing_mm=1.0)
    path = tmp_path / "s.fmask"
    save_fmask(path, soft)
    back = load_fmask(path, spacing_mm=3.0)
    assert np.array_equal(back.data, soft.data)
    assert back.spacing_mm == 3.0
    bad = tmp_path / "bad.fmask"
    bad.write_text("4 4\n0.5 0.5\n")
    with pytest.raises(ValueError, match="expected 16 values"):
        load_fmask(bad)


def test_model_round_trip_is_exact(model20, tmp_path):
    path = tmp_path / "m.ssm"
    save_model(path, model20)
    back = load_model(path)
    assert np.array_equal(back.mean.points, model20.mean.points)
    assert np.array_equal(back.eigenvalues, model20.eigenvalues)
    assert np.array_equal(back.components, model20.components)
    # only the kept eigenvalues are stored, so the reloaded variance
    # total is their sum rather than the full training-set trace
    assert back.total_variance == pytest.approx(model20.eigenvalues.sum())


def test_model_loader_rejects_bad_files(tmp_path):
    wrong_magic = tmp_path / "w.ssm"
    wrong_magic.write_text("NOPE 4 1\n0 0 0 0 0 0 0 0\n")
    with pytest.raises(ValueError, match="not a shape model"):
        load_model(wrong_magic)
    short = tmp_path / "s.ssm"
    short.write_text("SSM1 4 1\n0 0 0 0\n")
    with pytest.raises(ValueError, match="expected"):
        load_model(short)


def test_regressor_round_trip_preserves_predictions(tmp_path):
    rng = np.random.default_rng(4)
    net = RegressorModel([9, 7, 5], seed=8)
    for w in net.weights:
        w += rng.normal(0.0, 0.1, w.shape)
    path = tmp_path / "n.reg"
    save_regressor(path, net)
    back = load_regressor(path)
    assert back.layer_sizes == net.layer_sizes
    for a, b in zip(net.parameters(), back.parameters()):
        assert np.array_equal(a, b)
    x = rng.normal(0.0, 1.0, 9)
    assert np.array_equal(net.forward(x)[0], back.forward(x)[0])


def test_regressor_loader_rejects_bad_files(tmp_path):
    bad = tmp_path / "b.reg"
    bad.write_text("XXX 2\n3 2\n0 0 0 0 0 0 0 0\n")
    with pytest.raises(ValueError, match="not a regressor"):
        load_regressor(bad)
    cut = tmp_path / "c.reg"
    cut.write_text("REG1 2\n3 2\n0 0 0\n")
    with pytest.raises(ValueError):
        load_regressor(cut)


def test_report_round_trip(tmp_path):
    report = TrainReport()
    report.rows = [(0, 1, 0.5, 0.6, 0.7), (1, 1, 0.4, 0.5, 0.75),
                   (2, 2, 0.3, 0.4, 0.8)]
    report.stage2_start = 2
    path = tmp_path / "r.report"
    save_report(path, report)
    back = load_report(path)
    assert back.rows == report.rows
    assert back.stage2_start == 2


def test_dataset_round_trip(rings20, tmp_path):
    samples = rings20[:3]
    save_dataset(tmp_path, samples, spacing_mm=1.0)
    records = load_dataset(tmp_path)
    assert [r.sample_id for r in records] == ["0000", "0001", "0002"]
    for rec, s in zip(records, samples):
        assert rec.seed == s.seed
        assert np.array_equal(rec.mask.data, s.mask.data)
        assert np.array_equal(rec.points.points, s.points.points)
        assert np.array_equal(rec.landmarks.apex, s.landmarks.apex)
        assert rec.theta_gt.shape == (2, 3)
        assert np.array_equal(rec.theta_gt, s.theta_gt)
        assert np.max(np.abs(rec.image - s.image)) <= 0.5 / 255.0 + 1e-12
        assert rec.spacing_mm == 1.0


def test_dataset_requires_manifest(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        load_dataset(tmp_path)
    (tmp_path / "manifest.tsv").write_text("oops\n")
    with pytest.raises(ValueError, match="malformed"):
        load_dataset(tmp_path)


def test_lenient_loader_collects_failures(rings20, tmp_path):
    save_dataset(tmp_path, rings20[:3])
    (tmp_path / "0001.pts").write_text("8 4\n1 2\n")
    records, failures = load_dataset_lenient(tmp_path)
    assert [r.sample_id for r in records] == ["0000", "0002"]
    assert len(failures) == 1
    assert failures[0][0] == "0001"
    assert "0001.pts" in failures[0][1]


def test_run_manifest_records_hashes(tmp_path):
    src = tmp_path / "in.txt"
    src.write_bytes(b"hello")
    dst = tmp_path / "out.txt"
    dst.write_bytes(b"world")
    assert sha256_file(src) == hashlib.sha256(b"hello").hexdigest()
    path = write_run_manifest(tmp_path, "demo", ["demo", "--x", "1"],
                              {"x": np.float64(1.5), "h": (2, 3)}, 7,
                              [src], [dst], 0.25, "0.1.0")
    manifest = json.loads(path.read_text())
    assert manifest["command"] == "demo"
    assert manifest["argv"] == ["demo", "--x", "1"]
    assert manifest["config"] == {"x": 1.5, "h": [2, 3]}
    assert manifest["seed"] == 7
    assert manifest["inputs"][str(src)] == sha256_file(src)
    assert manifest["outputs"][str(dst)] == sha256_file(dst)
