"""Text and PGM serialization for every artifact the pipeline produces.

All floating-point text is written with 17 significant digits so a
write/read round trip is value-exact for doubles.  Formats:

* ``.pts``   — first line ``T inner_count``, then T ``x y`` lines,
  inner chain first.
* ``.lmk``   — three ``x y`` lines: apex, first basal corner, second
  basal corner.
* ``.pgm``   — binary (P5) 8-bit; masks use 255 for foreground.
* ``.fmask`` — exact soft-mask text: ``width height`` then row-major
  values, one row per line.
* ``.ssm``   — shape model: header ``SSM1 T beta_dim``, mean (2T
  values), eigenvalues, then one row per component.
* ``.reg``   — regressor: header ``REG1 n_layers``, layer sizes line,
  then per layer the weight matrix (one line per row) and its bias line.
* ``manifest.tsv`` — dataset table: id, seed, theta_gt, beta_gt, spacing.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .alignment import LandmarkTriple
from .geometry import PointCloud
from .raster import BinaryMask, RasterMask
from .regressor import RegressorModel
from .ssm import ShapeModel
from .train import TrainReport

FMT = "%.17g"


def _fmt(value: float) -> str:
    return FMT % float(value)


def _fmt_row(values) -> str:
    return " ".join(_fmt(v) for v in np.asarray(values, dtype=float).reshape(-1))


# ---------------------------------------------------------------------------
# point clouds and landmarks

def save_points(path, cloud: PointCloud) -> None:
    lines = [f"{cloud.num_points} {cloud.inner_count}"]
    lines += [f"{_fmt(x)} {_fmt(y)}" for x, y in cloud.points]
    Path(path).write_text("\n".join(lines) + "\n")


def load_points(path) -> PointCloud:
    tokens = Path(path).read_text().split()
    if len(tokens) < 2:
        raise ValueError(f"{path}: truncated point file")
    t, inner = int(tokens[0]), int(tokens[1])
    values = tokens[2:]
    if len(values) != 2 * t:
        raise ValueError(f"{path}: expected {2 * t} coordinates, "
                         f"found {len(values)}")
    pts = np.array(values, dtype=float).reshape(t, 2)
    return PointCloud(pts, inner)


def save_landmarks(path, landmarks: LandmarkTriple) -> None:
    rows = [landmarks.apex, landmarks.basal_a, landmarks.basal_b]
    text = "\n".join(f"{_fmt(x)} {_fmt(y)}" for x, y in rows)
    Path(path).write_text(text + "\n")


def load_landmarks(path) -> LandmarkTriple:
    values = Path(path).read_text().split()
    if len(values) != 6:
        raise ValueError(f"{path}: landmark file must hold 3 x/y pairs")
    a = np.array(values, dtype=float).reshape(3, 2)
    return LandmarkTriple(apex=a[0], basal_a=a[1], basal_b=a[2])


# ---------------------------------------------------------------------------
# PGM images and masks

def save_pgm(path, gray: np.ndarray) -> None:
    """Write an 8-bit binary PGM from a uint8 array."""
    arr = np.asarray(gray)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise ValueError("save_pgm expects a 2-D uint8 array")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


def load_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pos += 1  # single whitespace after the header
    if len(data) - pos < width * height:
        raise ValueError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height,
                           offset=pos)
    return pixels.reshape(height, width).copy()


def save_image_pgm(path, image: np.ndarray) -> None:
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    save_pgm(path, np.round(img * 255.0).astype(np.uint8))


def load_image_pgm(path) -> np.ndarray:
    return load_pgm(path).astype(float) / 255.0


def save_mask_pgm(path, mask: BinaryMask) -> None:
    save_pgm(path, np.where(mask.data, 255, 0).astype(np.uint8))


def load_mask_pgm(path, spacing_mm: float = 1.0) -> BinaryMask:
    return BinaryMask(load_pgm(path) > 127, spacing_mm=spacing_mm)


def save_fmask(path, mask: RasterMask) -> None:
    lines = [f"{mask.width} {mask.height}"]
    lines += [_fmt_row(row) for row in mask.data]
    Path(path).write_text("\n".join(lines) + "\n")


def load_fmask(path, spacing_mm: float = 1.0) -> RasterMask:
    tokens = Path(path).read_text().split()
    if len(tokens) < 2:
        raise ValueError(f"{path}: truncated soft-mask file")
    width, height = int(tokens[0]), int(tokens[1])
    values = tokens[2:]
    if len(values) != width * height:
        raise ValueError(f"{path}: expected {width * height} values, "
                         f"found {len(values)}")
    data = np.array(values, dtype=float).reshape(height, width)
    return RasterMask(data, spacing_mm=spacing_mm)


# ---------------------------------------------------------------------------
# shape model

def save_model(path, model: ShapeModel) -> None:
    lines = [f"SSM1 {model.num_points} {model.n_modes}",
             _fmt_row(model.mean_vector),
             _fmt_row(model.eigenvalues)]
    lines += [_fmt_row(row) for row in model.components]
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> ShapeModel:
    tokens = Path(path).read_text().split()
    if not tokens or tokens[0] != "SSM1":
        raise ValueError(f"{path}: not a shape model file")
    t, d = int(tokens[1]), int(tokens[2])
    values = tokens[3:]
    expected = 2 * t + d + d * 2 * t
    if len(values) != expected:
        raise ValueError(f"{path}: expected {expected} values, "
                         f"found {len(values)}")
    arr = np.array(values, dtype=float)
    mean = arr[: 2 * t].reshape(t, 2)
    eig = arr[2 * t : 2 * t + d]
    comp = arr[2 * t + d :].reshape(d, 2 * t)
    # the file carries only the kept modes, so the recoverable variance
    # total is the sum of the stored eigenvalues
    return ShapeModel(mean=PointCloud(mean, t // 2), components=comp,
                      eigenvalues=eig, total_variance=float(eig.sum()))


# ---------------------------------------------------------------------------
# regressor and training report

def save_regressor(path, net: RegressorModel) -> None:
    lines = [f"REG1 {len(net.layer_sizes)}",
             " ".join(str(s) for s in net.layer_sizes)]
    for w, b in zip(net.weights, net.biases):
        lines += [_fmt_row(row) for row in w]
        lines.append(_fmt_row(b))
    Path(path).write_text("\n".join(lines) + "\n")


def load_regressor(path) -> RegressorModel:
    tokens = Path(path).read_text().split()
    if not tokens or tokens[0] != "REG1":
        raise ValueError(f"{path}: not a regressor file")
    n_layers = int(tokens[1])
    sizes = [int(s) for s in tokens[2 : 2 + n_layers]]
    values = np.array(tokens[2 + n_layers :], dtype=float)
    net = RegressorModel(sizes)
    pos = 0
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        net.weights[i] = values[pos : pos + n_in * n_out].reshape(n_in, n_out)
        pos += n_in * n_out
        net.biases[i] = values[pos : pos + n_out].copy()
        pos += n_out
    if pos != values.size:
        raise ValueError(f"{path}: parameter count does not match the "
                         f"declared layer sizes")
    return net


def save_report(path, report: TrainReport) -> None:
    Path(path).write_text("\n".join(report.to_lines()) + "\n")


def load_report(path) -> TrainReport:
    report = TrainReport()
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        e, s, tp, vp, vd = line.split()
        report.rows.append((int(e), int(s), float(tp), float(vp), float(vd)))
        if int(s) == 2 and report.stage2_start is None:
            report.stage2_start = int(e)
    return report


# ---------------------------------------------------------------------------
# dataset directories

@dataclass
class DatasetRecord:
    sample_id: str
    seed: int
    image: np.ndarray
    mask: BinaryMask
    points: PointCloud
    landmarks: LandmarkTriple
    theta_gt: np.ndarray | None
    beta_gt: np.ndarray | None
    spacing_mm: float


def _pack(values) -> str:
    if values is None:
        return "-"
    return ",".join(_fmt(v) for v in np.asarray(values, dtype=float).reshape(-1))


def _unpack(cell: str):
    if cell == "-":
        return None
    return np.array([float(v) for v in cell.split(",")])


def save_dataset(out_dir, samples, spacing_mm: float = 1.0) -> None:
    """Write one PGM image, mask, .pts, and .lmk file per sample plus the
    dataset manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["id\tseed\ttheta_gt\tbeta_gt\tspacing"]
    for i, sample in enumerate(samples):
        stem = f"{i:04d}"
        save_image_pgm(out / f"{stem}.pgm", sample.image)
        save_mask_pgm(out / f"{stem}.mask.pgm", sample.mask)
        save_points(out / f"{stem}.pts", sample.points)
        save_landmarks(out / f"{stem}.lmk", sample.landmarks)
        rows.append("\t".join([stem, str(sample.seed),
                               _pack(sample.theta_gt), _pack(sample.beta_gt),
                               _fmt(spacing_mm)]))
    (out / "manifest.tsv").write_text("\n".join(rows) + "\n")


def _load_record(root: Path, line: str) -> DatasetRecord:
    stem, seed, theta, beta, spacing = line.split("\t")
    spacing_mm = float(spacing)
    theta_gt = _unpack(theta)
    return DatasetRecord(
        sample_id=stem,
        seed=int(seed),
        image=load_image_pgm(root / f"{stem}.pgm"),
        mask=load_mask_pgm(root / f"{stem}.mask.pgm", spacing_mm),
        points=load_points(root / f"{stem}.pts"),
        landmarks=load_landmarks(root / f"{stem}.lmk"),
        theta_gt=None if theta_gt is None else theta_gt.reshape(2, 3),
        beta_gt=_unpack(beta),
        spacing_mm=spacing_mm,
    )


def _manifest_lines(in_dir):
    root = Path(in_dir)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest}: dataset manifest not found")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0].split("\t")[0] != "id":
        raise ValueError(f"{manifest}: malformed dataset manifest")
    return root, [ln for ln in lines[1:] if ln.strip()]


def load_dataset(in_dir) -> list[DatasetRecord]:
    root, lines = _manifest_lines(in_dir)
    return [_load_record(root, line) for line in lines]


def load_dataset_lenient(in_dir):
    """Like load_dataset, but collects per-sample load failures instead of
    raising; returns (records, [(sample_id, reason), ...])."""
    root, lines = _manifest_lines(in_dir)
    records = []
    failures = []
    for line in lines:
        stem = line.split("\t", 1)[0]
        try:
            records.append(_load_record(root, line))
        except (ValueError, OSError) as err:
            failures.append((stem, str(err)))
    return records, failures


# ---------------------------------------------------------------------------
# run manifests

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir, command: str, argv, config: dict,
                       seed, inputs, outputs, elapsed_s: float,
                       version: str) -> Path:
    """One JSON manifest per artifact-producing command, recording the
    command line, effective config, seed, content hashes of every input
    and output file, tool version, and wall time."""
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": {k: _json_safe(v) for k, v in config.items()},
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "tool_version": version,
        "elapsed_s": elapsed_s,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    path = Path(out_dir) / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _json_safe(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, (tuple, list)):
        return [_json_safe(v) for v in value]
    return value
