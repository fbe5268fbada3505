"""Dataset ingestion, patient splits, temporal resampling, toy data.

On-disk layout consumed by the loader (one directory per patient):

    root/
      patient0001/
        frame_0000.png ... frame_{N-1}.png   8-bit grayscale, ED first, ES last
        label_ed.png                         class ids 0..3 as pixel values
        record.json                          {"patient_id", "n_frames",
                                              "ed_index": 0, "es_index": N-1,
                                              "view": "2CH"}

Pixel values map to [-1, 1] via v = px / 127.5 - 1; the inverse rounding is
lossless. Directories without a record.json are ignored, so run metadata can
live next to the data.
"""

import json
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigurationError, DatasetError
from .semantics import NUM_CLASSES, SemanticCondition, one_hot_labels

VIEW = "2CH"


@dataclass
class PatientRecord:
    """One cardiac cycle: frames in [-1, 1], ED-frame label map, 2CH view."""

    patient_id: str
    frames: np.ndarray          # (N, H, W) float32 in [-1, 1]
    label_ed: np.ndarray        # (H, W) int64, classes 0..3
    view: str = VIEW

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]

    def all_ids(self) -> list[str]:
        return self.train + self.val + self.test


def _load_gray(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.uint8)


def normalize_frames(px: np.ndarray) -> np.ndarray:
    return (px.astype(np.float32) / 127.5 - 1.0)


def denormalize_frame(v: np.ndarray) -> np.ndarray:
    return np.round((np.clip(v, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def _validate_patient_dir(pdir: Path) -> PatientRecord:
    errors = []
    record_path = pdir / "record.json"
    try:
        meta = json.loads(record_path.read_text())
    except Exception as exc:
        raise DatasetError(f"{record_path}: unreadable record ({exc})")

    n = int(meta.get("n_frames", -1))
    if n < 2:
        errors.append(f"{record_path}: n_frames must be >= 2, got {n}")
    if meta.get("view") != VIEW:
        errors.append(f"{record_path}: view {meta.get('view')!r} is not {VIEW!r}")
    if meta.get("ed_index") != 0 or (n >= 2 and meta.get("es_index") != n - 1):
        errors.append(f"{record_path}: expected ed_index=0 and es_index={n - 1}")
    if errors:
        raise DatasetError("; ".join(errors))

    frames = []
    shape = None
    for i in range(n):
        fpath = pdir / f"frame_{i:04d}.png"
        if not fpath.exists():
            errors.append(f"{fpath}: missing frame file")
            continue
        arr = _load_gray(fpath)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            errors.append(f"{fpath}: frame shape {arr.shape} differs from {shape}")
        frames.append(arr)

    label_path = pdir / "label_ed.png"
    label = None
    if not label_path.exists():
        errors.append(f"{label_path}: missing ED label file")
    else:
        label = np.asarray(Image.open(label_path), dtype=np.int64)
        if label.ndim != 2:
            errors.append(f"{label_path}: label must be a single-channel image")
        elif shape is not None and label.shape != shape:
            errors.append(f"{label_path}: label shape {label.shape} differs from frames {shape}")
        elif label.max(initial=0) >= NUM_CLASSES or label.min(initial=0) < 0:
            bad = sorted(set(np.unique(label).tolist()) - set(range(NUM_CLASSES)))
            errors.append(f"{label_path}: class ids {bad} outside 0..{NUM_CLASSES - 1}")
    if errors:
        raise DatasetError("; ".join(errors))

    return PatientRecord(
        patient_id=str(meta.get("patient_id", pdir.name)),
        frames=normalize_frames(np.stack(frames)),
        label_ed=label,
        view=VIEW,
    )


def load_dataset(root: Path | str) -> list[PatientRecord]:
    """Load and validate every patient directory under root.

    Any invalid record fails the load with a diagnostic naming the offending
    files. An empty root returns an empty list with a warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    patient_dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / "record.json").exists())
    if not patient_dirs:
        warnings.warn(f"no patient records found under {root}")
        return []
    records = []
    problems = []
    for pdir in patient_dirs:
        try:
            records.append(_validate_patient_dir(pdir))
        except DatasetError as exc:
            problems.append(str(exc))
    if problems:
        raise DatasetError("invalid records:\n" + "\n".join(problems))
    return records


def patient_split(records: list[PatientRecord], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    """Deterministic patient-level split; floor partition, remainder to train."""
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ConfigurationError(f"ratios must be three values summing to 1, got {ratios}")
    n = len(records)
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise DatasetError(f"{n} records cannot fill train/val/test at ratios {ratios}")
    ids = sorted(r.patient_id for r in records)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
    )


def resample_indices(n_frames: int, k: int) -> np.ndarray:
    """Uniform nearest-index selection over [0, N-1] with pinned endpoints."""
    if k < 2:
        raise ConfigurationError(f"frame count K must be >= 2, got {k}")
    idx = np.floor(np.linspace(0.0, n_frames - 1, k) + 0.5).astype(np.int64)
    idx[0], idx[-1] = 0, n_frames - 1
    return idx


def resample_frames(record: PatientRecord, k: int) -> torch.Tensor:
    """Temporal resampling to exactly K frames -> (K, 1, H, W) float32.

    Nearest-frame selection, never blending: interpolated frames would
    fabricate speckle texture that was never imaged.
    """
    idx = resample_indices(record.n_frames, k)
    return torch.from_numpy(record.frames[idx][:, None].copy())


def record_condition(record: PatientRecord) -> SemanticCondition:
    return one_hot_labels(torch.from_numpy(record.label_ed))


def _ellipse(hw: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    ys, xs = np.mgrid[0:hw, 0:hw]
    return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0


def _toy_masks(hw: int, geo: dict, scale: float) -> dict:
    """Cavity/myocardium/epicardium/atrium masks at one contraction scale."""
    ry = geo["ry"] * scale
    rx = geo["rx"] * scale
    tm = geo["tm"] * (1.0 + 0.35 * (1.0 - scale))
    te = geo["te"]
    cavity = _ellipse(hw, geo["cy"], geo["cx"], ry, rx)
    myo = _ellipse(hw, geo["cy"], geo["cx"], ry + tm, rx + tm) & ~cavity
    epi = _ellipse(hw, geo["cy"], geo["cx"], ry + tm + te, rx + tm + te) & ~cavity & ~myo
    la_scale = 1.0 + 0.25 * (1.0 - scale)
    la = _ellipse(hw, geo["la_cy"], geo["cx"], geo["la_ry"] * la_scale, geo["la_rx"] * la_scale)
    la &= ~(cavity | myo | epi)
    return {"cavity": cavity, "myo": myo, "epi": epi, "la": la}


def _toy_label(hw: int, masks: dict) -> np.ndarray:
    label = np.zeros((hw, hw), dtype=np.uint8)
    label[masks["epi"]] = 1
    label[masks["myo"]] = 2
    label[masks["la"]] = 3
    return label


def toy_generate(n_patients: int, k: int, hw: int, seed: int, out_root: Path | str) -> Path:
    """Write a synthetic CAMUS-layout dataset of contracting cardiac phantoms.

    Each patient is a dark-cavity ellipse with myocardium and epicardium
    rings and a left-atrium blob below, contracting from ED to ES under
    multiplicative speckle noise. The ED label map is exact by construction
    and the tree is bit-identical for a given seed.
    """
    if n_patients < 1 or k < 2:
        raise ConfigurationError(f"need n_patients >= 1 and K >= 2, got {n_patients}, {k}")
    if hw % 8 != 0 or hw < 16:
        raise ConfigurationError(f"size must be a multiple of 8 and >= 16, got {hw}")
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    base_intensity = {"bg": 0.14, "cavity": 0.05, "myo": 0.55, "epi": 0.72, "la": 0.07}
    for p in range(n_patients):
        rng = np.random.default_rng(np.random.SeedSequence([seed, p]))
        geo = {
            "cy": hw * (0.36 + 0.03 * rng.uniform(-1, 1)),
            "cx": hw * (0.50 + 0.03 * rng.uniform(-1, 1)),
            "ry": hw * (0.17 + 0.02 * rng.uniform(-1, 1)),
            "rx": hw * (0.12 + 0.015 * rng.uniform(-1, 1)),
            "tm": max(2.0, hw * 0.07),
            "te": max(1.5, hw * 0.05),
            "la_ry": hw * 0.085,
            "la_rx": hw * 0.10,
        }
        geo["la_cy"] = geo["cy"] + geo["ry"] + geo["tm"] + geo["te"] + geo["la_ry"] * 0.9
        # speckle is coherent across the cycle (static transducer), so one
        # smoothed multiplicative field per patient
        g = rng.standard_normal((hw, hw)).astype(np.float32)
        speckle = (g + np.roll(g, 1, 0) + np.roll(g, -1, 0)
                   + np.roll(g, 1, 1) + np.roll(g, -1, 1)) / np.sqrt(5.0)

        pdir = out_root / f"patient{p + 1:04d}"
        pdir.mkdir(exist_ok=True)
        label_ed = None
        for f in range(k):
            phase = f / (k - 1)
            scale = 1.0 - 0.28 * (1.0 - np.cos(np.pi * phase)) / 2.0
            masks = _toy_masks(hw, geo, scale)
            if f == 0:
                label_ed = _toy_label(hw, masks)
                present = set(np.unique(label_ed).tolist())
                if present != set(range(NUM_CLASSES)):
                    raise DatasetError(
                        f"toy phantom patient {p} produced classes {sorted(present)}; "
                        f"size {hw} too small for the geometry")
            img = np.full((hw, hw), base_intensity["bg"], dtype=np.float32)
            for name in ("epi", "myo", "la", "cavity"):
                img[masks[name]] = base_intensity[name]
            img = img * np.clip(1.0 + 0.4 * speckle, 0.15, 2.2)
            px = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(px, mode="L").save(pdir / f"frame_{f:04d}.png")
        Image.fromarray(label_ed, mode="L").save(pdir / "label_ed.png")
        meta = {"patient_id": pdir.name, "n_frames": k, "ed_index": 0,
                "es_index": k - 1, "view": VIEW}
        (pdir / "record.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out_root


_MHD_DTYPES = {
    "MET_UCHAR": np.uint8, "MET_CHAR": np.int8,
    "MET_USHORT": np.uint16, "MET_SHORT": np.int16,
    "MET_UINT": np.uint32, "MET_INT": np.int32,
    "MET_FLOAT": np.float32, "MET_DOUBLE": np.float64,
}


def read_mhd(path: Path | str) -> np.ndarray:
    """Minimal MetaImage reader for CAMUS raw exports (uncompressed or zlib)."""
    path = Path(path)
    header = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            key, val = line.split("=", 1)
            header[key.strip()] = val.strip()
    dims = [int(d) for d in header["DimSize"].split()]
    dtype = _MHD_DTYPES.get(header.get("ElementType", "MET_UCHAR"))
    if dtype is None:
        raise DatasetError(f"{path}: unsupported ElementType {header.get('ElementType')}")
    data_file = header.get("ElementDataFile", "LOCAL")
    raw = (path.parent / data_file).read_bytes()
    if header.get("CompressedData", "False").lower() == "true":
        raw = zlib.decompress(raw)
    arr = np.frombuffer(raw, dtype=dtype)
    expected = int(np.prod(dims))
    if arr.size != expected:
        raise DatasetError(f"{path}: raw size {arr.size} does not match DimSize {dims}")
    return arr.reshape(dims[::-1])


def convert_camus(src_root: Path | str, out_root: Path | str, size: int = 128) -> int:
    """Convert a CAMUS mhd/raw export into the neutral patient-directory layout.

    Expects per-patient directories holding `{pid}_2CH_half_sequence.mhd`
    (frames, ED to ES) and `{pid}_2CH_ED_gt.mhd` (4-class ED annotation).
    Frames are min-max scaled to 8-bit and bilinearly resized; labels are
    nearest-resized. Returns the number of patients converted.
    """
    src_root, out_root = Path(src_root), Path(out_root)
    if not src_root.is_dir():
        raise DatasetError(f"CAMUS root {src_root} is not a directory")
    out_root.mkdir(parents=True, exist_ok=True)
    n_converted = 0
    for pdir in sorted(d for d in src_root.iterdir() if d.is_dir()):
        pid = pdir.name
        seq_path = pdir / f"{pid}_{VIEW}_half_sequence.mhd"
        gt_path = pdir / f"{pid}_{VIEW}_ED_gt.mhd"
        if not seq_path.exists() or not gt_path.exists():
            continue
        seq = read_mhd(seq_path).astype(np.float32)
        gt = read_mhd(gt_path)
        if gt.ndim == 3:
            gt = gt[0]
        lo, hi = float(seq.min()), float(seq.max())
        seq8 = np.zeros_like(seq, dtype=np.uint8) if hi <= lo else \
            np.round((seq - lo) / (hi - lo) * 255.0).astype(np.uint8)
        odir = out_root / pid
        odir.mkdir(exist_ok=True)
        for i in range(seq8.shape[0]):
            img = Image.fromarray(seq8[i], mode="L").resize((size, size), Image.BILINEAR)
            img.save(odir / f"frame_{i:04d}.png")
        lab = Image.fromarray(gt.astype(np.uint8), mode="L").resize((size, size), Image.NEAREST)
        lab.save(odir / "label_ed.png")
        meta = {"patient_id": pid, "n_frames": int(seq8.shape[0]), "ed_index": 0,
                "es_index": int(seq8.shape[0]) - 1, "view": VIEW}
        (odir / "record.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        n_converted += 1
    return n_converted
