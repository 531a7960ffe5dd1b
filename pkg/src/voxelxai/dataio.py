"""Volume file format (XV3D), cohort manifests, deterministic splitting,
and the synthetic cohort generator with a planted class feature.

XV3D layout: magic "XV3D", u32 version, u32 w/h/d, then w*h*d little-endian
float32 voxels in row-major x-fastest order. Metadata lives in a JSON
sidecar at <file>.json.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import VolumeFormatError, VoxelXaiError
from .nn.training import LabeledCohort
from .volume import Volume3D

MAGIC = b"XV3D"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")

LABEL_NAMES = {0: "noPCS", 1: "PCS"}


def write_volume(path, v: Volume3D, sidecar: dict | None = None):
    path = Path(path)
    w, h, d = v.dims
    payload = v.voxels.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, w, h, d))
        fh.write(payload)
    meta = dict(sidecar or {})
    meta.setdefault("dims", [w, h, d])
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_volume(path):
    """Returns (Volume3D, sidecar dict)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, version, w, h, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * w * h * d
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{path}: expected {expected} bytes for dims ({w}, {h}, {d}), "
            f"got {len(raw)}"
        )
    vox = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    sidecar_path = Path(str(path) + ".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    if "dims" in sidecar and tuple(sidecar["dims"]) != (w, h, d):
        raise VolumeFormatError(f"{path}: sidecar dims disagree with header")
    return Volume3D((w, h, d), vox), sidecar


@dataclass
class SubjectRecord:
    subject_id: str
    path: str
    label: int  # PCS=1, noPCS=0
    modality: str = "skeleton"
    hemisphere: str = "L"
    split: str = ""
    mask_path: str = ""


@dataclass
class CohortManifest:
    subjects: list
    dims: tuple[int, int, int]
    seed: int

    def save(self, path):
        doc = {
            "dims": list(self.dims),
            "seed": self.seed,
            "subjects": [vars(s) for s in self.subjects],
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        return cls(
            subjects=[SubjectRecord(**s) for s in doc["subjects"]],
            dims=tuple(doc["dims"]),
            seed=doc["seed"],
        )


def planted_ridge(dims, amplitude=1.0, sigma=1.3):
    """A fixed curvilinear ridge: a sinusoidal curve through the volume with a
    Gaussian cross-section, truncated to compact support.

    Returns (intensity (d, h, w), mask (d, h, w) bool).
    """
    w, h, d = dims
    z = np.arange(d)[:, None, None]
    y = np.arange(h)[None, :, None]
    x = np.arange(w)[None, None, :]
    # curve through the volume: x and y meander with z
    cx = w * (0.55 + 0.2 * np.sin(2.0 * np.pi * z / max(1, d - 1)))
    cy = h * (0.45 + 0.15 * np.cos(2.0 * np.pi * z / max(1, d - 1)))
    r2 = (x - cx) ** 2 + (y - cy) ** 2
    intensity = amplitude * np.exp(-r2 / (2.0 * sigma**2))
    cutoff = np.exp(-2.0)  # truncate at 2 sigma
    intensity = np.where(intensity >= amplitude * cutoff, intensity, 0.0)
    return intensity, intensity > 0


def _background_basis(dims, n_fields, rng, avoid_mask):
    """Shared dictionary of compact smooth bumps (skeleton-like sparse
    structures): each field is a Gaussian blob truncated at 2 sigma, placed
    away from the planted feature and from the other bumps so the basis
    fields are mutually disjoint."""
    w, h, d = dims
    z = np.arange(d)[:, None, None]
    y = np.arange(h)[None, :, None]
    x = np.arange(w)[None, None, :]
    sigma = max(1.2, min(dims) / 10.0)
    support = 2.0 * sigma
    cutoff = np.exp(-2.0)
    avoid = np.argwhere(avoid_mask).astype(np.float64)  # (m, 3) in (z, y, x)
    centers = []
    basis = []
    for _ in range(n_fields):
        best = None
        best_sep = -np.inf
        for _ in range(200):
            cand = np.array([rng.uniform(0.1, 0.9) * n for n in (d, h, w)])
            sep = np.inf
            if len(avoid):
                sep = min(sep, np.sqrt(((avoid - cand) ** 2).sum(1)).min() - support)
            for c in centers:
                sep = min(
                    sep, np.sqrt(((np.asarray(c) - cand) ** 2).sum()) - 2 * support
                )
            if sep > best_sep:
                best_sep = sep
                best = cand
            if sep >= 1.0:
                break
        centers.append(best)
        cz, cy, cx = best
        r2 = (z - cz) ** 2 + (y - cy) ** 2 + (x - cx) ** 2
        field_ = np.exp(-r2 / (2.0 * sigma**2))
        basis.append(np.where(field_ >= cutoff, field_, 0.0))
    return basis


def generate_cohort_arrays(
    n_subjects, dims, noise_level=0.3, ridge_amplitude=1.0, seed=0,
    n_background_fields=5,
):
    """In-memory synthetic cohort.

    Class 1 volumes carry the planted ridge (per-subject amplitude jitter);
    class 0 volumes are background only. The background is a shared basis of
    disjoint compact bumps, each activated per subject with a nonnegative
    strength around noise_level (a distinct scale per bump), so volumes are
    sparse and nonnegative like thinned skeleton images.
    Returns (volumes (n, d, h, w) float32, labels, mask (d, h, w) bool).
    """
    if n_subjects < 20:
        raise VoxelXaiError("cohort needs at least 20 subjects")
    w, h, d = dims
    rng = np.random.default_rng(seed)
    ridge, mask = planted_ridge(dims, amplitude=ridge_amplitude)
    basis = _background_basis(dims, n_background_fields, rng, mask)
    # distinct strength scale per bump keeps the covariance spectrum
    # non-degenerate, so each principal direction is one structure
    scales = np.array([1.0 - 0.6 * j / max(1, n_background_fields - 1)
                       for j in range(n_background_fields)])
    labels = np.arange(n_subjects) % 2  # balanced, |n1 - n0| <= 1
    vols = np.zeros((n_subjects, d, h, w), dtype=np.float64)
    for i in range(n_subjects):
        if noise_level > 0:
            coeffs = rng.uniform(0.0, 2.0 * noise_level, size=len(basis)) * scales
            for c, field_ in zip(coeffs, basis):
                vols[i] += c * field_
        if labels[i] == 1:
            amp = rng.uniform(0.5, 1.5)
            vols[i] += amp * ridge
    return vols.astype(np.float32), labels.astype(np.int64), mask


def split_subjects(labels, fractions, seed):
    """Stratified subject-level split; returns an array of split names."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise VoxelXaiError(f"split fractions must sum to 1: {fractions}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    out = np.empty(len(labels), dtype=object)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        n = len(idx)
        n_train = round(fractions[0] * n)
        n_val = round(fractions[1] * n)
        out[idx[:n_train]] = "train"
        out[idx[n_train : n_train + n_val]] = "val"
        out[idx[n_train + n_val :]] = "test"
    for name in ("train", "val", "test"):
        sel = out == name
        if not sel.any() or len(np.unique(labels[sel])) < len(np.unique(labels)):
            raise VoxelXaiError(f"degenerate class in split {name!r}")
    return out.astype(str)


def generate_cohort(
    out_dir,
    n_subjects,
    dims,
    noise_level=0.3,
    ridge_amplitude=1.0,
    seed=0,
    fractions=(0.70, 0.20, 0.10),
) -> CohortManifest:
    """Write a synthetic cohort (volumes, masks, manifest) under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vols, labels, mask = generate_cohort_arrays(
        n_subjects, dims, noise_level, ridge_amplitude, seed
    )
    splits = split_subjects(labels, fractions, seed)

    mask_path = out_dir / "planted_mask.xv3d"
    write_volume(
        mask_path, Volume3D.from_array(mask.astype(np.float64)), {"kind": "mask"}
    )
    subjects = []
    for i in range(n_subjects):
        sid = f"s{i:04d}"
        path = out_dir / f"{sid}.xv3d"
        write_volume(
            path,
            Volume3D.from_array(vols[i]),
            {
                "subject_id": sid,
                "label": int(labels[i]),
                "label_name": LABEL_NAMES[int(labels[i])],
                "modality": "skeleton",
                "hemisphere": "L",
                "provenance": "synthetic",
            },
        )
        subjects.append(
            SubjectRecord(
                subject_id=sid,
                path=path.name,
                label=int(labels[i]),
                split=str(splits[i]),
                mask_path=mask_path.name if labels[i] == 1 else "",
            )
        )
    manifest = CohortManifest(subjects, tuple(dims), seed)
    manifest.save(out_dir / "manifest.json")
    return manifest


def load_cohort(manifest_path) -> LabeledCohort:
    manifest_path = Path(manifest_path)
    manifest = CohortManifest.load(manifest_path)
    base = manifest_path.parent
    vols = []
    labels = []
    splits = []
    for rec in manifest.subjects:
        vol, _ = read_volume(base / rec.path)
        vols.append(vol.to_array())
        labels.append(rec.label)
        splits.append(rec.split)
    return LabeledCohort(
        np.stack(vols), np.asarray(labels, dtype=np.int64), np.asarray(splits)
    )
