"""Volumes, synthetic paired-modality sessions, augmentation and patient splits."""

from __future__ import annotations

import csv
import datetime as dt
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

PREPROCESSED_EXTENTS = (121, 145, 121)
CROP_SIZE = 96
MODALITIES = ("T1", "FLAIR")
SPLITS = ("train", "validation", "test")
DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)
MAX_BLUR_SIGMA = 1.5
VOLUME_MAGIC = b"NFVOL1"


@dataclass(frozen=True)
class Volume:
    modality: str
    data: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume must be 3-D with positive extents, got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ScanPair:
    patient_id: str
    session_id: str
    scan_date: dt.date
    t1: Volume
    flair: Volume

    def __post_init__(self):
        if self.t1.extents != self.flair.extents:
            raise ValueError(
                f"session {self.session_id}: T1 {self.t1.extents} and FLAIR {self.flair.extents} differ"
            )


# ---------------------------------------------------------------------------
# volume files


def write_volume(path, vol: Volume) -> None:
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<B", MODALITIES.index(vol.modality)))
        fh.write(struct.pack("<3I", *vol.extents))
        fh.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        head = fh.read(6 + 1 + 12)
        if head[:6] != VOLUME_MAGIC:
            raise ValueError(f"{path}: not a volume file (bad magic)")
        (mod,) = struct.unpack_from("<B", head, 6)
        ext = struct.unpack_from("<3I", head, 7)
        data = np.fromfile(fh, dtype="<f4")
    if mod >= len(MODALITIES):
        raise ValueError(f"{path}: unknown modality byte {mod}")
    if data.size != int(np.prod(ext)):
        raise ValueError(f"{path}: expected {int(np.prod(ext))} voxels, found {data.size}")
    return Volume(MODALITIES[mod], data.reshape(ext).astype(np.float32))


# ---------------------------------------------------------------------------
# augmentation


def _array(vol) -> np.ndarray:
    return vol.data if isinstance(vol, Volume) else np.asarray(vol)


def _like(vol, arr: np.ndarray):
    return Volume(vol.modality, arr) if isinstance(vol, Volume) else arr


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(vol, sigma: float):
    """Separable Gaussian blur, radius ceil(3 sigma), mirrored (half-sample) borders."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    arr = _array(vol)
    if sigma == 0:
        return _like(vol, arr.copy())
    k = gaussian_kernel(sigma)
    out = arr.astype(np.float64)
    for axis in range(out.ndim):
        out = ndimage.correlate1d(out, k, axis=axis, mode="reflect")
    return _like(vol, out.astype(np.float32))


def _check_crop(shape, size):
    if any(e < size for e in shape):
        raise ValueError(f"cannot crop {size}^3 from extents {tuple(shape)}")


def crop_at(vol, offsets: Sequence[int], size: int = CROP_SIZE):
    arr = _array(vol)
    a, b, c = offsets
    return _like(vol, arr[a: a + size, b: b + size, c: c + size].copy())


def center_offsets(shape, size: int = CROP_SIZE) -> tuple[int, int, int]:
    _check_crop(shape, size)
    return tuple((e - size) // 2 for e in shape)


def random_offsets(shape, rng: np.random.Generator, size: int = CROP_SIZE) -> tuple[int, int, int]:
    _check_crop(shape, size)
    return tuple(int(rng.integers(0, e - size + 1)) for e in shape)


def center_crop(vol, size: int = CROP_SIZE):
    return crop_at(vol, center_offsets(_array(vol).shape, size), size)


def random_crop(vol, size: int = CROP_SIZE, seed=None):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return crop_at(vol, random_offsets(_array(vol).shape, rng, size), size)


def minmax_normalize(arr: np.ndarray) -> np.ndarray:
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return np.zeros_like(arr, dtype=np.float32)
    return ((arr - lo) / (hi - lo)).astype(np.float32)


def prepare_input(arr: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Crop (random + blur when ``rng`` is given, else centered) then min-max scale."""
    if rng is None:
        out = center_crop(arr)
    else:
        out = random_crop(arr, seed=rng)
        out = gaussian_blur(out, float(rng.uniform(0.0, MAX_BLUR_SIGMA)))
    return minmax_normalize(out)


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample augmentation stream, independent of loading order."""
    return np.random.default_rng([seed, epoch, index])


# ---------------------------------------------------------------------------
# synthetic sessions


CLASS_NAMES = ("CN", "MCI", "AD")


@dataclass
class SyntheticDataset:
    pairs: list[ScanPair]
    labels: dict[str, int]  # session_id -> class index
    patient_labels: dict[str, int]
    patient_birth: dict[str, dt.date]


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Integer counts summing to ``total``; leftover units go to the largest remainders (ties: earlier)."""
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or fr.sum() <= 0:
        raise ValueError(f"invalid fractions {tuple(fractions)}")
    quotas = total * fr / fr.sum()
    counts = np.floor(quotas + 1e-9).astype(int)
    rem = quotas - counts
    order = sorted(range(len(fr)), key=lambda i: (-round(rem[i], 9), i))
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _ellipsoid(grid, center, radii):
    zz, yy, xx = grid
    return ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + (
        (xx - center[2]) / radii[2]
    ) ** 2


def _render_session(rng: np.random.Generator, label: int, extents, anatomy) -> tuple[np.ndarray, np.ndarray]:
    grid = np.ogrid[tuple(slice(0, e) for e in extents)]
    grid = tuple(g.astype(np.float32) for g in grid)
    center, brain_radii, vent_scale = anatomy
    # atrophy: brain shrinks and ventricles grow with stage
    brain = _ellipsoid(grid, center, brain_radii * (1.0 - 0.04 * label)) <= 1.0
    vent_r = np.array([7.0, 10.0, 7.0]) * vent_scale * (1.0 + 0.45 * label)
    vent = _ellipsoid(grid, center, vent_r) <= 1.0

    t1 = np.where(brain, 0.75, 0.0).astype(np.float32)
    fl = np.where(brain, 0.55, 0.0).astype(np.float32)
    t1[vent] = 0.15
    fl[vent] = 0.25

    n_lesions = int(rng.integers(0, 2)) + 2 * label
    inner = brain_radii * 0.6
    for _ in range(n_lesions):
        off = rng.uniform(-1, 1, size=3) * inner
        r = float(rng.uniform(3.0, 5.0))
        blob = _ellipsoid(grid, center + off, np.array([r, r, r])) <= 1.0
        blob &= brain & ~vent
        fl[blob] = 0.95
        t1[blob] = 0.6

    t1 += rng.normal(0.0, 0.04, size=extents).astype(np.float32)
    fl += rng.normal(0.0, 0.08, size=extents).astype(np.float32)
    return t1, fl


def generate_synthetic_dataset(
    n_patients: int,
    sessions_per_patient: int = 1,
    class_balance: Sequence[float] | str = "uniform",
    seed: int = 0,
    extents: Sequence[int] = PREPROCESSED_EXTENTS,
    stratified: bool = True,
) -> SyntheticDataset:
    """Co-registered T1/FLAIR sessions whose anatomy depends on the stage.

    Higher stages get larger ventricles, a smaller brain envelope and more
    FLAIR-hyperintense lesions.  FLAIR is noisier than T1, so T1 carries the
    cleaner signal.  All randomness derives from ``seed``.
    """
    if n_patients < 3:
        raise ValueError("need at least 3 patients")
    if sessions_per_patient < 1:
        raise ValueError("need at least one session per patient")
    balance = (1.0, 1.0, 1.0) if class_balance == "uniform" else tuple(class_balance)
    if len(balance) != 3:
        raise ValueError("class_balance needs one weight per class")
    if stratified and any(b <= 0 for b in balance):
        raise ValueError(f"class_balance {balance} leaves a class empty; stratified splits need all three")
    extents = tuple(int(e) for e in extents)
    counts = largest_remainder(n_patients, balance)

    rng = np.random.default_rng(seed)
    patient_classes = np.repeat(np.arange(3), counts)
    rng.shuffle(patient_classes)
    epoch = dt.date(2012, 1, 1)
    pairs, labels, patient_labels, births = [], {}, {}, {}
    for p, label in enumerate(patient_classes.tolist()):
        pid = f"P{p:04d}"
        prng = np.random.default_rng([seed, p])
        patient_labels[pid] = label
        first_scan = epoch + dt.timedelta(days=int(prng.integers(0, 1500)))
        age_years = float(prng.uniform(60.0, 85.0))
        births[pid] = first_scan - dt.timedelta(days=int(age_years * 365.25))
        center = np.array(extents, dtype=np.float32) / 2 + prng.uniform(-3, 3, size=3).astype(np.float32)
        brain_radii = np.array(extents, dtype=np.float32) * np.float32(0.4) * np.float32(prng.uniform(0.95, 1.05))
        anatomy = (center, brain_radii, float(prng.uniform(0.9, 1.1)))
        scan_date = first_scan
        for s in range(sessions_per_patient):
            if s:
                scan_date = scan_date + dt.timedelta(days=365 + int(prng.integers(0, 121)))
            sid = f"{pid}_S{s:02d}"
            t1, fl = _render_session(np.random.default_rng([seed, p, s]), label, extents, anatomy)
            pairs.append(ScanPair(pid, sid, scan_date, Volume("T1", t1), Volume("FLAIR", fl)))
            labels[sid] = label
    return SyntheticDataset(pairs, labels, patient_labels, births)


def synthetic_ehr_rows(ds: SyntheticDataset, seed: int = 0) -> list[dict]:
    """Diagnosed visits consistent with the ground-truth stage of each session.

    Each session gets two in-window visits carrying its label, plus one
    undiagnosed visit; each patient also gets an older, milder visit far
    outside every window.
    """
    rows = []
    seen = set()
    for pair in ds.pairs:
        rng = np.random.default_rng([seed, int(pair.patient_id[1:]), int(pair.session_id[-2:])])
        label = ds.labels[pair.session_id]
        birth = ds.patient_birth[pair.patient_id]
        visits = []
        if pair.patient_id not in seen:
            seen.add(pair.patient_id)
            visits.append((pair.scan_date - dt.timedelta(days=400 + int(rng.integers(0, 60))), max(label - 1, 0)))
        for _ in range(2):
            visits.append((pair.scan_date + dt.timedelta(days=int(rng.integers(-120, 121))), label))
        visits.append((pair.scan_date + dt.timedelta(days=int(rng.integers(-30, 31))), None))
        for date, diag in visits:
            age = (date - birth).days / 365.25
            rows.append(
                {
                    "patient_id": pair.patient_id,
                    "visit_date": date.isoformat(),
                    "age_at_scan": f"{age:.2f}",
                    "diagnosis": "" if diag is None else CLASS_NAMES[diag],
                }
            )
    rows.sort(key=lambda r: (r["patient_id"], r["visit_date"]))
    return rows


# ---------------------------------------------------------------------------
# patient-level split


@dataclass
class SplitAssignment:
    assignment: dict[str, str]

    def patients(self, split: str) -> list[str]:
        return sorted(p for p, s in self.assignment.items() if s == split)

    def counts(self) -> dict[str, int]:
        return {s: len(self.patients(s)) for s in SPLITS}

    def __getitem__(self, patient_id: str) -> str:
        return self.assignment[patient_id]


def _quota_sequence(n: int, targets: Sequence[int]) -> list[int]:
    """Interleave split indices so every prefix tracks the target proportions."""
    seq, used = [], [0] * len(targets)
    for i in range(n):
        gaps = [targets[j] * (i + 1) / n - used[j] for j in range(len(targets))]
        j = max(range(len(targets)), key=lambda j: (gaps[j] if used[j] < targets[j] else -math.inf, -j))
        used[j] += 1
        seq.append(j)
    return seq


def patient_split(
    patients: Mapping[str, int] | Iterable[str],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
    stratify_by_label: bool = True,
) -> SplitAssignment:
    """Assign whole patients to train/validation/test.

    Split sizes come from largest-remainder rounding of the fractions.  With
    stratification, patients are grouped by label (shuffled within a group)
    and dealt out along a proportional interleaving, so each label spreads
    across splits roughly in proportion.
    """
    if isinstance(patients, Mapping):
        labels = dict(patients)
    else:
        labels = {p: 0 for p in patients}
        stratify_by_label = False
    ids = sorted(labels)
    if len(ids) < len(fractions):
        raise ValueError(f"{len(ids)} patients cannot fill {len(fractions)} splits")
    targets = largest_remainder(len(ids), fractions)
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    if stratify_by_label:
        order.sort(key=lambda p: labels[p])  # stable: shuffled within label
    seq = _quota_sequence(len(ids), targets)
    return SplitAssignment({p: SPLITS[j] for p, j in zip(order, seq)})


# ---------------------------------------------------------------------------
# CSV files


MANIFEST_FIELDS = ("patient_id", "session_id", "scan_date", "t1_path", "flair_path")


@dataclass(frozen=True)
class ManifestRow:
    patient_id: str
    session_id: str
    scan_date: str
    t1_path: Path
    flair_path: Path


def write_csv(path, fields: Sequence[str], rows: Iterable[Mapping]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def read_csv(path, required: Sequence[str]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(required) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return list(reader)


def read_manifest(path) -> list[ManifestRow]:
    """Dataset manifest; volume paths are resolved relative to the manifest's directory."""
    base = Path(path).parent
    rows = []
    for r in read_csv(path, MANIFEST_FIELDS):
        rows.append(
            ManifestRow(r["patient_id"], r["session_id"], r["scan_date"], base / r["t1_path"], base / r["flair_path"])
        )
    return rows


def write_split(path, split: SplitAssignment) -> None:
    write_csv(path, ("patient_id", "split"), ({"patient_id": p, "split": s} for p, s in sorted(split.assignment.items())))


def read_split(path) -> SplitAssignment:
    rows = read_csv(path, ("patient_id", "split"))
    bad = [r["split"] for r in rows if r["split"] not in SPLITS]
    if bad:
        raise ValueError(f"{path}: unknown split names {sorted(set(bad))}")
    return SplitAssignment({r["patient_id"]: r["split"] for r in rows})
