"""Synthetic phantoms, patch sampling, overlapping-tile inference, and file I/O.

Phantoms replace the real MRI datasets: nested smoothed ellipsoids provide a
WM core, a GM shell, and a CSF film over background, with modality-dependent
contrast (CSF dark on T1, bright on T2), Gaussian noise, and a low-frequency
multiplicative bias field. T1 and T2 share identical label geometry.

Volume file format: magic ``VOLB``, u32 version=1, u32 D, H, W, u32 channels,
u8 dtype tag (0 = f32, 1 = u8), then the little-endian payload in row-major
(D, H, W, C) order. A checkpoint is a directory holding ``manifest.json``
(version, config, ordered parameter records) plus ``weights.bin`` (f32 LE
payload concatenated in manifest order).
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import nn
from . import tensor as T
from .nn import ModelConfig, NamedWeights
from .tensor import Tensor

VOLUME_MAGIC = b"VOLB"
VOLUME_VERSION = 1
CHECKPOINT_VERSION = 1

CLASS_NAMES = {0: "background", 1: "csf", 2: "gm", 3: "wm"}

# class -> intensity per modality; CSF < GM < WM on T1 and CSF > GM > WM on T2.
# Each modality deliberately leaves one tissue pair near-isointense (gap 0.04
# ~ 1.3 sigma of the default noise): GM/WM on T1 and CSF/GM on T2, echoing
# infant-brain MRI where no single modality separates all three tissues. The
# modality PAIR is unambiguous, so multi-modal fusion has real signal to add,
# while well-separated pairs sit >= 0.25 (~8 sigma) apart. Across modalities,
# only 0.62 is shared by two classes (WM on T1, CSF on T2): WM-on-T2 sits at
# 0.20, ~3 sigma below CSF-on-T1's 0.30, so a model that cannot tell which
# modality a patch came from still has at most one hedged pair per voxel and
# averaging its class probabilities over both modality passes resolves it.
DEFAULT_CONTRAST = {
    "t1": {0: 0.05, 1: 0.30, 2: 0.58, 3: 0.62},
    "t2": {0: 0.05, 1: 0.62, 2: 0.58, 3: 0.20},
}


class VolumeFormatError(ValueError):
    """Raised when a volume file fails validation."""


class CheckpointError(ValueError):
    """Raised when a checkpoint fails validation."""


@dataclass
class Volume:
    """Single-modality scalar field [D, H, W, C] with optional label field."""

    voxels: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.voxels.ndim == 3:
            self.voxels = self.voxels[..., None]
        if self.labels is not None and self.labels.shape != self.voxels.shape[:3]:
            raise VolumeFormatError(
                f"label dims {self.labels.shape} do not match voxel dims {self.voxels.shape[:3]}"
            )

    @property
    def dims(self):
        return self.voxels.shape[:3]


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    seed: int = 0
    num_ellipsoids: int = 3
    smoothing: float = 3.0
    # smooth random warp of the shape field before thresholding: boundaries
    # become subject-specific instead of predictable from ellipsoid shape
    # alone, so tissue classes that are near-isointense in a modality cannot
    # be recovered from geometry. Nesting is preserved (all classes threshold
    # the same warped field).
    warp_amplitude: float = 0.35
    warp_sigma: float = 2.0
    contrast: dict = field(default_factory=lambda: DEFAULT_CONTRAST)
    noise_sigma: float = 0.03
    bias_amplitude: float = 0.1
    # target voxel fractions of the nested superlevel sets
    wm_fraction: float = 0.15
    gm_fraction: float = 0.15
    # CSF film thick enough that its interior voxels lose the
    # adjacent-to-background shortcut (they must be told apart from GM by
    # modality content, not by touching the visible background)
    csf_fraction: float = 0.15

    def validate(self):
        for ext in self.dims:
            if ext < 32 or ext % 8:
                raise ValueError(f"phantom dims must be >= 32 and divisible by 8, got {self.dims}")
        for modality in ("t1", "t2"):
            t = self.contrast[modality]
            if modality == "t1" and not (t[1] < t[2] < t[3]):
                raise ValueError("T1 contrast must order CSF < GM < WM")
            if modality == "t2" and not (t[1] > t[2] > t[3]):
                raise ValueError("T2 contrast must order CSF > GM > WM")


@dataclass
class Subject:
    t1: Volume
    t2: Volume
    labels: np.ndarray


@dataclass
class TrainBatch:
    inputs: np.ndarray  # [N, s, s, s, 1] float32
    labels: np.ndarray  # [N, s, s, s] integer class ids
    modality: str


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------


def generate_phantom(spec: PhantomSpec):
    """Deterministic per seed; returns (t1 Volume, t2 Volume, labels)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d, h, w = spec.dims
    zz, yy, xx = np.meshgrid(
        np.linspace(-1.0, 1.0, d), np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w),
        indexing="ij",
    )
    fld = np.full(spec.dims, -np.inf)
    for _ in range(spec.num_ellipsoids):
        center = rng.uniform(-0.3, 0.3, size=3)
        axes = rng.uniform(0.35, 0.6, size=3)
        r2 = (
            ((zz - center[0]) / axes[0]) ** 2
            + ((yy - center[1]) / axes[1]) ** 2
            + ((xx - center[2]) / axes[2]) ** 2
        )
        fld = np.maximum(fld, 1.0 - r2)
    fld = gaussian_filter(fld, sigma=spec.smoothing)

    def warped(fraction):
        # each nesting level gets its own smooth warp, so an inner boundary's
        # position cannot be read off from the outer (visible) boundaries;
        # the quantile threshold targets the level's voxel fraction
        f = fld
        if spec.warp_amplitude:
            warp = gaussian_filter(rng.standard_normal(spec.dims), sigma=spec.warp_sigma)
            f = fld + spec.warp_amplitude * (float(np.std(fld)) / max(float(np.std(warp)), 1e-12)) * warp
        return f >= np.quantile(f, 1.0 - fraction)

    head = spec.csf_fraction + spec.gm_fraction + spec.wm_fraction
    csf_set = warped(head)
    gm_set = warped(spec.gm_fraction + spec.wm_fraction) & csf_set
    wm_set = warped(spec.wm_fraction) & gm_set
    labels = np.zeros(spec.dims, dtype=np.uint8)
    labels[csf_set] = 1
    labels[gm_set] = 2
    labels[wm_set] = 3

    volumes = {}
    for modality in ("t1", "t2"):
        lut = np.array([spec.contrast[modality][c] for c in range(4)], dtype=np.float64)
        base = lut[labels]
        raw_bias = gaussian_filter(rng.standard_normal(spec.dims), sigma=max(spec.dims) / 4.0)
        peak = np.max(np.abs(raw_bias))
        bias = 1.0 + spec.bias_amplitude * (raw_bias / peak if peak > 0 else raw_bias)
        noise = rng.normal(0.0, spec.noise_sigma, size=spec.dims)
        vox = np.clip(base * bias + noise, 0.0, 1.0).astype(np.float32)
        volumes[modality] = Volume(vox, labels)
    return volumes["t1"], volumes["t2"], labels


# ---------------------------------------------------------------------------
# Patch sampling
# ---------------------------------------------------------------------------


def _check_patch_size(dims, size):
    if any(size > ext for ext in dims):
        raise ValueError(f"patch size {size} exceeds volume dims {dims}")


def sample_batch(volume: Volume, labels, size, batch, rng, modality="t1") -> TrainBatch:
    """One batch of uniformly random patch crops with paired label crops."""
    dims = volume.dims
    _check_patch_size(dims, size)
    inputs = np.empty((batch, size, size, size, 1), dtype=np.float32)
    labs = np.empty((batch, size, size, size), dtype=np.int64)
    for i in range(batch):
        corner = [int(rng.integers(0, ext - size + 1)) for ext in dims]
        sl = tuple(slice(c, c + size) for c in corner)
        inputs[i] = volume.voxels[sl]
        labs[i] = labels[sl]
    return TrainBatch(inputs, labs, modality)


def sample_batch_pair(subject, size, batch, rng):
    """T1 and T2 batches cropped at identical patch positions (one location
    stream per iteration, so models consuming different modalities of the
    same batch see the same spatial content)."""
    t1, t2, labels = subject.t1, subject.t2, subject.labels
    dims = t1.dims
    _check_patch_size(dims, size)
    in1 = np.empty((batch, size, size, size, 1), dtype=np.float32)
    in2 = np.empty((batch, size, size, size, 1), dtype=np.float32)
    labs = np.empty((batch, size, size, size), dtype=np.int64)
    for i in range(batch):
        corner = [int(rng.integers(0, ext - size + 1)) for ext in dims]
        sl = tuple(slice(c, c + size) for c in corner)
        in1[i] = t1.voxels[sl]
        in2[i] = t2.voxels[sl]
        labs[i] = labels[sl]
    return TrainBatch(in1, labs, "t1"), TrainBatch(in2, labs, "t2")


def sample_patches(volume: Volume, labels, n, size=32, batch=8, rng=None, modality="t1"):
    """Stream of ``n // batch`` TrainBatches; order deterministic per seed."""
    _check_patch_size(volume.dims, size)
    for _ in range(n // batch):
        yield sample_batch(volume, labels, size, batch, rng, modality)


# ---------------------------------------------------------------------------
# Overlapping-tile inference
# ---------------------------------------------------------------------------


def _tile_starts(ext, patch_size, step):
    starts = list(range(0, ext - patch_size + 1, step))
    if starts[-1] != ext - patch_size:
        starts.append(ext - patch_size)  # final tile clamped to the boundary
    return starts


def coverage_map(dims, patch_size, step):
    """Per-voxel tile coverage count; depends only on geometry."""
    _validate_step(dims, patch_size, step)
    cov = np.zeros(dims, dtype=np.int64)
    for z in _tile_starts(dims[0], patch_size, step):
        for y in _tile_starts(dims[1], patch_size, step):
            for x in _tile_starts(dims[2], patch_size, step):
                cov[z : z + patch_size, y : y + patch_size, x : x + patch_size] += 1
    return cov


def _validate_step(dims, patch_size, step):
    if step < 1 or step > patch_size:
        raise ValueError(f"overlapping step {step} must be in [1, patch size {patch_size}]")
    if any(ext < patch_size for ext in dims):
        raise ValueError(f"volume dims {dims} smaller than patch size {patch_size}")


def stitch_probabilities(config: ModelConfig, weights: NamedWeights, volume: Volume, patch_size=32, step=32):
    """Tile the volume and average per-voxel class probabilities over
    overlapping tiles; returns a float array [D, H, W, num_classes]."""
    dims = volume.dims
    _validate_step(dims, patch_size, step)
    probs = np.zeros(dims + (config.num_classes,), dtype=np.float64)
    cov = np.zeros(dims, dtype=np.int64)
    with T.no_grad():
        for z in _tile_starts(dims[0], patch_size, step):
            for y in _tile_starts(dims[1], patch_size, step):
                for x in _tile_starts(dims[2], patch_size, step):
                    tile = volume.voxels[z : z + patch_size, y : y + patch_size, x : x + patch_size, :]
                    logits = nn.forward(config, weights, Tensor(tile[None]), mode="eval")
                    p = T.softmax(logits, axis=-1).data[0]
                    probs[z : z + patch_size, y : y + patch_size, x : x + patch_size, :] += p
                    cov[z : z + patch_size, y : y + patch_size, x : x + patch_size] += 1
    probs /= cov[..., None]
    return probs


def stitch_inference(config: ModelConfig, weights: NamedWeights, volume: Volume, patch_size=32, step=32):
    """Tile the volume, average per-voxel class probabilities over overlapping
    tiles, and argmax; returns a label array [D, H, W]."""
    probs = stitch_probabilities(config, weights, volume, patch_size=patch_size, step=step)
    return np.argmax(probs, axis=-1).astype(np.uint8)


# ---------------------------------------------------------------------------
# Volume file I/O
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("u1")}


def save_volume(path, array):
    """Write a [D, H, W] or [D, H, W, C] float32/uint8 array."""
    arr = np.asarray(array)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise VolumeFormatError(f"expected a 3-d or 4-d array, got shape {arr.shape}")
    if arr.dtype == np.float32:
        tag = 0
    elif arr.dtype == np.uint8:
        tag = 1
    else:
        raise VolumeFormatError(f"unsupported dtype {arr.dtype}; use float32 or uint8")
    d, h, w, c = arr.shape
    header = VOLUME_MAGIC + struct.pack("<IIIIIB", VOLUME_VERSION, d, h, w, c, tag)
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
    Path(path).write_bytes(header + payload)


def load_volume(path):
    """Read a volume file; returns a [D, H, W, C] array."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic, not a volume file")
    header_len = 4 + struct.calcsize("<IIIIIB")
    if len(blob) < header_len:
        raise VolumeFormatError(f"{path}: truncated header")
    version, d, h, w, c, tag = struct.unpack("<IIIIIB", blob[4:header_len])
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}, expected {VOLUME_VERSION}")
    if tag not in _DTYPE_TAGS:
        raise VolumeFormatError(f"{path}: unknown dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    expected = d * h * w * c * dtype.itemsize
    payload = blob[header_len:]
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(d, h, w, c).copy()


def subject_paths(directory, index):
    stem = f"subj{index:02d}"
    directory = Path(directory)
    return {
        "t1": directory / f"{stem}_t1.volb",
        "t2": directory / f"{stem}_t2.volb",
        "labels": directory / f"{stem}_labels.volb",
    }


def save_subject(directory, index, t1: Volume, t2: Volume, labels):
    paths = subject_paths(directory, index)
    save_volume(paths["t1"], t1.voxels)
    save_volume(paths["t2"], t2.voxels)
    save_volume(paths["labels"], labels.astype(np.uint8))


def load_subjects(directory):
    """Load every subjNN_{t1,t2,labels}.volb triple under a directory."""
    directory = Path(directory)
    subjects = []
    for t1_path in sorted(directory.glob("subj*_t1.volb")):
        m = re.match(r"subj(\d+)_t1\.volb", t1_path.name)
        if not m:
            continue
        index = int(m.group(1))
        paths = subject_paths(directory, index)
        labels = load_volume(paths["labels"])[..., 0].astype(np.uint8)
        t1 = Volume(load_volume(paths["t1"]).astype(np.float32), labels)
        t2 = Volume(load_volume(paths["t2"]).astype(np.float32), labels)
        subjects.append(Subject(t1, t2, labels))
    if not subjects:
        raise FileNotFoundError(f"no subject volumes found under {directory}")
    return subjects


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def save_checkpoint(directory, weights: NamedWeights, config: ModelConfig):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    payload = bytearray()
    offset = 0
    for name, t in weights.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        records.append({"name": name, "shape": list(t.shape), "offset": offset, "len": len(raw)})
        payload.extend(raw)
        offset += len(raw)
    manifest = {"version": CHECKPOINT_VERSION, "config": config.to_dict(), "records": records}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    (directory / "weights.bin").write_bytes(bytes(payload))


def load_checkpoint(directory):
    """Returns (weights, config); round-trips bitwise for float32 weights."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    weights_path = directory / "weights.bin"
    if not manifest_path.exists() or not weights_path.exists():
        raise CheckpointError(f"{directory}: missing manifest.json or weights.bin")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{directory}: manifest is not valid JSON: {e}") from e
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{directory}: unsupported checkpoint version {manifest.get('version')!r}"
        )
    config = ModelConfig.from_dict(manifest["config"])
    payload = weights_path.read_bytes()
    total = sum(r["len"] for r in manifest["records"])
    if len(payload) != total:
        raise CheckpointError(
            f"{directory}: weights.bin has {len(payload)} bytes, manifest expects {total}"
        )
    weights = NamedWeights()
    for rec in manifest["records"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        if rec["len"] != count * 4:
            raise CheckpointError(
                f"{directory}: record {rec['name']!r} length {rec['len']} does not match shape {shape}"
            )
        arr = np.frombuffer(
            payload, dtype="<f4", count=count, offset=rec["offset"]
        ).reshape(shape).copy()
        weights[rec["name"]] = Tensor(arr, requires_grad=not nn.is_running_stat(rec["name"]))
    return weights, config
