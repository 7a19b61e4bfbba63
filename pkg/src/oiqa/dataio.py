"""Synthetic quality-labeled data, image files, and the checkpoint format.

Labels are monotone in distortion severity by construction (label = 1 -
severity), so rank correlations against the ground truth are meaningful
without human opinion scores.  All binary formats are little-endian;
`tests/data/crosscheck.qten` pins the exact bytes.
"""

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cayley  # noqa: F401  (registers the robust_block layer kind)
from .errors import CheckpointError, ConfigurationError, DataError, FormatError
from .net import LAYER_KINDS, LayerSpec, ModelGraph

CHECKPOINT_MAGIC = b"OIQA1"
TENSOR_MAGIC = b"QTEN1"
DFT_CONVENTION = "forward-unnormalized/inverse-1-over-N"
DISTORTION_KINDS = ("gaussian_blur", "additive_noise", "contrast_crush")
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


@dataclass
class QualitySample:
    image: np.ndarray   # C x H x W in [0, 1]
    label: float        # 1 - severity, in [0, 1]
    kind: str
    severity: float


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _base_image(rng, channels, size):
    """Stationary procedural content: oriented gratings at fixed radial
    frequencies plus a gradient and a few soft patches."""
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.full((channels, size, size), 0.5)
    for freq, amp in ((2.0, 0.16), (3.0, 0.12), (5.0, 0.09)):
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * ii + np.sin(theta) * jj) / size
                      + phase)
        shift = rng.uniform(0, 2 * np.pi, size=channels)
        for c in range(channels):
            img[c] += amp * np.cos(shift[c]) * wave
    gdir = rng.uniform(-1, 1, size=2)
    img += 0.12 * (gdir[0] * ii + gdir[1] * jj)[None] / size
    for _ in range(2):
        r, c = rng.integers(0, size, size=2)
        radius = rng.uniform(size / 8, size / 4)
        bump = np.exp(-(((ii - r) ** 2 + (jj - c) ** 2) / (2 * radius ** 2)))
        img += rng.uniform(-0.12, 0.12) * bump[None]
    return np.clip(img, 0.0, 1.0)


def _gaussian_kernel1d(sigma):
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _blur(img, sigma):
    k = _gaussian_kernel1d(sigma)
    radius = (len(k) - 1) // 2
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        padded = np.pad(img[c], radius, mode="reflect")
        tmp = np.apply_along_axis(lambda row: np.convolve(row, k, mode="valid"), 1, padded)
        out[c] = np.apply_along_axis(lambda col: np.convolve(col, k, mode="valid"), 0, tmp)
    return out


def apply_distortion(image, kind, severity, rng=None):
    """Degrade an image; severity 0 returns it bit-exactly."""
    if kind not in DISTORTION_KINDS:
        raise ConfigurationError(f"unknown distortion {kind!r}")
    if severity < 0:
        raise ConfigurationError(f"severity must be >= 0, got {severity}")
    if severity == 0:
        return image.copy()
    if kind == "gaussian_blur":
        return _blur(image, 0.4 + 2.2 * severity)
    if kind == "additive_noise":
        if rng is None:
            raise ConfigurationError("additive_noise needs an rng")
        noise = rng.normal(0.0, 1.0, size=image.shape)
        return np.clip(image + 0.22 * severity * noise, 0.0, 1.0)
    mean = image.mean()
    return mean + (image - mean) * (1.0 - 0.85 * severity)


def generate_sample(seed, index, channels=3, size=16):
    """One deterministic sample; the rng is derived from (seed, index)."""
    rng = np.random.default_rng([seed, index])
    base = _base_image(rng, channels, size)
    kind = DISTORTION_KINDS[int(rng.integers(0, len(DISTORTION_KINDS)))]
    severity = float(rng.uniform(0.0, 1.0))
    image = apply_distortion(base, kind, severity, rng)
    return QualitySample(image=image, label=1.0 - severity, kind=kind, severity=severity)


def generate_dataset(n, image_size=16, seed=0, channels=3):
    """Procedural quality-labeled samples; byte-identical for equal seeds."""
    if n < 1:
        raise DataError(f"dataset size must be >= 1, got {n}")
    if image_size > 64:
        raise ConfigurationError(f"image_size capped at 64, got {image_size}")
    return [generate_sample(seed, i, channels, image_size) for i in range(n)]


def split_dataset(samples, seed=0, fractions=SPLIT_FRACTIONS):
    """Disjoint, exhaustive train/val/test split by seeded shuffle."""
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    idx_train = order[:n_train]
    idx_val = order[n_train: n_train + n_val]
    idx_test = order[n_train + n_val:]
    pick = lambda idx: [samples[i] for i in idx]
    return pick(idx_train), pick(idx_val), pick(idx_test)


def as_pairs(samples):
    return [(s.image, s.label) for s in samples]


# ---------------------------------------------------------------------------
# PPM / PGM images
# ---------------------------------------------------------------------------

def save_ppm(path, image):
    """Quantize a [0, 1] image to 8 bits and write binary P6 (3 channels)
    or P5 (1 channel)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise FormatError(f"expected 1- or 3-channel C x H x W image, got {image.shape}")
    c, h, w = image.shape
    magic = b"P6" if c == 3 else b"P5"
    quantized = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    payload = quantized.transpose(1, 2, 0).tobytes() if c == 3 else quantized[0].tobytes()
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(payload)


def _read_token(data, pos):
    while pos < len(data) and data[pos: pos + 1].isspace():
        pos += 1
    if pos < len(data) and data[pos: pos + 1] == b"#":  # comment line
        while pos < len(data) and data[pos: pos + 1] != b"\n":
            pos += 1
        return _read_token(data, pos)
    start = pos
    while pos < len(data) and not data[pos: pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("truncated header", offset=start)
    return data[start:pos], pos


def load_ppm(path):
    """Read a binary P5/P6 file (maxval 255) into a [0, 1] C x H x W tensor."""
    data = Path(path).read_bytes()
    if data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"not a binary PGM/PPM file (magic {data[:2]!r})", offset=0)
    channels = 3 if data[:2] == b"P6" else 1
    pos = 2
    fields = []
    for _ in range(3):
        token, pos = _read_token(data, pos)
        fields.append(token)
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"bad header field: {exc}", offset=pos) from exc
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} (only 255)", offset=pos)
    pos += 1  # single whitespace after maxval
    expected = w * h * channels
    payload = data[pos: pos + expected]
    if len(payload) != expected:
        raise FormatError(
            f"payload has {len(payload)} bytes, expected {expected}", offset=pos)
    raw = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 3:
        return np.ascontiguousarray(raw.reshape(h, w, 3).transpose(2, 0, 1))
    return raw.reshape(1, h, w)


# ---------------------------------------------------------------------------
# raw tensors
# ---------------------------------------------------------------------------

def save_tensor(path, tensor):
    tensor = np.asarray(tensor, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", tensor.ndim))
        for d in tensor.shape:
            fh.write(struct.pack("<Q", d))
        fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_tensor(path):
    data = Path(path).read_bytes()
    if data[:5] != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {data[:5]!r}", offset=0)
    rank = struct.unpack("<I", data[5:9])[0]
    pos = 9
    dims = []
    for _ in range(rank):
        dims.append(struct.unpack("<Q", data[pos: pos + 8])[0])
        pos += 8
    count = int(np.prod(dims)) if dims else 1
    payload = data[pos: pos + 8 * count]
    if len(payload) != 8 * count:
        raise FormatError(f"tensor payload truncated at {len(payload)} bytes", offset=pos)
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

def save_dataset(root, samples, seed):
    """Write samples as PPM/PGM files plus labels.csv and meta.json."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["image_id,file,label,kind,severity"]
    for i, s in enumerate(samples):
        name = f"img{i:05d}." + ("ppm" if s.image.shape[0] == 3 else "pgm")
        save_ppm(root / name, s.image)
        lines.append(f"{i},{name},{s.label!r},{s.kind},{s.severity!r}")
    (root / "labels.csv").write_text("\n".join(lines) + "\n")
    meta = {"count": len(samples), "seed": seed,
            "channels": int(samples[0].image.shape[0]),
            "size": int(samples[0].image.shape[1]),
            "split_fractions": list(SPLIT_FRACTIONS)}
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_dataset(root):
    root = Path(root)
    csv_path = root / "labels.csv"
    if not csv_path.exists():
        raise DataError(f"no labels.csv under {root}")
    samples = []
    lines = csv_path.read_text().strip().split("\n")
    for line in lines[1:]:
        _, name, label, kind, severity = line.split(",")
        samples.append(QualitySample(image=load_ppm(root / name), label=float(label),
                                     kind=kind, severity=float(severity)))
    meta = json.loads((root / "meta.json").read_text())
    return samples, meta


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(model):
    """Serialize a model: magic, JSON header, little-endian f64 payload.

    The header stores the layer specs, the DFT convention, the score range,
    pruning masks, a tensor directory (offset/length/shape per parameter in
    sorted id order) and the sha256 of the payload.
    """
    chunks = []
    directory = {}
    offset = 0
    for pid in sorted(model.params):
        arr = np.ascontiguousarray(model.params[pid], dtype="<f8")
        raw = arr.tobytes()
        directory[pid] = {"offset": offset, "length": len(raw), "shape": list(arr.shape)}
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": 1,
        "dtype": "real64",
        "dft_convention": DFT_CONVENTION,
        "input_shape": list(model.input_shape),
        "score_range": list(model.score_range) if model.score_range else None,
        "layers": [{"kind": s.kind, "hyper": s.hyper, "param_ids": s.param_ids,
                    "fresh": s.fresh} for s in model.layers],
        "masks": {str(k): list(map(int, v)) for k, v in model.masks.items()},
        "tensors": directory,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_raw = json.dumps(header, sort_keys=True).encode()
    return CHECKPOINT_MAGIC + struct.pack("<I", len(header_raw)) + header_raw + payload


def save_checkpoint(model, path):
    Path(path).write_bytes(checkpoint_bytes(model))


def model_from_checkpoint_bytes(data):
    if data[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:5]!r}", offset=0)
    header_len = struct.unpack("<I", data[5:9])[0]
    try:
        header = json.loads(data[9: 9 + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable header: {exc}", offset=9) from exc
    if header.get("version") != 1:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    payload = data[9 + header_len:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise CheckpointError("payload hash mismatch: checkpoint is corrupt")
    params = {}
    for pid, entry in header["tensors"].items():
        raw = payload[entry["offset"]: entry["offset"] + entry["length"]]
        if len(raw) != entry["length"]:
            raise CheckpointError(f"tensor {pid} truncated", offset=9 + header_len + entry["offset"])
        params[pid] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
    layers = []
    for i, entry in enumerate(header["layers"]):
        if entry["kind"] not in LAYER_KINDS:
            raise CheckpointError(f"unknown layer kind {entry['kind']!r} at layer {i}")
        layers.append(LayerSpec(entry["kind"], entry["hyper"], entry["param_ids"],
                                entry.get("fresh", False)))
    return ModelGraph(
        layers=layers,
        params=params,
        input_shape=tuple(header["input_shape"]),
        score_range=tuple(header["score_range"]) if header["score_range"] else None,
        masks={int(k): list(v) for k, v in header["masks"].items()},
    )


def load_checkpoint(path):
    return model_from_checkpoint_bytes(Path(path).read_bytes())


def model_digest(model):
    """Content hash of the fully serialized model."""
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()
