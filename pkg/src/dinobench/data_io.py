"""Dataset manifests, synthetic texture data, checkpoint and feature-file formats.

Checkpoint layout (all integers little-endian)::

    b"DINOBCKP" | u32 version | u32 header_len | header JSON | payload | u32 crc32

The header JSON carries config echo, seed, step, free-form metadata and an
index of ``[name, shape, offset, nbytes]`` for each ``<f4`` blob in the payload.
The CRC covers header and payload.

Feature-file layout::

    b"DINOFEAT" | u32 version | u64 n | u64 d | n*d <f4 row-major | u32 ids_len | ids JSON
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image, UnidentifiedImageError

from .augment import resize_bilinear
from .errors import ChecksumError, ConfigError, DataError

log = logging.getLogger(__name__)

UNLABELED = "_unlabeled_"
CKPT_MAGIC = b"DINOBCKP"
FEAT_MAGIC = b"DINOFEAT"
FORMAT_VERSION = 1


# -- datasets -------------------------------------------------------------------

@dataclass
class Dataset:
    """Labeled and unlabeled image pools decoded to ``(n, H, W, C)`` float32 in [0, 1]."""

    classes: list[str]
    labeled_ids: list[str]
    labels: np.ndarray
    labeled_images: np.ndarray
    unlabeled_ids: list[str] = field(default_factory=list)
    unlabeled_images: np.ndarray | None = None
    root: Path | None = None

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def all_images(self) -> np.ndarray:
        """Pretraining pool: labeled followed by unlabeled images."""
        if self.unlabeled_images is None or not len(self.unlabeled_images):
            return self.labeled_images
        return np.concatenate([self.labeled_images, self.unlabeled_images], axis=0)

    def check_disjoint(self) -> None:
        overlap = set(self.labeled_ids) & set(self.unlabeled_ids)
        if overlap:
            raise DataError(f"ids in both labeled and unlabeled pools: {sorted(overlap)[:3]}")


def read_manifest(path) -> tuple[list[tuple[str, str]], list[str]]:
    """Parse ``path,label`` rows. Returns rows and class names in first-appearance order."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"{path}: cannot open manifest ({exc.strerror})") from exc
    rows: list[tuple[str, str]] = []
    classes: list[str] = []
    seen: dict[str, int] = {}
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["path", "label"]:
            raise DataError(f"{path}:1: header must be 'path,label'")
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not x.strip() for x in rec):
                continue
            if len(rec) < 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns, got {len(rec)}")
            rel, label = rec[0].strip(), rec[1].strip()
            if rel in seen:
                raise DataError(f"{path}:{lineno}: duplicate path {rel!r} (first on line {seen[rel]})")
            seen[rel] = lineno
            if label != UNLABELED and label not in classes:
                classes.append(label)
            rows.append((rel, label))
    return rows, classes


def decode_image(path, size: int | None = None, channels: int = 3) -> np.ndarray:
    """Decode PNG/PPM/PGM to float32 ``(H, W, channels)``; optionally resize to ``size``."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            arr = np.asarray(im, dtype=np.float32) / np.float32(255.0)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"{path}: cannot decode image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if size is not None and arr.shape[:2] != (size, size):
        arr = np.clip(resize_bilinear(arr, size), 0.0, 1.0).astype(np.float32)
    return arr


def load_dataset(manifest, resolution: int, channels: int = 3) -> Dataset:
    """Read a manifest and decode every image it lists, resized to ``resolution``."""
    manifest = Path(manifest)
    rows, classes = read_manifest(manifest)
    index = {c: i for i, c in enumerate(classes)}
    root = manifest.parent
    lab_ids, lab_y, lab_imgs, unl_ids, unl_imgs = [], [], [], [], []
    for rel, label in rows:
        img = decode_image(root / rel, resolution, channels)
        if label == UNLABELED:
            unl_ids.append(rel)
            unl_imgs.append(img)
        else:
            lab_ids.append(rel)
            lab_y.append(index[label])
            lab_imgs.append(img)
    shape = (0, resolution, resolution, channels)
    ds = Dataset(
        classes=classes,
        labeled_ids=lab_ids,
        labels=np.asarray(lab_y, dtype=np.int64),
        labeled_images=np.stack(lab_imgs) if lab_imgs else np.zeros(shape, np.float32),
        unlabeled_ids=unl_ids,
        unlabeled_images=np.stack(unl_imgs) if unl_imgs else np.zeros(shape, np.float32),
        root=root,
    )
    ds.check_disjoint()
    return ds


# -- synthetic textures ------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    classes: int = 4
    per_class: int = 100
    unlabeled_per_class: int = 0
    size: int = 32
    base_freq: float = 2.5  # cycles per image width for the lowest band
    freq_ratio: float = 2.6  # wide enough that crop rescaling cannot bridge two bands
    freq_jitter: float = 0.1  # log-normal sigma around the band centre
    orient_jitter: float = 8.0  # degrees
    noise: float = 0.08
    tint: float = 0.25
    contrast: tuple[float, float] = (0.2, 0.45)

    def __post_init__(self):
        if self.classes < 1 or self.per_class < 0 or self.unlabeled_per_class < 0:
            raise ConfigError("synthetic dataset needs >= 1 class and non-negative counts")
        if self.size < 4:
            raise ConfigError(f"synthetic image size must be >= 4, got {self.size}")
        top = self.base_freq * self.freq_ratio ** ((self.classes - 1) // 2)
        if top >= self.size / 2:
            log.warning("highest frequency band %.1f reaches Nyquist for size %d", top, self.size)


def texture_class_params(k: int, cfg: SynthConfig) -> tuple[float, float]:
    """Class ``k`` -> (frequency band centre, orientation band in radians).

    Even classes hold axis-aligned gratings, odd classes diagonal ones; every
    pair of classes moves one frequency band up. Both bands are closed under
    flips and quarter turns, so the label survives the training augmentations.
    """
    freq = cfg.base_freq * cfg.freq_ratio ** (k // 2)
    return freq, (k % 2) * math.pi / 4


def synth_texture(k: int, cfg: SynthConfig, rng) -> np.ndarray:
    """One ``(size, size, 3)`` image of class ``k``.

    A single oriented sinusoid whose frequency and orientation bands carry the
    label; phase, quarter-turn, colour tint, contrast, brightness and pixel noise
    are random nuisances.
    """
    s = cfg.size
    freq, theta = texture_class_params(k, cfg)
    theta += rng.integers(0, 2) * math.pi / 2 + math.radians(rng.normal(0.0, cfg.orient_jitter))
    f = freq * math.exp(rng.normal(0.0, cfg.freq_jitter))
    phase = rng.uniform(-math.pi, math.pi)
    yy, xx = np.meshgrid(np.arange(s) / s - 0.5, np.arange(s) / s - 0.5, indexing="ij")
    pattern = np.cos(2 * math.pi * f * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    contrast = rng.uniform(*cfg.contrast)
    mean = 0.5 + rng.uniform(-0.1, 0.1)
    tint = 1.0 + rng.uniform(-cfg.tint, cfg.tint, size=3)
    img = (mean + contrast * pattern)[:, :, None] * tint[None, None, :]
    img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(out_dir, cfg: SynthConfig, seed: int) -> Path:
    """Write PNG images and ``manifest.csv`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, zlib.crc32(b"synth")])
    rows = []
    unl = []
    for k in range(cfg.classes):
        for i in range(cfg.per_class + cfg.unlabeled_per_class):
            img = synth_texture(k, cfg, rng)
            if i < cfg.per_class:
                rel = f"images/c{k}_{i:05d}.png"
                rows.append((rel, f"class_{k}"))
            else:
                # unlabeled file names carry no class hint
                rel = f"images/u{len(unl):06d}.png"
                unl.append((rel, UNLABELED))
            Image.fromarray(np.round(img * 255).astype(np.uint8), "RGB").save(out / rel, optimize=False)
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        w.writerows(rows + unl)
    return manifest


# -- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    seed: int
    step: int
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def _crc(*chunks: bytes) -> int:
    c = 0
    for chunk in chunks:
        c = zlib.crc32(chunk, c)
    return c & 0xFFFFFFFF


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    index, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        data = np.asarray(arr, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
        if not np.all(np.isfinite(data)):
            log.warning("checkpoint tensor %s holds non-finite values", name)
        raw = data.tobytes()
        index.append([name, list(data.shape), offset, len(raw)])
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": ckpt.config, "seed": int(ckpt.seed), "step": int(ckpt.step),
         "meta": ckpt.meta, "index": index, "payload_bytes": offset},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    payload = b"".join(blobs)
    return (CKPT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + payload
            + struct.pack("<I", _crc(header, payload)))


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < 16 or buf[:8] != CKPT_MAGIC:
        raise DataError(f"{source}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != FORMAT_VERSION:
        raise DataError(f"{source}: checkpoint version {version}, expected {FORMAT_VERSION}")
    start = 16
    header_raw = buf[start:start + hlen]
    if len(buf) < start + hlen + 4:
        raise ChecksumError(f"{source}: truncated checkpoint (CRC check failed)")
    try:
        header = json.loads(header_raw)
    except ValueError as exc:
        raise ChecksumError(f"{source}: corrupt header (CRC check failed)") from exc
    payload = buf[start + hlen:start + hlen + header["payload_bytes"]]
    tail = buf[start + hlen + header["payload_bytes"]:]
    if len(payload) != header["payload_bytes"] or len(tail) != 4:
        raise ChecksumError(f"{source}: truncated or padded checkpoint (CRC check failed)")
    (crc,) = struct.unpack("<I", tail)
    if crc != _crc(header_raw, payload):
        raise ChecksumError(f"{source}: CRC mismatch")
    tensors = {}
    for name, shape, off, nbytes in header["index"]:
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)
    return Checkpoint(header["config"], header["seed"], header["step"], tensors, header.get("meta", {}))


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(encode_checkpoint(ckpt))
        tmp.replace(path)
    except OSError as exc:
        raise DataError(f"{path}: cannot write checkpoint ({exc.strerror})") from exc
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc.strerror})") from exc
    return decode_checkpoint(buf, str(path))


def extract_group(tensors: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """``{"student/a": x}`` with prefix ``"student/"`` -> ``{"a": x}``."""
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


# -- feature matrices ---------------------------------------------------------------

@dataclass
class FeatureMatrix:
    values: np.ndarray
    ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.ids):
            raise ConfigError(f"feature matrix shape {self.values.shape} vs {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate sample ids in feature matrix")
        if not np.all(np.isfinite(self.values)):
            raise DataError("feature matrix holds NaN/Inf")

    @property
    def shape(self):
        return self.values.shape


def save_features(path, fm: FeatureMatrix) -> Path:
    path = Path(path)
    vals = np.ascontiguousarray(fm.values, dtype="<f4")
    ids = json.dumps(list(fm.ids), separators=(",", ":")).encode()
    n, d = vals.shape
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(FEAT_MAGIC + struct.pack("<IQQ", FORMAT_VERSION, n, d) + vals.tobytes()
                         + struct.pack("<I", len(ids)) + ids)
    except OSError as exc:
        raise DataError(f"{path}: cannot write features ({exc.strerror})") from exc
    return path


def load_features(path) -> FeatureMatrix:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read features ({exc.strerror})") from exc
    if buf[:8] != FEAT_MAGIC:
        raise DataError(f"{path}: not a feature file")
    version, n, d = struct.unpack_from("<IQQ", buf, 8)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: feature file version {version}, expected {FORMAT_VERSION}")
    off = 8 + struct.calcsize("<IQQ")
    end = off + 4 * n * d
    if len(buf) < end + 4:
        raise DataError(f"{path}: truncated feature file")
    vals = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float32)
    (ids_len,) = struct.unpack_from("<I", buf, end)
    ids = json.loads(buf[end + 4:end + 4 + ids_len])
    return FeatureMatrix(vals, ids)


def write_labels(path, ids: Iterable[str], labels: Iterable[int], classes: list[str]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "class"])
        for i, y in zip(ids, labels):
            w.writerow([i, int(y), classes[int(y)]])
    return path


def read_labels(path) -> dict[str, int]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            return {row["id"]: int(row["label"]) for row in csv.DictReader(fh)}
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"{path}: cannot read labels ({exc})") from exc
