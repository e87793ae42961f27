"""Samples, synthetic gland-like data, PPM/PGM I/O and flip augmentation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


class DataError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float in [0, 1]
    mask: np.ndarray   # (1, H, W) float in {0, 1}
    id: str


def splitmix64(x: int) -> int:
    """One round of the SplitMix64 output function."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def sample_seed(seed: int, index: int) -> int:
    """Counter-based per-sample seed: mixes (seed, index) with no shared state."""
    return splitmix64(splitmix64(seed & MASK64) ^ ((index * GOLDEN) & MASK64))


def _smooth_noise(rng: np.random.Generator, h: int, w: int, waves: int = 4) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    out = np.zeros((h, w))
    for _ in range(waves):
        fy, fx = rng.uniform(1.0, 6.0, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    return out / waves


def make_synthetic(seed: int, index: int, size: tuple[int, int] = (224, 224)) -> tuple[Sample, int]:
    """One synthetic image with 2-6 lobed blobs; returns the sample and its blob count."""
    h, w = size
    rng = np.random.default_rng(sample_seed(seed, index))
    n_blobs = int(rng.integers(2, 7))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)
    soft = np.zeros((h, w))
    scale = min(h, w)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.15, 0.85, size=2) * (h, w)
        r0 = rng.uniform(0.08, 0.18) * scale
        aspect = rng.uniform(0.6, 1.4)
        angle = rng.uniform(0, np.pi)
        lobes = int(rng.integers(0, 5))
        amp = rng.uniform(0.0, 0.25) if lobes else 0.0
        phase = rng.uniform(0, 2 * np.pi)
        dy, dx = yy - cy, xx - cx
        ry = dy * np.cos(angle) - dx * np.sin(angle)
        rx = dy * np.sin(angle) + dx * np.cos(angle)
        theta = np.arctan2(ry, rx)
        radius = r0 * (1.0 + amp * np.sin(lobes * theta + phase))
        rho = np.sqrt((ry * aspect) ** 2 + (rx / aspect) ** 2)
        mask |= rho < radius
        # soft edge in the image, hard edge in the mask
        soft = np.maximum(soft, 1.0 / (1.0 + np.exp((rho - radius) / (0.02 * scale))))

    background = np.array([0.85, 0.70, 0.80]) + 0.06 * rng.normal(size=3)
    gland = np.array([0.45, 0.25, 0.55]) + 0.06 * rng.normal(size=3)
    texture = _smooth_noise(rng, h, w)
    img = (background[:, None, None] * (1.0 - soft) + gland[:, None, None] * soft
           + 0.05 * texture[None] + 0.03 * rng.normal(size=(3, h, w)))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    sample = Sample(image=img, mask=mask[None].astype(np.float32), id=f"synth-{seed}-{index:05d}")
    return sample, n_blobs


def generate_synthetic(n: int, seed: int = 42, size: tuple[int, int] = (224, 224)) -> list[Sample]:
    if n < 1:
        raise DataError("n must be >= 1")
    return [make_synthetic(seed, i, size)[0] for i in range(n)]


# ---------------------------------------------------------------------------
# Netpbm I/O
# ---------------------------------------------------------------------------

def _read_netpbm(path: Path, magic: bytes) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != magic:
        raise DataError(f"{path}: expected magic {magic.decode()}, found {tokens[0][:8]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric header field") from exc
    if width < 1 or height < 1 or maxval != 255:
        raise DataError(f"{path}: unsupported header (width={width}, height={height}, maxval={maxval})")
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    body = raw[pos:pos + need]
    if len(body) != need:
        raise DataError(f"{path}: raster has {len(body)} bytes, expected {need}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)


def read_ppm(path) -> np.ndarray:
    """P6 file -> (3, H, W) uint8."""
    return _read_netpbm(Path(path), b"P6").transpose(2, 0, 1).copy()


def read_pgm(path) -> np.ndarray:
    """P5 file -> (H, W) uint8."""
    return _read_netpbm(Path(path), b"P5")[:, :, 0].copy()


def write_ppm(path, image: np.ndarray) -> None:
    """(3, H, W) floats in [0, 1] -> binary P6."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = arr.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    """(H, W) values in [0, 1] -> binary P5."""
    arr = np.clip(np.rint(np.asarray(mask) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def resize_chw(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[-2:] == (size, size):
        return arr.astype(np.float32)
    return T.bilinear_resize(Tensor(arr[None].astype(np.float32)), size, size).data[0]


def load_sample(image_path, mask_path, size: int = 224) -> Sample:
    img = read_ppm(image_path)
    mask = read_pgm(mask_path)
    if img.shape[1:] != mask.shape:
        raise DataError(f"{image_path} is {img.shape[2]}x{img.shape[1]} but {mask_path} is "
                        f"{mask.shape[1]}x{mask.shape[0]}")
    image = resize_chw(img.astype(np.float32) / 255.0, size)
    m = (mask >= 128).astype(np.float32)[None]
    m = (resize_chw(m, size) > 0.5).astype(np.float32)
    return Sample(image=image, mask=m, id=Path(image_path).stem)


def save_dataset(samples: Sequence[Sample], out_dir) -> None:
    """Write ``images/<id>.ppm`` and ``masks/<id>.pgm`` pairs."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_ppm(out / "images" / f"{s.id}.ppm", s.image)
        write_pgm(out / "masks" / f"{s.id}.pgm", s.mask[0])


def load_dataset(data_dir, size: int = 224) -> list[Sample]:
    root = Path(data_dir)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root}: expected images/ and masks/ subdirectories")
    samples = []
    for img in sorted(img_dir.glob("*.ppm")):
        mask = mask_dir / f"{img.stem}.pgm"
        if not mask.is_file():
            raise DataError(f"{img}: no matching mask {mask}")
        samples.append(load_sample(img, mask, size))
    if not samples:
        raise DataError(f"{img_dir}: no .ppm images found")
    return samples


# ---------------------------------------------------------------------------
# Augmentation and batching
# ---------------------------------------------------------------------------

def flip(sample: Sample, horizontal: bool, vertical: bool) -> Sample:
    img, mask = sample.image, sample.mask
    if horizontal:
        img, mask = img[:, :, ::-1], mask[:, :, ::-1]
    if vertical:
        img, mask = img[:, ::-1, :], mask[:, ::-1, :]
    return Sample(image=np.ascontiguousarray(img), mask=np.ascontiguousarray(mask), id=sample.id)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Independent horizontal and vertical flips, each with probability 0.5."""
    h, v = rng.random(2) < 0.5
    return flip(sample, bool(h), bool(v))


def to_batch(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.mask for s in samples]).astype(np.float32))


def kfold_indices(n: int, k: int, seed: int = 42) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold (train, validation) index splits."""
    if not 2 <= k <= n:
        raise DataError(f"need 2 <= k <= n, got k={k}, n={n}")
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, k)
    return [(np.sort(np.concatenate(folds[:i] + folds[i + 1:])), np.sort(folds[i])) for i in range(k)]
