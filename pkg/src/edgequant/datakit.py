"""Dataset ingestion, resizing, stratified splitting and a synthetic generator.

Images live in memory as one float32 NHWC array in [0, 1]. Supported on-disk
formats are binary PPM (P6) and PGM (P5); PNG/JPEG load through Pillow when it
is installed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ImageFormatError, InvalidArgumentError

IMAGE_SUFFIXES = {".ppm", ".pgm", ".pnm", ".png", ".jpg", ".jpeg"}
DEFAULT_RATIOS = (0.70, 0.15, 0.15)


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_names: List[str]
    paths: Optional[List[str]] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise InvalidArgumentError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise InvalidArgumentError("label outside the class range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        paths = [self.paths[i] for i in idx] if self.paths is not None else None
        return LabeledDataset(self.images[idx], self.labels[idx], list(self.class_names), paths)

    def class_counts(self) -> dict:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {name: int(c) for name, c in zip(self.class_names, counts)}


@dataclass(frozen=True)
class SplitSpec:
    ratios: Tuple[float, float, float] = DEFAULT_RATIOS
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios):
            raise InvalidArgumentError("split ratios must be three non-negative numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise InvalidArgumentError(f"split ratios sum to {sum(self.ratios)}, expected 1")


# --- image files -------------------------------------------------------------


def _read_token(data: bytes, pos: int):
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ValueError("unexpected end of header")
    return data[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Binary PPM/PGM to float32 HWC in [0, 1]; grayscale is replicated to RGB."""
    path = Path(path)
    data = path.read_bytes()
    try:
        magic, pos = _read_token(data, 0)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"unsupported magic {magic!r}")
        w, pos = _read_token(data, pos)
        h, pos = _read_token(data, pos)
        maxval, pos = _read_token(data, pos)
        w, h, maxval = int(w), int(h), int(maxval)
        if w <= 0 or h <= 0 or not 0 < maxval < 65536:
            raise ValueError("bad dimensions or maxval")
    except ValueError as e:
        raise ImageFormatError(f"{path}: malformed PNM header ({e})") from None
    pos += 1  # single whitespace byte ends the header
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * channels * dtype.itemsize
    if len(data) - pos < need:
        raise ImageFormatError(f"{path}: pixel data truncated ({len(data) - pos} of {need} bytes)")
    px = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=pos)
    img = px.reshape(h, w, channels).astype(np.float32) / np.float32(maxval)
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def write_ppm(path, img: np.ndarray):
    """Write a float HWC image in [0, 1] as binary PPM (P6, maxval 255)."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    px = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    h, w, _ = px.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + px.tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        return read_pnm(path)
    try:
        from PIL import Image
    except ImportError:
        raise ImageFormatError(f"{path}: {suffix} needs Pillow; convert to PPM/PGM instead") from None
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as e:
        raise ImageFormatError(f"{path}: {e}") from None
    return arr


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre (align_corners=False) bilinear resize of an HWC image."""
    if out_h <= 0 or out_w <= 0:
        raise InvalidArgumentError("resize targets must be positive")
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy[:, None, None]) + bot * fy[:, None, None]
    # convex combinations cannot leave the input range; clip rounding noise
    return np.clip(out, img.min(), img.max()).astype(np.float32)


def _load_files(files: Sequence[Tuple[Path, int]], target_size) -> np.ndarray:
    h, w = target_size
    out = np.empty((len(files), h, w, 3), dtype=np.float32)
    for i, (p, _) in enumerate(files):
        out[i] = resize_bilinear(read_image(p), h, w)
    return out


def load_image_dir(root, target_size: Tuple[int, int]) -> LabeledDataset:
    """Folder-per-class ingestion: ``root/<class_name>/<image>``.

    Classes are the sorted subdirectory names; files within a class are read
    in sorted order. Empty class directories raise a warning but keep their
    class index.
    """
    root = Path(root)
    if not root.is_dir():
        raise InvalidArgumentError(f"{root}: not a directory")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not classes:
        raise InvalidArgumentError(f"{root}: no class subdirectories")
    files = []
    for label, name in enumerate(classes):
        found = sorted(p for p in (root / name).iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not found:
            warnings.warn(f"class directory '{root / name}' contains no images", stacklevel=2)
        files.extend((p, label) for p in found)
    images = _load_files(files, target_size)
    labels = np.array([lab for _, lab in files], dtype=np.int64)
    return LabeledDataset(images, labels, classes, [str(p) for p, _ in files])


def load_manifest(manifest, target_size: Tuple[int, int], root=None) -> LabeledDataset:
    """Ingest from a text manifest of ``relative_path<TAB>class`` lines."""
    manifest = Path(manifest)
    root = Path(root) if root is not None else manifest.parent
    entries = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise InvalidArgumentError(f"{manifest}:{lineno}: expected 'path<TAB>class'")
        entries.append((root / parts[0], parts[1].strip()))
    classes = sorted({c for _, c in entries})
    files = [(p, classes.index(c)) for p, c in entries]
    labels = np.array([lab for _, lab in files], dtype=np.int64)
    return LabeledDataset(_load_files(files, target_size), labels, classes, [str(p) for p, _ in files])


# --- splitting ---------------------------------------------------------------


def _split_counts(n: int, ratios) -> Tuple[int, int, int]:
    n_train = int(math.floor(n * ratios[0] + 0.5))
    n_val = min(int(math.floor(n * ratios[1] + 0.5)), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split(ds: LabeledDataset, spec: SplitSpec = SplitSpec()):
    """Deterministic (stratified) train/val/test partition.

    Each class's indices are shuffled by a generator seeded from ``spec.seed``
    and cut by the ratios; the three parts keep dataset order within a split.
    """
    rng = np.random.default_rng(spec.seed)
    groups = [np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)] if spec.stratified else [np.arange(len(ds))]
    parts = ([], [], [])
    for idx in groups:
        perm = idx[rng.permutation(len(idx))]
        a, b, _ = _split_counts(len(idx), spec.ratios)
        parts[0].append(perm[:a])
        parts[1].append(perm[a : a + b])
        parts[2].append(perm[a + b :])
    return tuple(ds.subset(np.sort(np.concatenate(p)) if p else np.array([], np.int64)) for p in parts)


# --- synthetic data ----------------------------------------------------------

_HUES = [
    (0.90, 0.15, 0.15),
    (0.15, 0.75, 0.20),
    (0.20, 0.30, 0.95),
    (0.95, 0.85, 0.10),
    (0.80, 0.20, 0.85),
    (0.10, 0.85, 0.85),
    (0.95, 0.55, 0.10),
    (0.55, 0.55, 0.55),
]
_SHAPES = ("disk", "bar", "checker", "gradient")


def _template(k: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    shape = _SHAPES[k % len(_SHAPES)]
    if shape == "disk":
        mask = (yy**2 + xx**2 <= 0.45).astype(np.float32)
    elif shape == "bar":
        mask = (np.abs(yy) <= 0.3).astype(np.float32)
    elif shape == "checker":
        cells = max(h // 4, 1)
        mask = (((np.arange(h)[:, None] // cells) + (np.arange(w)[None, :] // cells)) % 2).astype(np.float32)
    else:
        mask = ((xx + 1) / 2).astype(np.float32)
    color = np.asarray(_HUES[k], dtype=np.float32)
    background = np.float32(0.1)
    return (background + mask[..., None] * (color - background)).astype(np.float32)


def synth_generate(num_classes: int, n_per_class: int, size=(32, 32), noise: float = 0.1, seed: int = 0) -> LabeledDataset:
    """Colored geometric templates plus uniform noise, clipped to [0, 1]."""
    if not 2 <= num_classes <= len(_HUES):
        raise InvalidArgumentError(f"num_classes must be in [2, {len(_HUES)}]")
    if not 0 <= noise < 0.5:
        raise InvalidArgumentError("noise must be in [0, 0.5)")
    h, w = size
    rng = np.random.default_rng(seed)
    templates = np.stack([_template(k, h, w) for k in range(num_classes)])
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = templates[labels]
    if noise > 0:
        images = images + rng.uniform(-noise, noise, images.shape).astype(np.float32)
    images = np.clip(images, 0, 1).astype(np.float32)
    names = [f"class_{k}_{_SHAPES[k % len(_SHAPES)]}" for k in range(num_classes)]
    return LabeledDataset(images, labels, names)


def synth_templates(num_classes: int, size=(32, 32)) -> np.ndarray:
    return np.stack([_template(k, *size) for k in range(num_classes)])


def parse_synth_spec(spec: str) -> dict:
    """``"classes=4,n=500,size=32,noise=0.1,seed=7"`` to synth_generate kwargs."""
    out = {"num_classes": 4, "n_per_class": 500, "size": (32, 32), "noise": 0.1, "seed": 0}
    keys = {"classes": "num_classes", "n": "n_per_class", "size": "size", "noise": "noise", "seed": "seed"}
    for part in filter(None, (p.strip() for p in spec.split(","))):
        k, _, v = part.partition("=")
        if k not in keys or not v:
            raise InvalidArgumentError(f"bad synth spec entry '{part}'")
        if k == "size":
            dims = [int(d) for d in v.split("x")]
            out["size"] = (dims[0], dims[-1])
        elif k == "noise":
            out["noise"] = float(v)
        else:
            out[keys[k]] = int(v)
    return out
