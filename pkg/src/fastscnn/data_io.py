"""Dataset ingestion, label mapping, normalization and weight files.

Weight file layout (all little-endian)::

    b"FSCN"  u32 version  u32 count
    count x { u32 name_len, name (utf-8), u32 rank, u32 dims[rank], f32 payload[prod(dims)] }
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .augment import Sample
from .functional import IGNORE_ID

MAGIC = b"FSCN"
VERSION = 1

# Cityscapes labelId -> trainId for the 19 evaluated classes; every other id is ignored.
CITYSCAPES_TRAIN_IDS = {
    7: 0, 8: 1, 11: 2, 12: 3, 13: 4, 17: 5, 19: 6, 20: 7, 21: 8, 22: 9,
    23: 10, 24: 11, 25: 12, 26: 13, 27: 14, 28: 15, 31: 16, 32: 17, 33: 18,
}

PathLike = Union[str, os.PathLike]


class DataError(ValueError):
    """Input data could not be read or does not satisfy its contract."""


class WeightFileError(ValueError):
    pass


class BadMagic(WeightFileError):
    pass


class VersionMismatch(WeightFileError):
    pass


class TruncatedFile(WeightFileError):
    pass


class UnknownTensor(WeightFileError):
    pass


class MissingTensor(WeightFileError):
    pass


class ShapeMismatch(WeightFileError):
    pass


class DuplicateTensor(WeightFileError):
    pass


def atomic_write(path: PathLike, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- normalization ---------------------------------------------------------------

def normalize(image: np.ndarray, mean=0.5, std=0.5) -> np.ndarray:
    """``(H, W, 3)`` uint8 -> ``(1, 3, H, W)`` float32 of ``(x/255 - mean) / std``."""
    # float64 intermediate so the single rounding to float32 happens last
    x = image.astype(np.float64) / 255.0
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    std = np.asarray(std, dtype=np.float64).reshape(-1)
    x = (x - mean) / std
    return np.ascontiguousarray(x.transpose(2, 0, 1)[None], dtype=np.float32)


def denormalize(x: np.ndarray, mean=0.5, std=0.5) -> np.ndarray:
    """Inverse of :func:`normalize`, rounded back to uint8 ``(H, W, 3)``."""
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    std = np.asarray(std, dtype=np.float64).reshape(-1)
    img = x[0].transpose(1, 2, 0).astype(np.float64) * std + mean
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


# -- label mapping ---------------------------------------------------------------

def label_lut(mapping: Union[str, Mapping[int, int], None] = "cityscapes") -> np.ndarray:
    """256-entry lookup table; ids missing from ``mapping`` go to the ignore id.

    ``mapping`` is ``"cityscapes"``, ``"identity"`` or an explicit ``{raw: train}`` dict.
    """
    if mapping is None or mapping == "identity":
        return np.arange(256, dtype=np.uint8)
    if mapping == "cityscapes":
        mapping = CITYSCAPES_TRAIN_IDS
    lut = np.full(256, IGNORE_ID, dtype=np.uint8)
    for raw, train in mapping.items():
        if not (0 <= raw <= 255 and 0 <= train <= 255):
            raise DataError(f"label mapping entry {raw} -> {train} outside 0..255")
        lut[raw] = train
    return lut


def read_mapping(path: PathLike) -> dict[int, int]:
    """Parse a ``raw_id trainId`` text table (blank lines and ``#`` comments allowed)."""
    table = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            raw, train = int(parts[0]), int(parts[1])
        except (IndexError, ValueError):
            raise DataError(f"{path}:{lineno}: expected 'raw_id trainId', got {line!r}") from None
        if not (0 <= raw <= 255 and 0 <= train <= 255):
            raise DataError(f"{path}:{lineno}: ids must be in 0..255, got {line!r}")
        table[raw] = train
    return table


# -- raw tensor fallback ---------------------------------------------------------

def write_raw(path: PathLike, array: np.ndarray, **header) -> None:
    """Headerless little-endian payload plus a ``<path>.txt`` sidecar of ``key=value`` lines."""
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    meta = {"shape": ",".join(str(d) for d in array.shape), "dtype": array.dtype.name, **header}
    atomic_write(path, array.astype(dtype, copy=False).tobytes())
    atomic_write(f"{path}.txt", "".join(f"{k}={v}\n" for k, v in meta.items()).encode())


def read_raw_header(path: PathLike) -> dict[str, str]:
    side = Path(f"{path}.txt")
    if not side.exists():
        raise DataError(f"{path}: missing sidecar header {side}")
    meta = {}
    for line in side.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def read_raw(path: PathLike) -> np.ndarray:
    meta = read_raw_header(path)
    try:
        shape = tuple(int(d) for d in meta["shape"].split(","))
        dtype = np.dtype(meta["dtype"]).newbyteorder("<")
    except (KeyError, ValueError, TypeError) as err:
        raise DataError(f"{path}: bad sidecar header ({err})") from None
    data = Path(path).read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(data) != expected:
        raise DataError(f"{path}: payload has {len(data)} bytes, header implies {expected}")
    return np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


# -- images and labels -----------------------------------------------------------

def read_image(path: PathLike) -> np.ndarray:
    """8-bit RGB image as ``(H, W, 3)`` uint8 (PNG, or ``.raw`` with sidecar)."""
    if str(path).endswith(".raw"):
        img = read_raw(path)
        if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
            raise DataError(f"{path}: raw image must be uint8 (H, W, 3), got {img.dtype} {img.shape}")
        return img
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise DataError(f"{path}: expected an 8-bit RGB image, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, SyntaxError) as err:
        raise DataError(f"{path}: cannot decode image ({err})") from None


def read_label(path: PathLike) -> np.ndarray:
    """Single-channel 8-bit label image as ``(H, W)`` uint8."""
    if str(path).endswith(".raw"):
        lab = read_raw(path)
        if lab.dtype != np.uint8 or lab.ndim != 2:
            raise DataError(f"{path}: raw label must be uint8 (H, W), got {lab.dtype} {lab.shape}")
        return lab
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise DataError(f"{path}: expected a single-channel 8-bit label image, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, SyntaxError) as err:
        raise DataError(f"{path}: cannot decode label ({err})") from None


def write_label_png(path: PathLike, label: np.ndarray, text: Optional[Mapping[str, str]] = None) -> None:
    """Indexed (palette) PNG of class ids."""
    from io import BytesIO

    from PIL.PngImagePlugin import PngInfo

    lab = np.asarray(label)
    if lab.min() < 0 or lab.max() > 255:
        raise ValueError("class ids must fit in 8 bits")
    im = Image.fromarray(lab.astype(np.uint8), mode="P")
    rng = np.random.default_rng(0)
    palette = rng.integers(0, 256, size=(256, 3), dtype=np.uint8)
    im.putpalette(palette.reshape(-1).tolist())
    info = PngInfo()
    for k, v in (text or {}).items():
        info.add_text(k, v)
    buf = BytesIO()
    im.save(buf, format="PNG", pnginfo=info)
    atomic_write(path, buf.getvalue())


def load_sample(image_path: PathLike, label_path: PathLike, mapping="cityscapes",
                mean=0.5, std=0.5) -> Sample:
    """Decode, normalize and map one image/label pair."""
    img = read_image(image_path)
    lab = read_label(label_path)
    if img.shape[:2] != lab.shape:
        raise DataError(f"{image_path}: image size {img.shape[:2]} != label size {lab.shape} ({label_path})")
    lut = mapping if isinstance(mapping, np.ndarray) else label_lut(mapping)
    return Sample(normalize(img, mean, std), lut[lab][None].astype(np.int64))


@dataclass
class DatasetIndex:
    pairs: list = field(default_factory=list)
    split: str = "train"
    num_classes: int = 19

    def __len__(self) -> int:
        return len(self.pairs)

    def load(self, mapping="cityscapes", mean=0.5, std=0.5) -> list[Sample]:
        return [load_sample(i, l, mapping, mean, std) for i, l in self.pairs]


def _image_size(path: Path) -> tuple[int, int]:
    if path.suffix == ".raw":
        return tuple(int(d) for d in read_raw_header(path)["shape"].split(",")[:2])
    try:
        with Image.open(path) as im:
            return im.size[1], im.size[0]
    except (OSError, SyntaxError) as err:
        raise DataError(f"{path}: cannot decode ({err})") from None


def scan_dataset(root: PathLike, split: str, num_classes: int = 19) -> DatasetIndex:
    """Index ``<root>/<split>/images/*`` against same-named files in ``labels/``."""
    base = Path(root) / split
    images = sorted(p for p in (base / "images").glob("*") if p.suffix in (".png", ".raw"))
    if not images:
        raise DataError(f"no images found under {base / 'images'}")
    pairs = []
    for img in images:
        lab = base / "labels" / img.name
        if not lab.exists():
            raise DataError(f"{img}: missing label {lab}")
        if _image_size(img) != _image_size(lab):
            raise DataError(f"{img}: size differs from its label {lab}")
        pairs.append((img, lab))
    return DatasetIndex(pairs, split, num_classes)


# -- synthetic shapes ------------------------------------------------------------

_CLASS_COLORS = np.array([
    [70, 70, 70], [220, 40, 40], [40, 200, 60], [40, 80, 220], [230, 200, 30],
    [200, 60, 200], [30, 200, 200], [250, 140, 20], [120, 60, 20], [240, 240, 240],
])


def _shape_mask(kind: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
    ry, rx = rng.uniform(0.12, 0.3) * h, rng.uniform(0.08, 0.2) * w
    if kind == 0:  # rectangle
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    if kind == 1:  # ellipse
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # triangle: apex up, flat base
    top, bottom = cy - ry, cy + ry
    frac = (yy - top) / max(bottom - top, 1e-9)
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * rx)


def synth_pairs(num_classes: int = 3, size=(128, 256), n: int = 4, seed: int = 0):
    """Images of coloured geometric shapes with pixel-exact class labels.

    Class 0 is background; class ``k`` is drawn as shape type ``k % 3``
    (rectangle, ellipse, triangle) in its own colour.  Returns a list of
    ``(image uint8 (H, W, 3), label uint8 (H, W))``.
    """
    if not 2 <= num_classes <= len(_CLASS_COLORS):
        raise ValueError(f"num_classes must be in [2, {len(_CLASS_COLORS)}]")
    h, w = size
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        while True:
            label = np.zeros((h, w), dtype=np.uint8)
            for k in rng.permutation(np.arange(1, num_classes)):
                for _ in range(int(rng.integers(1, 3))):
                    label[_shape_mask(int(k) % 3, h, w, rng)] = k
            if len(np.unique(label)) == num_classes:
                break
        colors = _CLASS_COLORS[:num_classes] + rng.integers(-20, 21, size=(num_classes, 3))
        img = colors[label] + rng.integers(-12, 13, size=(h, w, 3))
        out.append((np.clip(img, 0, 255).astype(np.uint8), label))
    return out


def synth_dataset(root: PathLike, split: str = "train", num_classes: int = 3, size=(128, 256),
                  n: int = 4, seed: int = 0) -> DatasetIndex:
    """Write :func:`synth_pairs` as PNGs under ``<root>/<split>/{images,labels}``."""
    from io import BytesIO

    base = Path(root) / split
    pairs = []
    for i, (img, lab) in enumerate(synth_pairs(num_classes, size, n, seed)):
        paths = []
        for sub, arr in (("images", img), ("labels", lab)):
            buf = BytesIO()
            Image.fromarray(arr).save(buf, format="PNG")
            p = base / sub / f"{i:04d}.png"
            atomic_write(p, buf.getvalue())
            paths.append(p)
        pairs.append(tuple(paths))
    return DatasetIndex(pairs, split, num_classes)


def synth_samples(num_classes: int = 3, size=(128, 256), n: int = 4, seed: int = 0,
                  mean=0.5, std=0.5) -> list[Sample]:
    """In-memory equivalent of writing and reloading :func:`synth_dataset`."""
    return [Sample(normalize(img, mean, std), lab[None].astype(np.int64))
            for img, lab in synth_pairs(num_classes, size, n, seed)]


# -- weights ---------------------------------------------------------------------

def encode_weights(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def write_weight_file(path: PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode_weights(tensors))


def read_weight_file(path: PathLike) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    pos = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(data):
            raise TruncatedFile(f"{path}: truncated while reading {what} at byte {pos}")
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if take(4, "magic") != MAGIC:
        raise BadMagic(f"{path}: not a weight file (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {VERSION}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name!r}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        size = int(np.prod(dims)) if rank else 1
        payload = take(4 * size, f"payload of {name!r}")
        if name in tensors:
            raise DuplicateTensor(f"{path}: tensor {name!r} appears twice")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(data):
        raise WeightFileError(f"{path}: {len(data) - pos} trailing bytes after last tensor")
    return tensors


def save_weights(model, path: PathLike) -> None:
    """Parameters and batch-norm running statistics, in registry order."""
    write_weight_file(path, model.state())


def load_weights(model, path: PathLike, ignore_prefixes: Sequence[str] = ()) -> None:
    """Load ``path`` into ``model``; on any error the model is left untouched.

    Tensors whose names start with one of ``ignore_prefixes`` are skipped
    (e.g. training-only aux heads when loading into an inference graph).
    """
    tensors = read_weight_file(path)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    targets = {**{k: p.data for k, p in params.items()}, **buffers}
    for name, arr in tensors.items():
        if name.startswith(tuple(ignore_prefixes)) and name not in targets:
            continue
        if name not in targets:
            raise UnknownTensor(f"{path}: tensor {name!r} does not exist in the model")
        if targets[name].shape != arr.shape:
            raise ShapeMismatch(f"{path}: tensor {name!r} has shape {arr.shape}, model expects {targets[name].shape}")
    missing = [k for k in targets if k not in tensors]
    if missing:
        raise MissingTensor(f"{path}: missing tensors {missing[:5]}{'...' if len(missing) > 5 else ''}")
    for name, target in targets.items():
        np.copyto(target, tensors[name].astype(target.dtype))
