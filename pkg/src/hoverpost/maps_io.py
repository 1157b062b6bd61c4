"""Reading and writing the array and record formats used by the pipeline.

The ``.npy`` reader/writer is self-contained so that malformed files fail
with precise, typed errors instead of whatever a generic loader happens to
raise.  Writing always emits format version 1.0 with a 64-byte aligned
header; reading accepts versions 1.0 and 2.0.
"""

from __future__ import annotations

import ast
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    BadMagic,
    CorruptLabels,
    IoFailure,
    ShapeMismatch,
    TruncatedPayload,
    UnsupportedDtype,
)

logger = logging.getLogger(__name__)

MAGIC = b"\x93NUMPY"

# On-disk descriptors we accept, keyed by canonical form.  Everything is
# little-endian or endian-free; big-endian files are rejected.
_SUPPORTED_DESCRS = {
    "<f4": np.dtype("<f4"),
    "<f8": np.dtype("<f8"),
    "|u1": np.dtype("u1"),
    "<u2": np.dtype("<u2"),
    "<u4": np.dtype("<u4"),
    "<i4": np.dtype("<i4"),
}

# Boundary recolouring palette, one RGB triple per class id (modulo size).
OVERLAY_PALETTE = (
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 255, 0),
    (255, 0, 255),
    (0, 255, 255),
    (255, 128, 0),
    (128, 0, 255),
)


def _canonical_descr(descr: str) -> str:
    # '<u1', '|u1' and 'u1' are the same storage; fold to one spelling.
    if descr in ("<u1", "|u1", "u1"):
        return "|u1"
    return descr


def _parse_header(text: str) -> tuple[str, bool, tuple[int, ...]]:
    try:
        info = ast.literal_eval(text)
    except (ValueError, SyntaxError) as exc:
        raise BadMagic(f"malformed array header: {exc}") from exc
    if not isinstance(info, dict):
        raise BadMagic("array header is not a dict literal")
    try:
        descr = info["descr"]
        fortran = info["fortran_order"]
        shape = info["shape"]
    except KeyError as exc:
        raise BadMagic(f"array header missing key {exc}") from exc
    if not isinstance(descr, str):
        raise UnsupportedDtype(f"structured dtypes are not supported: {descr!r}")
    if not isinstance(shape, tuple) or not all(
        isinstance(n, int) and n >= 0 for n in shape
    ):
        raise BadMagic(f"bad shape in array header: {shape!r}")
    return descr, bool(fortran), shape


def _read_raw_npy(data: bytes, path: Path, allow_str: bool = False) -> np.ndarray:
    if len(data) < len(MAGIC) + 2 or data[: len(MAGIC)] != MAGIC:
        raise BadMagic(f"{path}: not an array file (bad magic)")
    major, minor = data[6], data[7]
    if (major, minor) == (1, 0):
        if len(data) < 10:
            raise TruncatedPayload(f"{path}: header length field missing")
        (hlen,) = struct.unpack_from("<H", data, 8)
        offset = 10
    elif (major, minor) == (2, 0):
        if len(data) < 12:
            raise TruncatedPayload(f"{path}: header length field missing")
        (hlen,) = struct.unpack_from("<I", data, 8)
        offset = 12
    else:
        raise BadMagic(f"{path}: unsupported format version {major}.{minor}")

    if len(data) < offset + hlen:
        raise TruncatedPayload(f"{path}: header truncated")
    descr, fortran, shape = _parse_header(data[offset : offset + hlen].decode("latin1"))

    descr = _canonical_descr(descr)
    if descr in _SUPPORTED_DESCRS:
        dtype = _SUPPORTED_DESCRS[descr]
    elif allow_str and (descr.startswith("<U") or descr.startswith("|S")):
        dtype = np.dtype(descr)
    else:
        raise UnsupportedDtype(f"{path}: dtype {descr!r} is not supported")

    count = 1
    for n in shape:
        count *= n
    expected = count * dtype.itemsize
    payload = data[offset + hlen :]
    if len(payload) < expected:
        raise TruncatedPayload(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}"
        )
    if len(payload) > expected:
        raise TruncatedPayload(
            f"{path}: {len(payload) - expected} trailing bytes after payload"
        )

    arr = np.frombuffer(payload, dtype=dtype, count=count)
    order = "F" if fortran else "C"
    # copy: frombuffer views are read-only, and 0-d shapes must survive
    return arr.reshape(shape, order=order).copy(order="C")


def read_npy(path: str | Path) -> np.ndarray:
    """Read a single array from an ``.npy`` file.

    Accepts format versions 1.0 and 2.0, C or Fortran element order, and the
    dtypes f32, f64, u8, u16, u32 and i32 (little-endian).  The returned
    array is always C-contiguous and owns its memory.

    Raises:
        BadMagic: the file is not an array file or uses an unknown version.
        UnsupportedDtype: the stored dtype is outside the supported set.
        TruncatedPayload: the payload is shorter or longer than the header
            declares.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return _read_raw_npy(data, path)


def write_npy(arr: np.ndarray, path: str | Path) -> None:
    """Write ``arr`` to ``path`` in format version 1.0.

    The header is padded with spaces so the payload starts on a 64-byte
    boundary and ends with a newline; identical arrays always produce
    byte-identical files.

    Raises:
        UnsupportedDtype: dtype outside f32/f64/u8/u16/u32/i32.
        IoFailure: the OS-level write failed.
    """
    arr = np.asarray(arr)
    descr = None
    for cand, dt in _SUPPORTED_DESCRS.items():
        if arr.dtype == dt:
            descr = cand
            break
    if descr is None:
        raise UnsupportedDtype(f"cannot write dtype {arr.dtype}")

    header = "{'descr': '%s', 'fortran_order': False, 'shape': %s, }" % (
        descr,
        repr(tuple(int(n) for n in arr.shape)),
    )
    base = len(MAGIC) + 2 + 2 + len(header) + 1
    header = header + " " * ((64 - base % 64) % 64) + "\n"
    if len(header) > 0xFFFF:
        raise IoFailure("header too large for format version 1.0")

    blob = b"".join(
        (
            MAGIC,
            bytes((1, 0)),
            struct.pack("<H", len(header)),
            header.encode("latin1"),
            np.ascontiguousarray(arr).tobytes(),
        )
    )
    try:
        Path(path).write_bytes(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


@dataclass
class FoldTile:
    """One tile of a loaded fold: image, fused instance map, classes, tissue."""

    image: np.ndarray  # H x W x 3 u8
    instances: np.ndarray  # H x W u32, labels 1..K
    classes: dict[int, int]  # instance label -> class id (source channel + 1)
    tissue: str


def load_pannuke_fold(
    images_path: str | Path,
    masks_path: str | Path,
    types_path: str | Path,
) -> list[FoldTile]:
    """Load one PanNuke-style fold into per-tile instance maps.

    ``masks`` holds six channels per tile: channels 0..4 carry per-class
    instance labels, channel 5 is background and is ignored.  The five
    class channels are fused into a single instance map with labels
    renumbered 1..K in (channel, source label) order; the class id of an
    instance is its source channel index plus one, so class ids are 1..5
    and 0 stays free for background.  When two channels claim the same
    pixel the lower channel index wins; contested pixels are counted and
    reported through a single warning.

    Mask values must be exact integers (the public release stores them as
    f64); fractional values raise :class:`CorruptLabels`.
    """
    images = read_npy(images_path)
    masks = read_npy(masks_path)
    types_raw = _read_raw_npy(
        Path(types_path).read_bytes(), Path(types_path), allow_str=True
    )

    if images.ndim != 4 or images.shape[3] != 3:
        raise ShapeMismatch(f"images must be (N, H, W, 3), got {images.shape}")
    if masks.ndim != 4 or masks.shape[3] != 6:
        raise ShapeMismatch(f"masks must be (N, H, W, 6), got {masks.shape}")
    if images.shape[:3] != masks.shape[:3]:
        raise ShapeMismatch(
            f"images {images.shape[:3]} and masks {masks.shape[:3]} disagree"
        )
    if types_raw.shape[0] != images.shape[0]:
        raise ShapeMismatch(
            f"{types_raw.shape[0]} tissue labels for {images.shape[0]} tiles"
        )

    if masks.dtype.kind == "f":
        if np.any(masks != np.floor(masks)):
            raise CorruptLabels("mask labels contain fractional values")
        if masks.min() < 0 or masks.max() > np.iinfo(np.uint32).max:
            raise CorruptLabels("mask labels outside u32 range")
        masks = masks.astype(np.uint32)
    else:
        masks = masks.astype(np.uint32)

    if images.dtype.kind == "f":
        if images.min() < 0 or images.max() > 255:
            raise CorruptLabels("image values outside [0, 255]")
        images = np.rint(images).astype(np.uint8)
    else:
        images = images.astype(np.uint8)

    tiles: list[FoldTile] = []
    collisions = 0
    for i in range(images.shape[0]):
        inst = np.zeros(masks.shape[1:3], dtype=np.uint32)
        classes: dict[int, int] = {}
        next_label = 1
        for ch in range(5):
            chan = masks[i, :, :, ch]
            for src in np.unique(chan):
                if src == 0:
                    continue
                pix = chan == src
                contested = int(np.count_nonzero(pix & (inst > 0)))
                collisions += contested
                pix &= inst == 0
                if not pix.any():
                    continue  # fully claimed by a lower channel
                inst[pix] = next_label
                classes[next_label] = ch + 1
                next_label += 1
        tiles.append(
            FoldTile(
                image=images[i],
                instances=inst,
                classes=classes,
                tissue=str(types_raw[i]),
            )
        )

    if collisions:
        logger.warning(
            "%d pixels were claimed by more than one mask channel "
            "(lower channel kept)",
            collisions,
        )
    return tiles


def write_instances_json(records, path: str | Path) -> None:
    """Serialise nucleus records to a deterministic JSON document.

    The document is ``{"version": 1, "nuclei": [...]}`` with keys sorted
    and a trailing newline, so identical inputs give byte-identical files.
    Record ids must be unique and every bounding box must enclose its
    contour vertices.

    Args:
        records: iterable of objects with ``id``, ``class_id``,
            ``class_prob``, ``centroid``, ``bbox`` and ``contour`` fields.
        path: output file path.
    """
    seen: set[int] = set()
    nuclei = []
    for rec in records:
        rid = int(rec.id)
        if rid in seen:
            raise ShapeMismatch(f"duplicate record id {rid}")
        seen.add(rid)
        rmin, cmin, rmax, cmax = (int(v) for v in rec.bbox)
        contour = [[int(r), int(c)] for r, c in rec.contour]
        for r, c in contour:
            if not (rmin <= r <= rmax and cmin <= c <= cmax):
                raise ShapeMismatch(
                    f"record {rid}: contour vertex ({r}, {c}) outside bbox"
                )
        nuclei.append(
            {
                "id": rid,
                "class_id": int(rec.class_id),
                "class_prob": float(rec.class_prob),
                "centroid": [float(rec.centroid[0]), float(rec.centroid[1])],
                "bbox": [rmin, cmin, rmax, cmax],
                "contour": contour,
            }
        )
    doc = {"version": 1, "nuclei": nuclei}
    try:
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def boundary_mask(instances: np.ndarray) -> np.ndarray:
    """Pixels whose instance label differs from any 8-neighbour.

    Out-of-image neighbours count as background, so instances touching the
    tile edge contribute their rim there as well.  Background pixels are
    never part of the result.
    """
    padded = np.pad(instances, 1, mode="constant", constant_values=0)
    core = padded[1:-1, 1:-1]
    out = np.zeros(instances.shape, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            shifted = padded[1 + dr : padded.shape[0] - 1 + dr,
                             1 + dc : padded.shape[1] - 1 + dc]
            out |= shifted != core
    out &= instances > 0
    return out


def write_overlay_png(
    image: np.ndarray,
    instances: np.ndarray,
    classes: dict[int, int],
    path: str | Path,
) -> None:
    """Write ``image`` with instance boundaries recoloured per class.

    The boundary of an instance is its set of pixels with a differing
    8-neighbour (or lying on the tile edge); each boundary pixel is painted
    with the palette colour of the instance's class id.
    """
    image = np.asarray(image)
    instances = np.asarray(instances)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatch(f"image must be H x W x 3, got {image.shape}")
    if image.shape[:2] != instances.shape:
        raise ShapeMismatch(
            f"image {image.shape[:2]} and instance map {instances.shape} disagree"
        )

    out = np.array(image, dtype=np.uint8, copy=True)
    rim = boundary_mask(instances)

    max_label = int(instances.max()) if instances.size else 0
    colour_of = np.zeros((max_label + 1, 3), dtype=np.uint8)
    for label, class_id in classes.items():
        if 0 < label <= max_label:
            colour_of[label] = OVERLAY_PALETTE[int(class_id) % len(OVERLAY_PALETTE)]
    out[rim] = colour_of[instances[rim]]

    try:
        Image.fromarray(out, mode="RGB").save(str(path), format="PNG")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
