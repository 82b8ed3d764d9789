"""Dataset preparation: color-coded mask extraction, rotation/flip
augmentation, downsampling, padding, source-level splits, and manifest IO.

Images are uint8 arrays in [3,H,W] channel-first layout; label rasters are
uint8 [H,W,3] color images in which every region carries its profile color
and the background is black.  Record transformations are pure per record.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import boxes_from_masks

log = logging.getLogger(__name__)

BACKGROUND_COLOR = (0, 0, 0)
# anti-aliased annotation edges snap to the nearest table color within this
# per-channel distance; anything further counts as an unknown color
COLOR_SNAP_DISTANCE = 8


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# profiles


@dataclass(frozen=True)
class RegionProfile:
    """Ordered region classes and their unique label colors."""

    name: str
    classes: tuple[str, ...]
    colors: tuple[tuple[int, int, int], ...]
    version: int = 1

    def __post_init__(self):
        if len(set(self.colors)) != len(self.colors):
            raise DatasetError(f"profile {self.name}: colors must be unique")
        if BACKGROUND_COLOR in self.colors:
            raise DatasetError(f"profile {self.name}: background color is reserved")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_id(self, name: str) -> int:
        """1-based class id in profile order (0 is background)."""
        return self.classes.index(name) + 1

    def color_of(self, class_id: int) -> tuple[int, int, int]:
        return self.colors[class_id - 1]


def load_profile(name_or_path: str) -> RegionProfile:
    """Load a built-in profile by name or a custom profile JSON by path."""
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        doc = json.loads(path.read_text())
    else:
        ref = resources.files("sebre").joinpath(f"profiles/{name_or_path}.json")
        if not ref.is_file():
            raise DatasetError(f"unknown profile {name_or_path!r}")
        doc = json.loads(ref.read_text())
    return RegionProfile(
        name=doc["name"],
        classes=tuple(c["name"] for c in doc["classes"]),
        colors=tuple(tuple(c["color"]) for c in doc["classes"]),
        version=doc.get("version", 1),
    )


# ---------------------------------------------------------------------------
# records


@dataclass
class SectionRecord:
    """One dataset item: section image, instance masks, and provenance."""

    image: np.ndarray  # uint8 [3, H, W]
    instance_masks: np.ndarray  # bool [M, H, W]
    class_ids: np.ndarray  # int [M], 1-based
    source_id: str
    rotation_deg: int = 0
    flipped: bool = False
    split: str = "train"
    image_path: str | None = None
    label_path: str | None = None

    @property
    def boxes(self) -> np.ndarray:
        """Tight pixel bounding boxes, derived from the masks."""
        return boxes_from_masks(self.instance_masks)

    @property
    def variant_id(self) -> str:
        flip = "f" if self.flipped else "u"
        return f"{self.source_id}_{flip}{self.rotation_deg:+03d}"


def validate_record(record: SectionRecord) -> list[str]:
    """Check the record invariants; returns a list of problems (empty = ok)."""
    problems = []
    if record.image.ndim != 3 or record.image.shape[0] != 3:
        problems.append(f"image must be [3,H,W], got {record.image.shape}")
        return problems
    h, w = record.image.shape[1:]
    if record.instance_masks.shape[1:] != (h, w):
        problems.append("mask extent differs from image extent")
    if len(record.class_ids) != len(record.instance_masks):
        problems.append("class_ids and instance_masks misaligned")
    if len(set(record.class_ids.tolist())) != len(record.class_ids):
        problems.append("duplicate class ids in one record")
    for i, mask in enumerate(record.instance_masks):
        if not mask.any():
            problems.append(f"instance {i} has an empty mask")
    if record.split not in ("train", "test"):
        problems.append(f"bad split {record.split!r}")
    return problems


# ---------------------------------------------------------------------------
# color-coded mask extraction and rendering


def extract_instance_masks(
    label_image: np.ndarray,
    profile: RegionProfile,
    unknown_tolerance: float = 0.001,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-region binary masks from a color-coded label raster.

    Pixels match a region by exact color or by snapping to the nearest
    table color within ``COLOR_SNAP_DISTANCE`` per channel.  Unknown colors
    beyond ``unknown_tolerance`` (fraction of pixels) raise, listing the
    offenders.  Returns (masks [M,H,W], class_ids [M]) for regions present.
    """
    label = np.asarray(label_image)
    if label.ndim != 3 or label.shape[2] != 3:
        raise DatasetError(f"label image must be [H,W,3], got {label.shape}")
    h, w = label.shape[:2]
    table = np.array([BACKGROUND_COLOR, *profile.colors], dtype=np.int16)
    pixels = label.astype(np.int16)
    best = np.full((h, w), np.iinfo(np.int16).max, dtype=np.int16)
    owner = np.zeros((h, w), dtype=np.int64)
    for idx, color in enumerate(table):
        dist = np.abs(pixels - color[None, None, :]).max(axis=2).astype(np.int16)
        closer = dist < best
        best = np.where(closer, dist, best)
        owner = np.where(closer, idx, owner)
    unknown = best > COLOR_SNAP_DISTANCE
    n_unknown = int(unknown.sum())
    if n_unknown > unknown_tolerance * h * w:
        offenders, counts = np.unique(
            label[unknown].reshape(-1, 3), axis=0, return_counts=True
        )
        top = offenders[np.argsort(-counts)[:5]].tolist()
        raise DatasetError(
            f"{n_unknown} pixels with unknown colors (tolerance "
            f"{unknown_tolerance:.2%}); worst offenders: {top}"
        )
    owner[unknown] = 0
    masks = []
    class_ids = []
    for class_id in range(1, profile.num_classes + 1):
        mask = owner == class_id
        if mask.any():
            masks.append(mask)
            class_ids.append(class_id)
    if not masks:
        return np.zeros((0, h, w), dtype=bool), np.zeros(0, dtype=np.int64)
    return np.stack(masks), np.asarray(class_ids, dtype=np.int64)


def render_label_image(
    masks: np.ndarray, class_ids: np.ndarray, profile: RegionProfile
) -> np.ndarray:
    """Inverse of extraction: paint masks with their profile colors."""
    if len(masks) == 0:
        raise DatasetError("cannot render a label image without mask extents")
    h, w = masks.shape[1:]
    out = np.zeros((h, w, 3), dtype=np.uint8)
    for mask, cid in zip(masks, class_ids):
        out[mask] = profile.color_of(int(cid))
    return out


def masks_to_code_raster(
    masks: np.ndarray, class_ids: np.ndarray, shape: tuple[int, int]
) -> np.ndarray:
    """Class-code raster (background 0, classes 1..K); later masks overwrite."""
    out = np.zeros(shape, dtype=np.uint8)
    for mask, cid in zip(masks, class_ids):
        out[mask] = np.uint8(cid)
    return out


def code_raster_to_label_image(codes: np.ndarray, profile: RegionProfile) -> np.ndarray:
    out = np.zeros((*codes.shape, 3), dtype=np.uint8)
    for cid in np.unique(codes):
        if cid:
            out[codes == cid] = profile.color_of(int(cid))
    return out


# ---------------------------------------------------------------------------
# augmentation


def _border_fill(image: np.ndarray) -> np.ndarray:
    """Per-channel median of the border pixels, used as rotation padding."""
    border = np.concatenate(
        [image[:, 0, :], image[:, -1, :], image[:, :, 0], image[:, :, -1]], axis=1
    )
    return np.median(border, axis=1)


def rotate_record(record: SectionRecord, degrees: int) -> SectionRecord | None:
    """Rotate about the image center with background padding.

    Images resample bilinearly, masks with nearest neighbor so they stay
    binary.  Instances rotated fully out of frame are dropped; returns None
    if nothing remains.
    """
    fill = _border_fill(record.image)
    channels = [
        ndimage.rotate(
            record.image[c].astype(np.float32),
            degrees,
            reshape=False,
            order=1,
            mode="constant",
            cval=float(fill[c]),
        )
        for c in range(3)
    ]
    image = np.clip(np.rint(np.stack(channels)), 0, 255).astype(np.uint8)
    masks = []
    class_ids = []
    for mask, cid in zip(record.instance_masks, record.class_ids):
        rotated = ndimage.rotate(
            mask.astype(np.uint8), degrees, reshape=False, order=0, mode="constant", cval=0
        ).astype(bool)
        if rotated.any():
            masks.append(rotated)
            class_ids.append(cid)
        else:
            log.warning(
                "instance class %s of %s rotated out of frame at %+d deg",
                cid, record.source_id, degrees,
            )
    if not masks:
        return None
    return replace(
        record,
        image=image,
        instance_masks=np.stack(masks),
        class_ids=np.asarray(class_ids, dtype=np.int64),
        rotation_deg=record.rotation_deg + degrees,
    )


def flip_record(record: SectionRecord) -> SectionRecord:
    """Horizontal mirror (left-right) of image and masks."""
    return replace(
        record,
        image=record.image[:, :, ::-1].copy(),
        instance_masks=record.instance_masks[:, :, ::-1].copy(),
        flipped=not record.flipped,
    )


def augment_rotations(
    record: SectionRecord,
    degrees: tuple[int, int] = (-20, 20),
    step: int = 2,
    include_flip: bool = False,
) -> list[SectionRecord]:
    """Rotation sweep over ``degrees`` excluding 0; flip doubles the output.

    The upright original is not part of the result (with the default
    [-20, 20] range and step 2 this yields exactly 20 rotated versions per
    section, 40 with the flipped counterpart).
    """
    lo, hi = degrees
    if step <= 0 or (hi - lo) % step:
        raise DatasetError(f"step {step} does not divide the range [{lo}, {hi}]")
    angles = [a for a in range(lo, hi + 1, step) if a != 0]
    bases = [record, flip_record(record)] if include_flip else [record]
    out = []
    for base in bases:
        for angle in angles:
            rotated = rotate_record(base, angle)
            if rotated is not None:
                out.append(rotated)
    return out


# ---------------------------------------------------------------------------
# downsampling and padding


def _pad_to_multiple(arr: np.ndarray, multiple: int, fill) -> np.ndarray:
    h, w = arr.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if not ph and not pw:
        return arr
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(arr, pad, mode="constant", constant_values=fill)


def downsample(record: SectionRecord, factor: float) -> SectionRecord:
    """Area-average the image and max-pool the masks by ``1/factor``.

    ``factor`` must be the reciprocal of a positive integer (1.0, 0.25,
    0.0625, ...).  A region pixel survives if any source pixel was set;
    instances whose masks vanish anyway are dropped with a warning.
    """
    if factor <= 0 or factor > 1:
        raise DatasetError(f"downsample factor must be in (0, 1], got {factor}")
    block = 1.0 / factor
    if abs(block - round(block)) > 1e-9:
        raise DatasetError(f"1/factor must be an integer, got 1/{factor} = {block}")
    block = int(round(block))
    if block == 1:
        return record
    fill = _border_fill(record.image)
    image = np.stack(
        [_pad_to_multiple(record.image[c].astype(np.float64), block, float(fill[c])) for c in range(3)]
    )
    h2, w2 = image.shape[1] // block, image.shape[2] // block
    image = image.reshape(3, h2, block, w2, block).mean(axis=(2, 4))
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    masks = []
    class_ids = []
    for mask, cid in zip(record.instance_masks, record.class_ids):
        small = _pad_to_multiple(mask, block, False)
        small = small.reshape(h2, block, w2, block).any(axis=(1, 3))
        if small.any():
            masks.append(small)
            class_ids.append(cid)
        else:
            log.warning(
                "instance class %s of %s vanished at downsample factor %s",
                cid, record.source_id, factor,
            )
    if not masks:
        masks_arr = np.zeros((0, h2, w2), dtype=bool)
        ids_arr = np.zeros(0, dtype=np.int64)
    else:
        masks_arr = np.stack(masks)
        ids_arr = np.asarray(class_ids, dtype=np.int64)
    return replace(record, image=image, instance_masks=masks_arr, class_ids=ids_arr)


def pad_to_stride(record: SectionRecord, stride: int) -> SectionRecord:
    """Pad bottom/right with background so both extents divide ``stride``."""
    h, w = record.image.shape[1:]
    if h % stride == 0 and w % stride == 0:
        return record
    fill = _border_fill(record.image)
    image = np.stack(
        [_pad_to_multiple(record.image[c], stride, int(round(fill[c]))) for c in range(3)]
    )
    masks = _pad_to_multiple(record.instance_masks, stride, False)
    return replace(record, image=image, instance_masks=masks)


# ---------------------------------------------------------------------------
# splits and manifests


@dataclass
class DatasetManifest:
    profile: str
    downsample_factor: float
    records: list[SectionRecord] = field(default_factory=list)

    def split_records(self, split: str) -> list[SectionRecord]:
        return [r for r in self.records if r.split == split]


def split_dataset(
    records: list[SectionRecord],
    train_fraction: float,
    seed: int,
    profile: str = "",
    downsample_factor: float = 1.0,
) -> DatasetManifest:
    """Assign train/test per source id, so all variants of a section land
    on the same side; seeded and deterministic.

    The train side takes ``ceil(fraction * n_sources)`` sources (2/3 of 557
    sections gives the 372/185 arithmetic).
    """
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train fraction must be in (0, 1), got {train_fraction}")
    sources = sorted({r.source_id for r in records})
    if len(sources) < 2:
        raise DatasetError("need at least 2 source sections to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(sources))
    n_train = math.ceil(train_fraction * len(sources) - 1e-9)
    train_sources = {sources[i] for i in order[:n_train]}
    out = []
    for record in records:
        out.append(replace(record, split="train" if record.source_id in train_sources else "test"))
    manifest = DatasetManifest(profile=profile, downsample_factor=downsample_factor, records=out)
    overlap = {r.source_id for r in manifest.split_records("train")} & {
        r.source_id for r in manifest.split_records("test")
    }
    if overlap:
        raise DatasetError(f"split leaked sources across sides: {sorted(overlap)[:4]}")
    return manifest


def save_manifest(manifest: DatasetManifest, path: Path) -> None:
    """Write the manifest JSON; record paths must be set (relative to it)."""
    entries = []
    for r in manifest.records:
        if not r.image_path or not r.label_path:
            raise DatasetError(f"record {r.variant_id} has no materialized paths")
        entries.append(
            {
                "source_id": r.source_id,
                "image_path": r.image_path,
                "label_path": r.label_path,
                "rotation_deg": r.rotation_deg,
                "flipped": r.flipped,
                "split": r.split,
            }
        )
    doc = {
        "profile": manifest.profile,
        "downsample_factor": manifest.downsample_factor,
        "records": entries,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path: Path) -> DatasetManifest:
    """Read a manifest; records come back as lazy stubs without pixel data."""
    doc = json.loads(Path(path).read_text())
    records = [
        SectionRecord(
            image=np.zeros((3, 0, 0), dtype=np.uint8),
            instance_masks=np.zeros((0, 0, 0), dtype=bool),
            class_ids=np.zeros(0, dtype=np.int64),
            source_id=e["source_id"],
            rotation_deg=e["rotation_deg"],
            flipped=e["flipped"],
            split=e["split"],
            image_path=e["image_path"],
            label_path=e["label_path"],
        )
        for e in doc["records"]
    ]
    return DatasetManifest(
        profile=doc["profile"],
        downsample_factor=doc["downsample_factor"],
        records=records,
    )


def load_record_data(
    record: SectionRecord, manifest_dir: Path, profile: RegionProfile
) -> SectionRecord:
    """Materialize a manifest stub: read its PNGs and extract the masks."""
    image = load_image(Path(manifest_dir) / record.image_path)
    label = load_label(Path(manifest_dir) / record.label_path)
    masks, class_ids = extract_instance_masks(label, profile)
    return replace(record, image=image, instance_masks=masks, class_ids=class_ids)


# ---------------------------------------------------------------------------
# image IO (paired *_img.png / *_lbl.png rasters)


def load_image(path: Path) -> np.ndarray:
    """Read an RGB PNG into uint8 [3,H,W]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return arr.transpose(2, 0, 1).copy()


def load_label(path: Path) -> np.ndarray:
    """Read a label raster into uint8 [H,W,3]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def save_image(path: Path, image_chw: np.ndarray) -> None:
    Image.fromarray(image_chw.transpose(1, 2, 0)).save(path, format="PNG")


def save_label(path: Path, label_hwc: np.ndarray) -> None:
    Image.fromarray(label_hwc).save(path, format="PNG")


def find_pairs(data_dir: Path) -> list[tuple[str, Path, Path]]:
    """Discover ``<stem>_img.png`` / ``<stem>_lbl.png`` pairs in a directory."""
    data_dir = Path(data_dir)
    pairs = []
    for image_path in sorted(data_dir.glob("*_img.png")):
        stem = image_path.name[: -len("_img.png")]
        label_path = data_dir / f"{stem}_lbl.png"
        if not label_path.exists():
            raise DatasetError(f"{image_path.name} has no matching {label_path.name}")
        pairs.append((stem, image_path, label_path))
    return pairs
