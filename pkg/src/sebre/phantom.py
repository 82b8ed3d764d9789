"""Synthetic section generator.

A phantom mimics the geometry of an annotated section: an elliptical
tissue outline on a light background containing one elliptical region blob
per profile class.  Blobs sit at class-consistent angular positions around
the section center (regions keep a consistent anatomical arrangement) with
seeded jitter in position, size, orientation and the global layout angle.
Each class carries a distinct texture signature: a characteristic base
intensity plus an oriented sinusoidal grating with class-specific
wavelength and direction.

Every class is guaranteed present, masks are pairwise disjoint, and the
same seed reproduces the pair bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from .dataset import DatasetError, RegionProfile, SectionRecord, render_label_image

# texture signature tables, indexed by class position within the profile
_WAVELENGTHS = (5.0, 7.0, 9.0, 11.0)
_GRATING_AMPLITUDE = 22.0
_TISSUE_BASE = 208.0
_BACKDROP = 242.0


def _ellipse_mask(h, w, cy, cx, ry, rx, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    yy = yy + 0.5 - cy
    xx = xx + 0.5 - cx
    ct, st = np.cos(theta), np.sin(theta)
    u = yy * ct + xx * st
    v = -yy * st + xx * ct
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _grating(h, w, wavelength, direction, phase) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    axis = yy * np.sin(direction) + xx * np.cos(direction)
    return np.sin(2.0 * np.pi * axis / wavelength + phase)


def generate_phantom(
    profile: RegionProfile, seed: int, h: int = 256, w: int = 256
) -> tuple[SectionRecord, np.ndarray]:
    """Deterministic synthetic section: returns (record, color label raster)."""
    if h < 128 or w < 128:
        raise DatasetError(f"phantom extent must be at least 128, got {h}x{w}")
    rng = np.random.default_rng(seed)
    k = profile.num_classes

    cy = h / 2 + rng.uniform(-0.02, 0.02) * h
    cx = w / 2 + rng.uniform(-0.02, 0.02) * w
    ry = 0.44 * h * rng.uniform(0.96, 1.04)
    rx = 0.46 * w * rng.uniform(0.96, 1.04)
    section = _ellipse_mask(h, w, cy, cx, ry, rx, rng.uniform(-0.1, 0.1))
    layout_angle = rng.uniform(-0.14, 0.14)  # global orientation jitter

    # region blobs: multiplier < 1 shrinks colliding neighbors until disjoint
    scale = min(h, w)
    specs = []
    for i in range(k):
        angle = layout_angle + 2.0 * np.pi * i / k + rng.uniform(-0.085, 0.085)
        ring = rng.uniform(0.55, 0.63)
        size = scale * (0.072 + 0.022 * ((i * 3) % k) / max(k - 1, 1)) * rng.uniform(0.93, 1.07)
        specs.append(
            {
                "cy": cy + ring * ry * np.sin(angle),
                "cx": cx + ring * rx * np.cos(angle),
                "ry": size,
                "rx": size * rng.uniform(0.68, 0.92),
                "theta": angle + rng.uniform(-0.35, 0.35),
                "mult": 1.0,
            }
        )

    def rasterize():
        return [
            _ellipse_mask(
                h, w, s["cy"], s["cx"], s["ry"] * s["mult"], s["rx"] * s["mult"], s["theta"]
            )
            & section
            for s in specs
        ]

    masks = rasterize()
    for _ in range(24):
        collided = False
        for i in range(k):
            for j in range(i + 1, k):
                if (masks[i] & masks[j]).any():
                    specs[i]["mult"] *= 0.92
                    specs[j]["mult"] *= 0.92
                    collided = True
        if not collided:
            break
        masks = rasterize()
    else:
        raise DatasetError(f"phantom seed {seed}: could not separate region blobs")
    if any(not m.any() for m in masks):
        raise DatasetError(f"phantom seed {seed}: a region blob vanished")

    image = np.full((h, w), _BACKDROP)
    tissue_texture = _TISSUE_BASE + 6.0 * _grating(
        h, w, 31.0, rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
    )
    image[section] = tissue_texture[section]
    for i, mask in enumerate(masks):
        base = 40.0 + 150.0 * i / max(k - 1, 1)
        texture = base + _GRATING_AMPLITUDE * _grating(
            h,
            w,
            _WAVELENGTHS[i % len(_WAVELENGTHS)],
            np.pi * i / k + rng.uniform(-0.1, 0.1),
            rng.uniform(0, 2 * np.pi),
        )
        image[mask] = texture[mask]
    image = image + rng.normal(0.0, 2.0, size=(h, w))
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    record = SectionRecord(
        image=np.repeat(image[None], 3, axis=0),
        instance_masks=np.stack(masks),
        class_ids=np.arange(1, k + 1, dtype=np.int64),
        source_id=f"phantom_{seed:06d}",
    )
    label = render_label_image(record.instance_masks, record.class_ids, profile)
    return record, label
