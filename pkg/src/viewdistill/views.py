"""View geometry and stage-dependent data augmentation.

A "view" is a horizontal stripe of a pedestrian image, given as exact
fractions of the image height, together with the resolution the stripe is
resized to.  The canonical registry holds the holistic view plus two groups
of partial views (quarter stripes and seventh stripes).  Augmentation is a
pure function of (image, stage, seed) and reports the erased rectangle so
that per-view loss masking can be computed downstream.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Tuple

import numpy as np
from PIL import Image


class GeometryError(ValueError):
    """Raised when an image is too small to yield the requested stripe."""


RESAMPLE_FILTERS = {
    "bilinear": Image.BILINEAR,
    "nearest": Image.NEAREST,
    "bicubic": Image.BICUBIC,
}


@dataclass(frozen=True)
class ViewSpec:
    """A named horizontal stripe (fractions of image height) plus output size."""

    name: str
    top_frac: Fraction
    bottom_frac: Fraction
    out_height: int
    out_width: int

    def __post_init__(self):
        top = Fraction(self.top_frac)
        bottom = Fraction(self.bottom_frac)
        object.__setattr__(self, "top_frac", top)
        object.__setattr__(self, "bottom_frac", bottom)
        if not (0 <= top < bottom <= 1):
            raise ValueError(
                f"view {self.name!r}: need 0 <= top < bottom <= 1, "
                f"got {top}..{bottom}"
            )
        if self.out_height < 1 or self.out_width < 1:
            raise ValueError(f"view {self.name!r}: output size must be positive")

    @property
    def n_stripes(self) -> int:
        """Number of uniform stripes in this view's group (lcm of denominators)."""
        return math.lcm(self.top_frac.denominator, self.bottom_frac.denominator)

    @property
    def is_holistic(self) -> bool:
        return self.top_frac == 0 and self.bottom_frac == 1

    def stripe_bounds(self, height: int) -> Tuple[int, int]:
        """Row interval [row0, row1) of the stripe in an image of this height.

        Boundaries are round-half-up of frac*height, computed exactly with
        rationals so that adjacent stripes share boundaries.
        """
        if height < self.n_stripes:
            raise GeometryError(
                f"image height {height} < {self.n_stripes} stripes "
                f"required by view {self.name!r}"
            )
        row0 = int(math.floor(self.top_frac * height + Fraction(1, 2)))
        row1 = int(math.floor(self.bottom_frac * height + Fraction(1, 2)))
        if row1 <= row0:
            raise GeometryError(
                f"view {self.name!r} yields empty stripe [{row0}, {row1}) "
                f"at height {height}"
            )
        return row0, row1

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "top_frac": str(self.top_frac),
            "bottom_frac": str(self.bottom_frac),
            "out_height": self.out_height,
            "out_width": self.out_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViewSpec":
        return cls(
            name=d["name"],
            top_frac=Fraction(d["top_frac"]),
            bottom_frac=Fraction(d["bottom_frac"]),
            out_height=int(d["out_height"]),
            out_width=int(d["out_width"]),
        )


HOLISTIC = "holistic"

# Holistic plus two partial groups: quarter stripes and seventh stripes.
# The top stripe of each group (0-1/4 and 0-1/7) is deliberately unused.
CANONICAL_VIEWS: Tuple[ViewSpec, ...] = (
    ViewSpec(HOLISTIC, Fraction(0), Fraction(1), 256, 128),
    ViewSpec("up1", Fraction(1, 4), Fraction(2, 4), 224, 224),
    ViewSpec("mid1", Fraction(2, 4), Fraction(3, 4), 224, 224),
    ViewSpec("dn1", Fraction(3, 4), Fraction(4, 4), 224, 224),
    ViewSpec("up2", Fraction(1, 7), Fraction(3, 7), 224, 224),
    ViewSpec("mid2", Fraction(3, 7), Fraction(5, 7), 224, 224),
    ViewSpec("dn2", Fraction(5, 7), Fraction(7, 7), 224, 224),
)

GROUP1 = ("up1", "mid1", "dn1")
GROUP2 = ("up2", "mid2", "dn2")


def canonical_views() -> Tuple[ViewSpec, ...]:
    return CANONICAL_VIEWS


def views_by_name(views: Sequence[ViewSpec]) -> dict:
    return {v.name: v for v in views}


def serialize_views(views: Sequence[ViewSpec]) -> list:
    """Registry as a config block (fractions as 'p/q' strings)."""
    return [v.to_dict() for v in views]


def parse_views(blocks: Sequence[dict]) -> Tuple[ViewSpec, ...]:
    return tuple(ViewSpec.from_dict(b) for b in blocks)


def scale_views(views: Sequence[ViewSpec], holistic_hw: Tuple[int, int],
                partial_hw: Tuple[int, int]) -> Tuple[ViewSpec, ...]:
    """Same stripe fractions, different output resolutions (desk-scale runs)."""
    out = []
    for v in views:
        h, w = holistic_hw if v.is_holistic else partial_hw
        out.append(ViewSpec(v.name, v.top_frac, v.bottom_frac, h, w))
    return tuple(out)


class AugmentStage(enum.Enum):
    """Which random ops run, by training phase."""

    PARTIAL_TEACHER = "partial_teacher"
    HOLISTIC_OR_INITIAL_STUDENT = "holistic_or_initial_student"
    FINAL_STUDENT = "final_student"


# Enabled random ops per stage: partial teachers get the heaviest recipe,
# the final student the lightest.
STAGE_OPS = {
    AugmentStage.PARTIAL_TEACHER: ("flip", "erase", "crop", "color", "rotation"),
    AugmentStage.HOLISTIC_OR_INITIAL_STUDENT: ("flip", "erase", "crop"),
    AugmentStage.FINAL_STUDENT: ("flip", "erase"),
}


@dataclass(frozen=True)
class EraseRecord:
    """Erased rectangle in the pixel coordinates of the augmented image.

    ``rect`` is (row0, row1, col0, col1), half-open.  ``present`` is False
    when no erasing was applied (disabled, not drawn, or sampling gave up).
    """

    present: bool
    rect: Optional[Tuple[int, int, int, int]] = None

    def __post_init__(self):
        if self.present and self.rect is None:
            raise ValueError("present erase record requires a rect")


NO_ERASE = EraseRecord(present=False)


@dataclass(frozen=True)
class AugmentParams:
    """Knobs for the random ops.  The op set per stage is fixed; these
    parameter values follow the usual defaults and are all config-exposed."""

    flip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area: Tuple[float, float] = (0.02, 0.4)
    erase_aspect: Tuple[float, float] = (0.3, 1.0 / 0.3)
    erase_fill: str = "random"  # "random" | "mean" | "zero"
    erase_attempts: int = 100
    crop_pad: int = 4
    rotation_degrees: float = 10.0
    color_strength: float = 0.2
    interpolation: str = "bilinear"

    def to_dict(self) -> dict:
        return {
            "flip_prob": self.flip_prob,
            "erase_prob": self.erase_prob,
            "erase_area": list(self.erase_area),
            "erase_aspect": list(self.erase_aspect),
            "erase_fill": self.erase_fill,
            "erase_attempts": self.erase_attempts,
            "crop_pad": self.crop_pad,
            "rotation_degrees": self.rotation_degrees,
            "color_strength": self.color_strength,
            "interpolation": self.interpolation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentParams":
        d = dict(d)
        d["erase_area"] = tuple(d["erase_area"])
        d["erase_aspect"] = tuple(d["erase_aspect"])
        return cls(**d)


def _as_uint8_image(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None].repeat(3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected HxW or HxWxC image, got shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = arr.repeat(3, axis=2)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    return arr


def resize_image(image: np.ndarray, out_height: int, out_width: int,
                 interpolation: str = "bilinear") -> np.ndarray:
    """Resize an HxWx3 uint8 image; same-size input is returned unchanged."""
    arr = _as_uint8_image(image)
    if arr.shape[0] == out_height and arr.shape[1] == out_width:
        return arr.copy()
    pil = Image.fromarray(arr)
    pil = pil.resize((out_width, out_height), RESAMPLE_FILTERS[interpolation])
    return np.asarray(pil)


def crop_view(image: np.ndarray, spec: ViewSpec,
              interpolation: str = "bilinear") -> np.ndarray:
    """Deterministically cut the spec's stripe and resize to its output size."""
    arr = _as_uint8_image(image)
    row0, row1 = spec.stripe_bounds(arr.shape[0])
    stripe = arr[row0:row1, :, :]
    return resize_image(stripe, spec.out_height, spec.out_width, interpolation)


def _apply_flip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def _apply_rotation(img: np.ndarray, rng: np.random.Generator,
                    degrees: float, interpolation: str) -> np.ndarray:
    angle = float(rng.uniform(-degrees, degrees))
    pil = Image.fromarray(img)
    pil = pil.rotate(angle, resample=RESAMPLE_FILTERS[interpolation],
                     expand=False, fillcolor=(0, 0, 0))
    return np.asarray(pil)


def _apply_color(img: np.ndarray, rng: np.random.Generator,
                 strength: float) -> np.ndarray:
    # brightness, contrast, saturation jitter by up to +-strength
    b, c, s = (float(rng.uniform(1.0 - strength, 1.0 + strength)) for _ in range(3))
    x = img.astype(np.float32)
    x = x * b
    x = x.mean() + (x - x.mean()) * c
    gray = x.mean(axis=2, keepdims=True)
    x = gray + (x - gray) * s
    return np.clip(np.round(x), 0, 255).astype(np.uint8)


def _apply_crop(img: np.ndarray, rng: np.random.Generator, pad: int) -> np.ndarray:
    h, w = img.shape[:2]
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="constant")
    r = int(rng.integers(0, 2 * pad + 1))
    c = int(rng.integers(0, 2 * pad + 1))
    return padded[r:r + h, c:c + w, :]


def _sample_erase_rect(rng: np.random.Generator, height: int, width: int,
                       params: AugmentParams) -> Optional[Tuple[int, int, int, int]]:
    area = height * width
    for _ in range(params.erase_attempts):
        target = float(rng.uniform(*params.erase_area)) * area
        aspect = float(rng.uniform(*params.erase_aspect))
        eh = int(round(math.sqrt(target * aspect)))
        ew = int(round(math.sqrt(target / aspect)))
        if 0 < eh < height and 0 < ew < width:
            r0 = int(rng.integers(0, height - eh + 1))
            c0 = int(rng.integers(0, width - ew + 1))
            return (r0, r0 + eh, c0, c0 + ew)
    return None


def _apply_erase(img: np.ndarray, rng: np.random.Generator,
                 params: AugmentParams) -> Tuple[np.ndarray, EraseRecord]:
    rect = _sample_erase_rect(rng, img.shape[0], img.shape[1], params)
    if rect is None:
        return img, NO_ERASE
    r0, r1, c0, c1 = rect
    out = img.copy()
    if params.erase_fill == "random":
        out[r0:r1, c0:c1, :] = rng.integers(
            0, 256, size=(r1 - r0, c1 - c0, img.shape[2]), dtype=np.uint8)
    elif params.erase_fill == "mean":
        out[r0:r1, c0:c1, :] = np.round(img.mean(axis=(0, 1))).astype(np.uint8)
    else:
        out[r0:r1, c0:c1, :] = 0
    return out, EraseRecord(present=True, rect=rect)


def augment(image: np.ndarray, stage: AugmentStage, seed,
            params: AugmentParams = AugmentParams(),
            ) -> Tuple[np.ndarray, bool, EraseRecord]:
    """Apply exactly the random ops enabled for the stage.

    Returns the augmented image, whether a horizontal flip was applied, and
    the erase rectangle in the coordinates of the returned image (all enabled
    ops preserve the input size).  Pure function of (image, stage, seed).
    """
    ops = STAGE_OPS[stage]
    rng = np.random.default_rng(seed)
    img = _as_uint8_image(image)

    flip_applied = False
    if "flip" in ops and rng.random() < params.flip_prob:
        img = _apply_flip(img)
        flip_applied = True
    if "rotation" in ops:
        img = _apply_rotation(img, rng, params.rotation_degrees,
                              params.interpolation)
    if "color" in ops:
        img = _apply_color(img, rng, params.color_strength)
    if "crop" in ops:
        img = _apply_crop(img, rng, params.crop_pad)

    erase = NO_ERASE
    if "erase" in ops and rng.random() < params.erase_prob:
        img, erase = _apply_erase(img, rng, params)
    return img, flip_applied, erase


def erase_overlap_fraction(erase: EraseRecord, spec: ViewSpec,
                           height: int, width: int) -> float:
    """Fraction of the view's stripe (in an height x width image) covered by
    the erase rectangle.  0 when nothing was erased."""
    if not erase.present:
        return 0.0
    row0, row1 = spec.stripe_bounds(height)
    er0, er1, ec0, ec1 = erase.rect
    rows = max(0, min(row1, er1) - max(row0, er0))
    cols = max(0, min(width, ec1) - max(0, ec0))
    stripe_area = (row1 - row0) * width
    return (rows * cols) / stripe_area
