"""Batch color-space conversions on channel-planar images.

Every conversion starts from gamma-encoded sRGB in [0, 1], is linearized by a
power law of 2.2, and then maps into the target space.  Kernels are
vectorized over arbitrary trailing axes: an array of shape ``(3, ...)`` is
three channel planes, so a single call handles one image ``(3, H, W)`` or a
whole batch ``(3, N, H, W)`` with identical results.

Conventions fixed by this library:

- Hue channels (H of HSV, h of LCH) are stored in degrees in [0, 360).
- XYZ uses a fixed legacy RGB-derived matrix whose luminance row sums to
  ~0.9994 (equal-energy white), *not* the common sRGB/D65 matrix; callers
  relying on colorimetric XYZ should be aware of the difference.
- Opponent spaces use BT.601-family constants: YUV with U/V scales
  0.492/0.877, YIQ with the NTSC axes, YPbPr analog, and YCbCr as
  full-range digital with neutral chroma offset 0.5.
- LAB is CIE 1976 L*a*b* against the D65 white point.
- HED is hematoxylin/eosin/DAB stain separation in optical-density space
  (base-10 log, clamp 1e-6) through the inverse Ruifrok-Johnston matrix.
- CMYK defines C=M=Y=0 at the K=1 (pure black) singularity.

All arithmetic runs in float64; conversions are pure functions and safe to
call concurrently.
"""

from __future__ import annotations

import enum
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError


class ColorSpace(enum.Enum):
    """Tags for every representation an image can carry."""

    SRGB = "srgb"
    RGB_LINEAR = "rgb_linear"
    HSV = "hsv"
    XYZ = "xyz"
    LAB = "lab"
    LCH = "lch"
    YUV = "yuv"
    YIQ = "yiq"
    YCBCR = "ycbcr"
    YPBPR = "ypbpr"
    HED = "hed"
    CMYK = "cmyk"

    @property
    def channels(self) -> int:
        return 4 if self is ColorSpace.CMYK else 3


OPPONENT_SPACES = (ColorSpace.YUV, ColorSpace.YIQ, ColorSpace.YCBCR, ColorSpace.YPBPR)

GAMMA = 2.2

#: Clamp applied before taking optical density, keeps pure black finite.
HED_OD_CLAMP = 1e-6

#: D65 reference white for LAB.
LAB_WHITE = (0.95047, 1.0, 1.08883)

_LAB_DELTA = 6.0 / 29.0


def _space(tag) -> ColorSpace:
    if isinstance(tag, ColorSpace):
        return tag
    try:
        return ColorSpace[str(tag).upper()]
    except KeyError:
        raise UsageError(f"unknown color space {tag!r}") from None


@dataclass(frozen=True)
class PlanarImage:
    """One image as per-channel 2-D planes tagged with its color space."""

    space: ColorSpace
    planes: np.ndarray  # (C, H, W) float64

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float64)
        object.__setattr__(self, "planes", planes)
        if planes.ndim != 3:
            raise UsageError(f"planes must be (C, H, W), got shape {planes.shape}")
        if planes.shape[0] != self.space.channels:
            raise UsageError(
                f"{self.space.name} needs {self.space.channels} channels, got {planes.shape[0]}"
            )
        if not np.all(np.isfinite(planes)):
            raise DataError(f"non-finite values in {self.space.name} image")

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def channels(self) -> int:
        return self.planes.shape[0]


@dataclass(frozen=True)
class ConversionMatrix:
    """Affine per-pixel map: channels_out = coefficients @ channels_in + offset."""

    coefficients: np.ndarray  # (3, 3)
    offset: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "coefficients", np.asarray(self.coefficients, dtype=np.float64))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64))

    def apply(self, arr: np.ndarray) -> np.ndarray:
        out = np.einsum("ij,j...->i...", self.coefficients, arr)
        return out + self.offset.reshape((3,) + (1,) * (arr.ndim - 1))

    def apply_inverse(self, arr: np.ndarray) -> np.ndarray:
        shifted = arr - self.offset.reshape((3,) + (1,) * (arr.ndim - 1))
        inv = np.linalg.inv(self.coefficients)
        return np.einsum("ij,j...->i...", inv, shifted)


#: Legacy RGB-derived XYZ matrix (see module docstring).
XYZ_MATRIX = ConversionMatrix(
    coefficients=np.array(
        [
            [0.489989, 0.310008, 0.2],
            [0.176962, 0.81240, 0.010],
            [0.0, 0.01, 0.99],
        ]
    ),
    offset=np.zeros(3),
)

# BT.601 luma weights shared by the opponent-space family.
_LUMA = np.array([0.299, 0.587, 0.114])


def _yuv_matrix() -> ConversionMatrix:
    # U = 0.492 (B - Y), V = 0.877 (R - Y)
    u = 0.492 * (np.array([0.0, 0.0, 1.0]) - _LUMA)
    v = 0.877 * (np.array([1.0, 0.0, 0.0]) - _LUMA)
    return ConversionMatrix(np.vstack([_LUMA, u, v]), np.zeros(3))


def _ypbpr_matrix(offset: float = 0.0) -> ConversionMatrix:
    # Pb = (B - Y) / 1.772, Pr = (R - Y) / 1.402 (analog BT.601 scaling).
    pb = (np.array([0.0, 0.0, 1.0]) - _LUMA) / (2.0 * (1.0 - _LUMA[2]))
    pr = (np.array([1.0, 0.0, 0.0]) - _LUMA) / (2.0 * (1.0 - _LUMA[0]))
    return ConversionMatrix(np.vstack([_LUMA, pb, pr]), np.array([0.0, offset, offset]))


OPPONENT_MATRICES: Mapping[ColorSpace, ConversionMatrix] = {
    ColorSpace.YUV: _yuv_matrix(),
    ColorSpace.YIQ: ConversionMatrix(
        np.array(
            [
                [0.299, 0.587, 0.114],
                [0.595716, -0.274453, -0.321263],
                [0.211456, -0.522591, 0.311135],
            ]
        ),
        np.zeros(3),
    ),
    ColorSpace.YPBPR: _ypbpr_matrix(),
    # Full-range digital BT.601 in [0, 1]: same axes as YPbPr, chroma centered at 0.5.
    ColorSpace.YCBCR: _ypbpr_matrix(offset=0.5),
}

#: Ruifrok-Johnston stain vectors (rows: hematoxylin, eosin, DAB) in RGB space.
RGB_FROM_HED = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ]
)
HED_FROM_RGB = np.linalg.inv(RGB_FROM_HED)


# ---------------------------------------------------------------------------
# Array kernels.  Channel axis first, any trailing shape.
# ---------------------------------------------------------------------------

def linearize_array(arr: np.ndarray) -> np.ndarray:
    """Undo display gamma: v -> v**2.2 for values in [0, 1]."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        bad = np.argwhere((arr < 0.0) | (arr > 1.0))[0]
        raise DataError(
            f"sRGB value out of [0, 1] at channel {bad[0]}, pixel index {tuple(bad[1:])}"
        )
    return np.power(arr, GAMMA)


def hsv_from_linear(arr: np.ndarray) -> np.ndarray:
    """HSV with H in degrees in [0, 360) and S, V in [0, 1]."""
    r, g, b = arr[0], arr[1], arr[2]
    cmax = np.maximum(np.maximum(r, g), b)
    cmin = np.minimum(np.minimum(r, g), b)
    delta = cmax - cmin

    safe = np.where(delta > 0.0, delta, 1.0)
    h = np.select(
        [delta == 0.0, cmax == r, cmax == g],
        [
            np.zeros_like(r),
            60.0 * np.mod((g - b) / safe, 6.0),
            60.0 * ((b - r) / safe + 2.0),
        ],
        default=60.0 * ((r - g) / safe + 4.0),
    )
    h = np.mod(h, 360.0)  # collapses the rounded-up 360 boundary onto 0
    s = np.where(cmax > 0.0, delta / np.where(cmax > 0.0, cmax, 1.0), 0.0)
    return np.stack([h, s, cmax])


def xyz_from_linear(arr: np.ndarray) -> np.ndarray:
    return XYZ_MATRIX.apply(np.asarray(arr, dtype=np.float64))


def lab_from_xyz(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.min() < 0.0:
        raise DataError("negative tristimulus value in XYZ input")
    xn, yn, zn = LAB_WHITE
    cut = _LAB_DELTA**3

    def f(t):
        return np.where(t > cut, np.cbrt(t), t / (3.0 * _LAB_DELTA**2) + 4.0 / 29.0)

    fx, fy, fz = f(arr[0] / xn), f(arr[1] / yn), f(arr[2] / zn)
    l = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return np.stack([l, a, b])


def lch_from_lab(arr: np.ndarray) -> np.ndarray:
    l, a, b = arr[0], arr[1], arr[2]
    c = np.hypot(a, b)
    h = np.degrees(np.arctan2(b, a))
    h = np.mod(h, 360.0)
    h = np.where(c == 0.0, 0.0, h)  # zero chroma: hue fixed to 0 by convention
    return np.stack([np.asarray(l, dtype=np.float64), c, h])


def opponent_from_linear(arr: np.ndarray, target: ColorSpace) -> np.ndarray:
    if target not in OPPONENT_MATRICES:
        raise UsageError(f"{target} is not an opponent space (expected one of {[s.name for s in OPPONENT_SPACES]})")
    return OPPONENT_MATRICES[target].apply(np.asarray(arr, dtype=np.float64))


def hed_from_linear(arr: np.ndarray) -> np.ndarray:
    od = -np.log10(np.maximum(np.asarray(arr, dtype=np.float64), HED_OD_CLAMP))
    # Row-vector convention: stains = od @ HED_FROM_RGB, channel axis first here.
    return np.einsum("ij,i...->j...", HED_FROM_RGB, od)


def cmyk_from_linear(arr: np.ndarray) -> np.ndarray:
    r, g, b = arr[0], arr[1], arr[2]
    cmax = np.maximum(np.maximum(r, g), b)
    k = 1.0 - cmax
    safe = np.where(cmax > 0.0, cmax, 1.0)
    c = np.where(cmax > 0.0, (cmax - r) / safe, 0.0)
    m = np.where(cmax > 0.0, (cmax - g) / safe, 0.0)
    y = np.where(cmax > 0.0, (cmax - b) / safe, 0.0)
    return np.stack([c, m, y, k])


#: Kernel chain from linear RGB into each target space.
_FROM_LINEAR = {
    ColorSpace.RGB_LINEAR: lambda a: a,
    ColorSpace.HSV: hsv_from_linear,
    ColorSpace.XYZ: xyz_from_linear,
    ColorSpace.LAB: lambda a: lab_from_xyz(xyz_from_linear(a)),
    ColorSpace.LCH: lambda a: lch_from_lab(lab_from_xyz(xyz_from_linear(a))),
    ColorSpace.YUV: lambda a: opponent_from_linear(a, ColorSpace.YUV),
    ColorSpace.YIQ: lambda a: opponent_from_linear(a, ColorSpace.YIQ),
    ColorSpace.YCBCR: lambda a: opponent_from_linear(a, ColorSpace.YCBCR),
    ColorSpace.YPBPR: lambda a: opponent_from_linear(a, ColorSpace.YPBPR),
    ColorSpace.HED: hed_from_linear,
    ColorSpace.CMYK: cmyk_from_linear,
}


def convert_array(srgb: np.ndarray, target) -> np.ndarray:
    """Convert sRGB channel-first array data into `target` space."""
    target = _space(target)
    if target is ColorSpace.SRGB:
        return np.asarray(srgb, dtype=np.float64).copy()
    return _FROM_LINEAR[target](linearize_array(srgb))


# ---------------------------------------------------------------------------
# PlanarImage operations.
# ---------------------------------------------------------------------------

def _require(img: PlanarImage, space: ColorSpace, op: str) -> None:
    if img.space is not space:
        raise UsageError(f"{op} expects a {space.name} image, got {img.space.name}")


def srgb_linearize(img: PlanarImage) -> PlanarImage:
    _require(img, ColorSpace.SRGB, "srgb_linearize")
    return PlanarImage(ColorSpace.RGB_LINEAR, linearize_array(img.planes))


def rgb_to_hsv(img: PlanarImage) -> PlanarImage:
    _require(img, ColorSpace.RGB_LINEAR, "rgb_to_hsv")
    return PlanarImage(ColorSpace.HSV, hsv_from_linear(img.planes))


def rgb_to_xyz(img: PlanarImage) -> PlanarImage:
    _require(img, ColorSpace.RGB_LINEAR, "rgb_to_xyz")
    return PlanarImage(ColorSpace.XYZ, xyz_from_linear(img.planes))


def xyz_to_lab(img: PlanarImage) -> PlanarImage:
    _require(img, ColorSpace.XYZ, "xyz_to_lab")
    return PlanarImage(ColorSpace.LAB, lab_from_xyz(img.planes))


def lab_to_lch(img: PlanarImage) -> PlanarImage:
    _require(img, ColorSpace.LAB, "lab_to_lch")
    return PlanarImage(ColorSpace.LCH, lch_from_lab(img.planes))


def rgb_to_opponent(img: PlanarImage, target) -> PlanarImage:
    _require(img, ColorSpace.RGB_LINEAR, "rgb_to_opponent")
    target = _space(target)
    return PlanarImage(target, opponent_from_linear(img.planes, target))


def rgb_to_hed(img: PlanarImage) -> PlanarImage:
    _require(img, ColorSpace.RGB_LINEAR, "rgb_to_hed")
    return PlanarImage(ColorSpace.HED, hed_from_linear(img.planes))


def rgb_to_cmyk(img: PlanarImage) -> PlanarImage:
    _require(img, ColorSpace.RGB_LINEAR, "rgb_to_cmyk")
    return PlanarImage(ColorSpace.CMYK, cmyk_from_linear(img.planes))


def convert(img: PlanarImage, target) -> PlanarImage:
    """Convert an sRGB image into any supported space via the proper chain."""
    _require(img, ColorSpace.SRGB, "convert")
    target = _space(target)
    return PlanarImage(target, convert_array(img.planes, target))


def convert_batch(batch: Sequence[PlanarImage], target) -> list[PlanarImage]:
    """Convert a same-sized batch in one vectorized pass.

    Elementwise equal to mapping :func:`convert`; the batch is stacked into a
    single ``(3, N, H, W)`` array so each kernel runs once over all pixels.
    """
    target = _space(target)
    batch = list(batch)
    if not batch:
        return []
    dims = {(img.space, img.height, img.width) for img in batch}
    if len(dims) > 1:
        raise UsageError(f"mixed batch: images differ in space or dimensions: {sorted(str(d) for d in dims)}")
    space, _, _ = next(iter(dims))
    if space is not ColorSpace.SRGB:
        raise UsageError(f"convert_batch expects SRGB images, got {space.name}")
    stacked = np.stack([img.planes for img in batch], axis=1)  # (3, N, H, W)
    out = convert_array(stacked, target)
    return [PlanarImage(target, out[:, i]) for i in range(out.shape[1])]


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean/std computed on a training split."""

    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).ravel())
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64).ravel())
        if self.mean.shape != self.std.shape:
            raise UsageError("mean and std must have the same channel count")


def compute_channel_stats(planes: np.ndarray) -> ChannelStats:
    """Stats over a stacked batch; channel axis may be first or second.

    Accepts ``(C, ...)`` single images or ``(N, C, H, W)`` batches.
    """
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim == 4:  # (N, C, H, W)
        axes = (0, 2, 3)
        mean = planes.mean(axis=axes)
        std = planes.std(axis=axes)
    else:  # (C, ...)
        reduced = tuple(range(1, planes.ndim))
        mean = planes.mean(axis=reduced)
        std = planes.std(axis=reduced)
    return ChannelStats(mean, std)


def normalize_array(arr: np.ndarray, stats: ChannelStats, channel_axis: int = 0) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[channel_axis] != stats.mean.shape[0]:
        raise UsageError(
            f"stats have {stats.mean.shape[0]} channels, image has {arr.shape[channel_axis]}"
        )
    shape = [1] * arr.ndim
    shape[channel_axis] = -1
    std = np.maximum(stats.std, 1e-6)
    return (arr - stats.mean.reshape(shape)) / std.reshape(shape)


def normalize_for_network(img: PlanarImage, stats: ChannelStats) -> PlanarImage:
    """Standardize channels as (v - mean) / std, std floored at 1e-6."""
    return PlanarImage(img.space, normalize_array(img.planes, stats))
