"""Five-point similarity normalization of grayscale face crops."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class Landmarks5:
    """Left eye, right eye, nose, left mouth corner, right mouth corner as (x, y) pixels."""

    points: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (5, 2):
            raise AlignmentError(f"expected 5 (x, y) points, got shape {pts.shape}")
        object.__setattr__(self, "points", tuple(map(tuple, pts.tolist())))
        if np.allclose(pts[0], pts[1]):
            raise AlignmentError("eye points coincide")

    @classmethod
    def from_flat(cls, values):
        return cls(np.asarray(values, dtype=np.float64).reshape(5, 2))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64)

    @property
    def eye_center(self) -> np.ndarray:
        p = self.as_array()
        return (p[0] + p[1]) / 2

    @property
    def mouth_center(self) -> np.ndarray:
        p = self.as_array()
        return (p[3] + p[4]) / 2


@dataclass(frozen=True)
class NormSpec:
    size: int
    ec_mc_y: float
    ec_y: float

    def __post_init__(self):
        if self.ec_y + self.ec_mc_y >= self.size:
            raise AlignmentError(
                f"ec_y + ec_mc_y = {self.ec_y + self.ec_mc_y} must be < output size {self.size}")


TRAIN_SPEC = NormSpec(144, 48, 48)
TEST_SPEC = NormSpec(128, 48, 40)
SPECS = {"train": TRAIN_SPEC, "test": TEST_SPEC}


@dataclass(frozen=True)
class SimilarityTransform:
    """p' = scale * R(angle) @ p + translation."""

    angle: float
    scale: float
    translation: tuple

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        tx, ty = self.translation
        return np.array([[self.scale * c, -self.scale * s, tx],
                         [self.scale * s, self.scale * c, ty],
                         [0.0, 0.0, 1.0]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        m = self.matrix
        return pts @ m[:2, :2].T + m[:2, 2]

    def inverse(self) -> "SimilarityTransform":
        if self.scale <= 0:
            raise AlignmentError("transform is not invertible")
        inv_scale = 1.0 / self.scale
        c, s = math.cos(-self.angle), math.sin(-self.angle)
        tx, ty = self.translation
        t = -inv_scale * np.array([c * tx - s * ty, s * tx + c * ty])
        return SimilarityTransform(-self.angle, inv_scale, (float(t[0]), float(t[1])))


def compute_alignment(lm: Landmarks5, spec: NormSpec) -> SimilarityTransform:
    """Similarity that levels the eyes, sets the eye-to-mouth distance to
    ``spec.ec_mc_y`` and puts the eye midpoint at (size / 2, ec_y)."""
    p = lm.as_array()
    eye_c, mouth_c = lm.eye_center, lm.mouth_center
    dist = float(np.hypot(*(mouth_c - eye_c)))
    if dist < 1e-12:
        raise AlignmentError("eye and mouth midpoints coincide; scale is undefined")
    dx, dy = p[1] - p[0]
    angle = -math.atan2(dy, dx)
    scale = spec.ec_mc_y / dist
    c, s = math.cos(angle), math.sin(angle)
    rotated = scale * np.array([c * eye_c[0] - s * eye_c[1], s * eye_c[0] + c * eye_c[1]])
    t = np.array([spec.size / 2.0, spec.ec_y]) - rotated
    return SimilarityTransform(angle, scale, (float(t[0]), float(t[1])))


def to_gray(image) -> np.ndarray:
    """Rec. 601 luma for RGB(A) input; 2-D input passes through."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] in (3, 4):
        return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114
    raise AlignmentError(f"cannot convert image of shape {img.shape} to grayscale")


def warp(image, t: SimilarityTransform, out_size: int) -> np.ndarray:
    """Bilinear inverse-mapped warp; samples falling outside the source read 0."""
    src = np.asarray(image, dtype=np.float64)
    if src.ndim != 2:
        raise AlignmentError(f"warp expects a 2-D grayscale image, got shape {src.shape}")
    h, w = src.shape
    ys, xs = np.mgrid[0:out_size, 0:out_size]
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    sx, sy = t.inverse().apply(grid).T
    # snap values within rounding noise of the integer grid
    rx, ry = np.round(sx), np.round(sy)
    sx = np.where(np.abs(sx - rx) < 1e-9, rx, sx)
    sy = np.where(np.abs(sy - ry) < 1e-9, ry, sy)
    x0, y0 = np.floor(sx).astype(np.int64), np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0

    def sample(yy, xx):
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.zeros(yy.shape, dtype=np.float64)
        vals[ok] = src[yy[ok], xx[ok]]
        return vals

    out = ((1 - fx) * (1 - fy) * sample(y0, x0) + fx * (1 - fy) * sample(y0, x0 + 1)
           + (1 - fx) * fy * sample(y0 + 1, x0) + fx * fy * sample(y0 + 1, x0 + 1))
    return out.reshape(out_size, out_size)


def align_face(image, lm: Landmarks5, spec: NormSpec):
    """Grayscale + normalize; returns (aligned image, transform, moved landmarks)."""
    t = compute_alignment(lm, spec)
    out = warp(to_gray(image), t, spec.size)
    return out, t, Landmarks5(t.apply(lm.as_array()))


# ---------------------------------------------------------------------------
# manifest: path \t label \t lx ly rx ry nx ny mlx mly mrx mry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    path: str
    label: int
    landmarks: Landmarks5


def parse_manifest_line(line: str, lineno: int = 0) -> ManifestRecord | None:
    text = line.rstrip("\n\r")
    if not text.strip() or text.lstrip().startswith("#"):
        return None
    fields = text.split("\t")
    if len(fields) != 12:
        raise ValueError(f"manifest line {lineno}: expected 12 tab-separated fields, got {len(fields)}")
    try:
        label = int(fields[1])
        coords = [float(v) for v in fields[2:]]
    except ValueError as exc:
        raise ValueError(f"manifest line {lineno}: {exc}") from None
    return ManifestRecord(fields[0], label, Landmarks5.from_flat(coords))


def read_manifest(path) -> list[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            rec = parse_manifest_line(line, i)
            if rec is not None:
                records.append(rec)
    return records


def format_manifest_line(rec: ManifestRecord) -> str:
    coords = "\t".join(f"{v:.6f}" for v in rec.landmarks.as_array().ravel())
    return f"{rec.path}\t{rec.label}\t{coords}"


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(format_manifest_line(rec) + "\n")


def load_image(path) -> np.ndarray:
    """Read an image as float64 grayscale; ``.npy`` arrays are accepted as-is."""
    path = Path(path)
    if path.suffix == ".npy":
        return to_gray(np.load(path))
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA", "I", "F"):
            im = im.convert("RGB")
        return to_gray(np.asarray(im))


def save_image(path, image) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
