"""Synthetic forgery data: procedural images, splice/copy-move edits, and
the JPEG / Gaussian-blur distortions used for robustness sweeps.

Every generator is a pure function of (seed, config). Images are float32
RGB in [0,1]; masks are uint8 {0,1} marking exactly the replaced pixels.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

DEFAULT_MIN_FRAC = 0.02
DEFAULT_MAX_FRAC = 0.4
# replaced content must differ from what it covers by at least this mean
# absolute distance, else the forgery would be undetectable in principle
MIN_VISIBLE_DIFF = 0.08
_PLACEMENT_TRIES = 200


class GenerationError(RuntimeError):
    """Raised when a forgery region cannot be placed under the constraints."""


@dataclass
class ForgerySample:
    image: np.ndarray           # (H, W, 3) float32 in [0,1]
    mask: np.ndarray            # (H, W) uint8 in {0,1}
    meta: dict = field(default_factory=dict)


@dataclass
class DistortionSpec:
    """One level of the robustness ladder."""

    kind: str                           # "jpeg" or "gaussian_blur"
    jpeg_quality: int | None = None
    blur_kernel: int | None = None
    blur_sigma: float | None = None

    def __post_init__(self):
        if self.kind == "jpeg":
            if self.jpeg_quality is None or not 1 <= self.jpeg_quality <= 100:
                raise ValueError("jpeg_quality must be in [1,100]")
        elif self.kind == "gaussian_blur":
            if (self.blur_kernel is None or self.blur_kernel < 3
                    or self.blur_kernel % 2 == 0):
                raise ValueError("blur_kernel must be an odd integer >= 3")
            if self.blur_sigma is not None and self.blur_sigma <= 0:
                raise ValueError("blur_sigma must be positive")
        else:
            raise ValueError(f"unknown distortion kind {self.kind!r}")

    def apply(self, img: np.ndarray) -> np.ndarray:
        if self.kind == "jpeg":
            return apply_jpeg(img, self.jpeg_quality)
        return apply_gaussian_blur(img, self.blur_kernel, self.blur_sigma)


def generate_base_image(seed: int, h: int, w: int) -> np.ndarray:
    """Procedural host image: colour gradient + random shapes + texture."""
    if h < 16 or w < 16:
        raise ValueError("image must be at least 16x16")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)

    # smooth background: blend two random colours along a random direction
    c0, c1 = rng.random(3), rng.random(3)
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * xx + np.sin(theta) * yy + 1.0) / 2.0
    img = c0[None, None, :] * (1 - t[:, :, None]) + c1[None, None, :] * t[:, :, None]

    # a handful of filled ellipses with their own colours
    for _ in range(int(rng.integers(3, 8))):
        cy, cx = rng.uniform(0, 1), rng.uniform(0, 1)
        ry, rx = rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        colour = rng.random(3)
        alpha = rng.uniform(0.5, 1.0)
        img[inside] = (1 - alpha) * img[inside] + alpha * colour

    # coarse texture (upsampled low-res noise) plus fine grain
    coarse = rng.normal(0, 1, (max(h // 8, 2), max(w // 8, 2), 3))
    coarse = ndimage.zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1], 1),
                          order=1)
    img += rng.uniform(0.02, 0.07) * coarse[:h, :w]
    img += rng.uniform(0.003, 0.01) * rng.normal(0, 1, (h, w, 3))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _ellipse_mask(rng, h, w, min_frac, max_frac, margin=1):
    """Random filled ellipse whose area fraction lands inside the bounds."""
    for _ in range(_PLACEMENT_TRIES):
        frac = rng.uniform(min_frac, max_frac)
        aspect = rng.uniform(0.5, 2.0)
        # pi*ry*rx = frac*h*w with rx = aspect*ry
        ry = np.sqrt(frac * h * w / (np.pi * aspect))
        rx = aspect * ry
        if ry >= h / 2 - margin or rx >= w / 2 - margin:
            continue
        cy = rng.uniform(ry + margin, h - ry - margin)
        cx = rng.uniform(rx + margin, w - rx - margin)
        yy, xx = np.mgrid[0:h, 0:w]
        mask = (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0)
        got = mask.mean()
        if min_frac <= got <= max_frac:
            return mask.astype(np.uint8)
    raise GenerationError("could not place an ellipse within the area bounds")


def _polygon_mask(rng, h, w, min_frac, max_frac):
    """Random convex-ish polygon; falls back on rejection sampling."""
    for _ in range(_PLACEMENT_TRIES):
        frac = rng.uniform(min_frac, max_frac)
        radius = np.sqrt(frac * h * w / np.pi)
        cy = rng.uniform(radius, h - radius) if h > 2 * radius else h / 2
        cx = rng.uniform(radius, w - radius) if w > 2 * radius else w / 2
        n_pts = int(rng.integers(3, 8))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n_pts))
        radii = radius * rng.uniform(0.7, 1.3, n_pts)
        pts = [(float(cx + r * np.cos(a)), float(cy + r * np.sin(a)))
               for a, r in zip(angles, radii)]
        canvas = Image.new("L", (w, h), 0)
        ImageDraw.Draw(canvas).polygon(pts, fill=1)
        mask = np.asarray(canvas, dtype=np.uint8)
        got = mask.mean()
        if min_frac <= got <= max_frac:
            return mask
    raise GenerationError("could not place a polygon within the area bounds")


def generate_splice(seed: int, h: int, w: int,
                    min_frac: float = DEFAULT_MIN_FRAC,
                    max_frac: float = DEFAULT_MAX_FRAC) -> ForgerySample:
    """Paste a region from a donor procedural image into a host image."""
    rng = np.random.default_rng(seed)
    host_seed = int(rng.integers(0, 2 ** 31))
    host = generate_base_image(host_seed, h, w)
    for _ in range(_PLACEMENT_TRIES):
        donor_seed = int(rng.integers(0, 2 ** 31))
        donor = generate_base_image(donor_seed, h, w)
        if rng.random() < 0.5:
            mask = _ellipse_mask(rng, h, w, min_frac, max_frac)
        else:
            mask = _polygon_mask(rng, h, w, min_frac, max_frac)
        region = mask > 0
        if np.abs(host[region] - donor[region]).mean() < MIN_VISIBLE_DIFF:
            continue
        image = host.copy()
        image[region] = donor[region]
        return ForgerySample(image=image, mask=mask,
                             meta={"kind": "splice", "seed": seed,
                                   "host_seed": host_seed,
                                   "donor_seed": donor_seed})
    raise GenerationError("could not draw a visibly distinct splice region")


def generate_copy_move(seed: int, h: int, w: int,
                       min_frac: float = DEFAULT_MIN_FRAC,
                       max_frac: float = DEFAULT_MAX_FRAC) -> ForgerySample:
    """Copy a region of the image onto a disjoint location in the same image."""
    rng = np.random.default_rng(seed)
    host_seed = int(rng.integers(0, 2 ** 31))
    host = generate_base_image(host_seed, h, w)
    for _ in range(_PLACEMENT_TRIES):
        src = _ellipse_mask(rng, h, w, min_frac, max_frac)
        ys, xs = np.nonzero(src)
        dy = int(rng.integers(-ys.min(), h - 1 - ys.max() + 1))
        dx = int(rng.integers(-xs.min(), w - 1 - xs.max() + 1))
        if dy == 0 and dx == 0:
            continue
        dst = np.zeros_like(src)
        dst[ys + dy, xs + dx] = 1
        if np.any(src & dst):
            continue
        if np.abs(host[ys + dy, xs + dx] - host[ys, xs]).mean() < MIN_VISIBLE_DIFF:
            continue
        image = host.copy()
        image[ys + dy, xs + dx] = host[ys, xs]
        return ForgerySample(image=image, mask=dst,
                             meta={"kind": "copy_move", "seed": seed,
                                   "host_seed": host_seed,
                                   "shift": [dy, dx]})
    raise GenerationError("could not place disjoint copy-move regions")


def generate_sample(seed: int, h: int, w: int,
                    kinds: tuple[str, ...] = ("splice", "copy_move"),
                    min_frac: float = DEFAULT_MIN_FRAC,
                    max_frac: float = DEFAULT_MAX_FRAC) -> ForgerySample:
    rng = np.random.default_rng(seed)
    kind = kinds[int(rng.integers(0, len(kinds)))]
    if kind == "splice":
        return generate_splice(seed, h, w, min_frac, max_frac)
    if kind == "copy_move":
        return generate_copy_move(seed, h, w, min_frac, max_frac)
    raise ValueError(f"unknown forgery kind {kind!r}")


def apply_jpeg(img: np.ndarray, quality: int) -> np.ndarray:
    """Round trip through a baseline JPEG codec.

    4:2:0 chroma subsampling below quality 95, 4:4:4 at and above it,
    matching the usual high-quality encoder presets.
    """
    if not 1 <= int(quality) <= 100:
        raise ValueError("JPEG quality must be in [1,100]")
    arr = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    pil = Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8))
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(quality),
             subsampling=0 if quality >= 95 else 2)
    buf.seek(0)
    out = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
    return out


def gaussian_kernel(kernel: int, sigma: float) -> np.ndarray:
    """Normalized 2D Gaussian tap matrix of odd side length `kernel`."""
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError("kernel must be an odd integer >= 3")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    half = kernel // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k1 = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    k2 = np.outer(k1, k1)
    return k2 / k2.sum()


def default_blur_sigma(kernel: int) -> float:
    # kernel-to-sigma rule used by common image toolkits
    return 0.3 * ((kernel - 1) * 0.5 - 1) + 0.8


def apply_gaussian_blur(img: np.ndarray, kernel: int,
                        sigma: float | None = None) -> np.ndarray:
    """2D Gaussian convolution per channel with reflective padding."""
    if sigma is None:
        sigma = default_blur_sigma(kernel)
    k2 = gaussian_kernel(kernel, sigma)
    arr = np.asarray(img, dtype=np.float64)
    out = np.empty_like(arr)
    for c in range(arr.shape[2]):
        out[:, :, c] = ndimage.convolve(arr[:, :, c], k2, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# on-disk dataset layout:
#   <root>/images/<id>.png   8-bit RGB
#   <root>/masks/<id>.png    8-bit grayscale, 0 = authentic, 255 = tampered
#   <root>/manifest.jsonl    one {id, kind, seed, split} record per sample

def write_dataset(root, n_train: int, n_val: int, n_test: int,
                  size: int = 64, seed: int = 0,
                  kinds: tuple[str, ...] = ("splice", "copy_move"),
                  min_frac: float = DEFAULT_MIN_FRAC,
                  max_frac: float = DEFAULT_MAX_FRAC) -> list[dict]:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    index = 0
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        for _ in range(count):
            sample_seed = seed + index
            sample_id = f"{split}_{index:06d}"
            s = generate_sample(sample_seed, size, size, kinds,
                                min_frac, max_frac)
            Image.fromarray((s.image * 255.0 + 0.5).astype(np.uint8)).save(
                root / "images" / f"{sample_id}.png")
            Image.fromarray((s.mask * 255).astype(np.uint8)).save(
                root / "masks" / f"{sample_id}.png")
            records.append({"id": sample_id, "kind": s.meta["kind"],
                            "seed": sample_seed, "split": split})
            index += 1
    with open(root / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return records


def read_manifest(root) -> list[dict]:
    with open(Path(root) / "manifest.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def check_split_hygiene(records: list[dict]) -> None:
    """No id or generator seed may appear in more than one split."""
    by_id: dict[str, str] = {}
    by_seed: dict[int, str] = {}
    for rec in records:
        for key, table in ((rec["id"], by_id), (rec["seed"], by_seed)):
            prev = table.get(key)
            if prev is not None and prev != rec["split"]:
                raise ValueError(
                    f"sample {rec['id']!r} leaks across splits "
                    f"({prev} and {rec['split']})")
            table[key] = rec["split"]


def load_sample(root, sample_id: str) -> tuple[np.ndarray, np.ndarray]:
    root = Path(root)
    img = np.asarray(Image.open(root / "images" / f"{sample_id}.png").convert("RGB"),
                     dtype=np.float32) / 255.0
    mask_png = np.asarray(Image.open(root / "masks" / f"{sample_id}.png").convert("L"))
    return img, (mask_png > 127).astype(np.uint8)


def load_split(root, split: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    """All ids, images (N,H,W,3 float32) and masks (N,H,W uint8) of a split."""
    records = [r for r in read_manifest(root) if r["split"] == split]
    if not records:
        raise ValueError(f"dataset at {root} has no {split!r} split")
    ids, images, masks = [], [], []
    for rec in records:
        img, mask = load_sample(root, rec["id"])
        ids.append(rec["id"])
        images.append(img)
        masks.append(mask)
    return ids, np.stack(images), np.stack(masks)
