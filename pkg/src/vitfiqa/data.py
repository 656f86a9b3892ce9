"""Image ingestion, augmentation, and the synthetic identity dataset.

Only binary PPM (P6) / PGM (P5) with maxval 255 are supported, so ingestion
needs no external codecs. The synthetic generator produces per-identity
low-frequency procedural patterns with a controllable degradation severity;
severity is recorded in the manifest so quality predictions can be checked
against ground truth.
"""

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class ParseError(ValueError):
    """Malformed PPM/PGM input; message carries the byte offset."""


LUMA = np.array([0.299, 0.587, 0.114])


# ---------------------------------------------------------------------------
# PPM / PGM


def parse_ppm(data):
    """Decode binary P6/P5 bytes into an H×W×C (or H×W) uint8 array."""
    if not (data.startswith(b"P6") or data.startswith(b"P5")):
        raise ParseError("bad magic at offset 0: expected b'P6' or b'P5'")
    color = data.startswith(b"P6")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise ParseError(f"truncated header at offset {pos}")
        ch = data[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            start = pos
            while pos < len(data) and data[pos:pos + 1] not in b" \t\r\n#":
                pos += 1
            token = data[start:pos]
            if not token.isdigit():
                raise ParseError(f"non-numeric header token at offset {start}")
            fields.append(int(token))
    if data[pos:pos + 1] not in b" \t\r\n":
        raise ParseError(f"missing whitespace after maxval at offset {pos}")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval} at offset {pos}")
    channels = 3 if color else 1
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise ParseError(f"truncated payload at offset {pos + len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    if color:
        return pixels.reshape(height, width, 3).copy()
    return pixels.reshape(height, width).copy()


def write_ppm(pixels):
    """Encode a uint8 array as canonical binary P6 (H×W×3) or P5 (H×W)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    elif pixels.ndim == 2:
        magic = b"P5"
    else:
        raise ParseError(f"write_ppm: unsupported shape {pixels.shape}")
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes()


def normalize(pixels):
    """Map 8-bit values to [-1, 1]: v/127.5 - 1."""
    return np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0


def denormalize(values):
    """Inverse of normalize, rounded back to 8-bit."""
    return np.clip(np.round((np.asarray(values) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    path: str
    identity: int
    degradation: float | None = None


@dataclass
class Manifest:
    entries: list
    split: str = "train"

    @property
    def num_identities(self):
        return len({e.identity for e in self.entries})


def write_manifest(path, manifest):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["path", "identity", "degradation"])
        for e in manifest.entries:
            w.writerow([e.path, e.identity,
                        "" if e.degradation is None else repr(float(e.degradation))])


def read_manifest(path, split="train"):
    if not os.path.exists(path):
        raise IOError(f"manifest not found: {path}")
    entries = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            deg = row.get("degradation", "")
            entries.append(ManifestEntry(
                path=row["path"], identity=int(row["identity"]),
                degradation=float(deg) if deg not in ("", None) else None))
    ids = sorted({e.identity for e in entries})
    remap = {old: new for new, old in enumerate(ids)}
    for e in entries:
        e.identity = remap[e.identity]
    return Manifest(entries=entries, split=split)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentSpec:
    """Per-augmentation probabilities and parameter ranges.

    Applied in fixed order: affine, padded random crop, cutout, brightness,
    saturation, contrast, grayscale, blur (average or Gaussian, exclusive
    draw), low-resolution simulation. All default probabilities are 0.1.
    """

    affine_prob: float = 0.1
    affine_scale: tuple = (0.9, 1.1)
    affine_rotation: tuple = (-10.0, 10.0)   # degrees
    affine_translate: tuple = (-0.05, 0.05)  # fraction of side length
    crop_prob: float = 0.1
    crop_area: tuple = (0.7, 1.0)
    cutout_prob: float = 0.1
    cutout_holes: int = 2
    cutout_size: tuple = (0.1, 0.3)          # fraction of side length
    brightness_prob: float = 0.1
    brightness_range: tuple = (0.7, 1.3)
    saturation_prob: float = 0.1
    saturation_range: tuple = (0.5, 1.5)
    contrast_prob: float = 0.1
    contrast_range: tuple = (0.7, 1.3)
    grayscale_prob: float = 0.1
    blur_prob: float = 0.1
    blur_sigma: tuple = (0.3, 1.5)
    blur_avg_kernel: int = 3
    lowres_prob: float = 0.1
    lowres_factor: tuple = (0.25, 0.75)

    def __post_init__(self):
        for name in ("affine_prob", "crop_prob", "cutout_prob", "brightness_prob",
                     "saturation_prob", "contrast_prob", "grayscale_prob",
                     "blur_prob", "lowres_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"AugmentSpec: {name} must be in [0, 1]")


def no_augment():
    spec = AugmentSpec()
    for name in list(vars(spec)):
        if name.endswith("_prob"):
            setattr(spec, name, 0.0)
    return spec


def _as_color(img):
    return np.repeat(img[:, :, None], 3, axis=2) if img.ndim == 2 else img


def _affine(img, scale, angle_deg, tx, ty):
    """Bilinear affine about the image center with zero fill."""
    h, w = img.shape[:2]
    theta = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    # output -> input mapping: inverse of scale*rot, then undo center shift
    m = rot.T / scale
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - m @ (center + np.array([ty * h, tx * w]))
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.affine_transform(
            img[:, :, c], m, offset=offset, order=1, mode="constant", cval=0.0)
    return out


def _resize(img, out_h, out_w):
    """Bilinear resize of an H×W×C float image."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    rows = np.linspace(0, h - 1, out_h)
    cols = np.linspace(0, w - 1, out_w)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None, None]
    fc = (cols - c0)[None, :, None]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def augment(pixels, spec, seed):
    """Apply the augmentation chain; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    img = _as_color(np.asarray(pixels, dtype=np.float64))
    h, w = img.shape[:2]

    if rng.random() < spec.affine_prob:
        s = rng.uniform(*spec.affine_scale)
        ang = rng.uniform(*spec.affine_rotation)
        tx = rng.uniform(*spec.affine_translate)
        ty = rng.uniform(*spec.affine_translate)
        img = _affine(img, s, ang, tx, ty)

    if rng.random() < spec.crop_prob:
        area = rng.uniform(*spec.crop_area)
        side_h = max(1, int(round(h * np.sqrt(area))))
        side_w = max(1, int(round(w * np.sqrt(area))))
        top = rng.integers(0, h - side_h + 1)
        left = rng.integers(0, w - side_w + 1)
        crop = np.zeros_like(img)
        crop[:side_h, :side_w] = img[top:top + side_h, left:left + side_w]
        img = _resize(crop[:side_h, :side_w], h, w)

    if rng.random() < spec.cutout_prob:
        for _ in range(spec.cutout_holes):
            ch = max(1, int(round(rng.uniform(*spec.cutout_size) * h)))
            cw = max(1, int(round(rng.uniform(*spec.cutout_size) * w)))
            top = rng.integers(0, max(1, h - ch + 1))
            left = rng.integers(0, max(1, w - cw + 1))
            img[top:top + ch, left:left + cw] = 0.0

    if rng.random() < spec.brightness_prob:
        img = img * rng.uniform(*spec.brightness_range)

    if rng.random() < spec.saturation_prob:
        f = rng.uniform(*spec.saturation_range)
        gray = img @ LUMA
        img = gray[:, :, None] + (img - gray[:, :, None]) * f

    if rng.random() < spec.contrast_prob:
        f = rng.uniform(*spec.contrast_range)
        mean = (img @ LUMA).mean()
        img = mean + (img - mean) * f

    if rng.random() < spec.grayscale_prob:
        img = np.repeat((img @ LUMA)[:, :, None], 3, axis=2)

    if rng.random() < spec.blur_prob:
        if rng.random() < 0.5:
            k = spec.blur_avg_kernel
            img = ndimage.uniform_filter(img, size=(k, k, 1), mode="nearest")
        else:
            sigma = rng.uniform(*spec.blur_sigma)
            img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")

    if rng.random() < spec.lowres_prob:
        f = rng.uniform(*spec.lowres_factor)
        small_h = max(1, int(round(h * f)))
        small_w = max(1, int(round(w * f)))
        img = _resize(_resize(img, small_h, small_w), h, w)

    return np.clip(np.round(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# synthetic dataset


def _prototype(rng, size, waves=6):
    """Low-frequency pattern: sum of random-phase 2-D sinusoids per channel."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    img = np.zeros((size, size, 3))
    for c in range(3):
        acc = np.zeros((size, size))
        for _ in range(waves):
            fy, fx = rng.uniform(0.5, 6.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.5, 1.0)
            acc += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) / size + phase)
        lo, hi = acc.min(), acc.max()
        img[:, :, c] = (acc - lo) / max(hi - lo, 1e-9) * 255.0
    return img


def degrade(img, severity, rng):
    """Blur + down/upscale + noise, each scaled by severity in [0, 1]."""
    out = np.asarray(img, dtype=np.float64)
    if severity > 0:
        sigma = 4.0 * severity
        out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0), mode="nearest")
        factor = 1.0 - 0.875 * severity
        h, w = out.shape[:2]
        small = max(2, int(round(h * factor)))
        out = _resize(_resize(out, small, small), h, w)
        out = out + rng.normal(0.0, 60.0 * severity, size=out.shape)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def synth_generate(out_dir, num_identities, per_identity, size, seed,
                   degradation="uniform"):
    """Generate PPM images plus a manifest for a synthetic identity dataset.

    Each identity has a distinct low-frequency prototype; every sample is the
    prototype plus small jitter, degraded with severity drawn from the
    configured distribution ("uniform" over [0,1] or "none").
    """
    if num_identities < 2 or per_identity < 2:
        raise ValueError("synth_generate: need at least 2 identities and 2 images each")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for ident in range(num_identities):
        proto = _prototype(np.random.default_rng((seed, ident)), size)
        for k in range(per_identity):
            rng = np.random.default_rng((seed, ident, k))
            delta = float(rng.uniform(0, 1)) if degradation == "uniform" else 0.0
            jitter = rng.normal(0.0, 8.0, size=proto.shape)
            base = np.clip(proto + jitter, 0, 255)
            pixels = degrade(base, delta, rng)
            name = f"id{ident:04d}_{k:04d}.ppm"
            path = os.path.join(out_dir, name)
            with open(path, "wb") as f:
                f.write(write_ppm(pixels))
            entries.append(ManifestEntry(path=path, identity=ident, degradation=delta))
    manifest = Manifest(entries=entries)
    write_manifest(os.path.join(out_dir, "manifest.csv"), manifest)
    return manifest


def load_record(entry):
    if not os.path.exists(entry.path):
        raise IOError(f"image not found: {entry.path}")
    with open(entry.path, "rb") as f:
        return parse_ppm(f.read())


def load_batch(entries, spec, seed, split="train", epoch=0):
    """Parse, augment (train split only), and normalize a batch of entries.

    Per-record augmentation seeds derive from (seed, epoch, index) so serial
    and parallel loading agree.
    """
    batch = []
    for index, entry in enumerate(entries):
        pixels = load_record(entry)
        if split == "train" and spec is not None:
            pixels = augment(pixels, spec, seed=(seed, epoch, index, entry.identity))
        batch.append((normalize(_as_color(pixels)), entry.identity))
    return batch
