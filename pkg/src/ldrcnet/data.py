"""Synthetic rain, paired datasets and image file I/O.

Images are float arrays of shape (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

IMAGE_SUFFIXES = (".ppm", ".png")
MAX_DIM = 1 << 15
MANIFEST_NAME = "manifest.tsv"


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RainParams:
    """One rain layer.

    ``angle_deg`` tilts streaks away from vertical; positive angles move the
    lower end of a streak to the right.
    """

    angle_deg: float = 0.0
    length_px: int = 15
    density: float = 0.02
    intensity: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not -45.0 <= self.angle_deg <= 45.0:
            raise ValueError(f"angle_deg {self.angle_deg} outside [-45, 45]")
        if int(self.length_px) < 1:
            raise ValueError("length_px must be >= 1")
        if not 0.0 <= self.density <= 1.0 or not 0.0 <= self.intensity <= 1.0:
            raise ValueError("density and intensity must lie in [0, 1]")


@dataclass(frozen=True)
class RainRanges:
    """Sampling ranges (inclusive) for per-pair rain parameters."""

    angle: Tuple[float, float] = (-30.0, 30.0)
    length: Tuple[int, int] = (9, 21)
    density: Tuple[float, float] = (0.02, 0.02)
    intensity: Tuple[float, float] = (0.6, 1.0)

    def sample(self, rng: np.random.Generator, seed: int) -> RainParams:
        return RainParams(
            angle_deg=float(rng.uniform(*self.angle)),
            length_px=int(rng.integers(self.length[0], self.length[1] + 1)),
            density=float(rng.uniform(*self.density)),
            intensity=float(rng.uniform(*self.intensity)),
            seed=seed,
        )


def line_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Unit-sum line of ``length`` samples, splatted bilinearly onto the grid."""
    size = length if length % 2 else length + 1
    k = np.zeros((size, size))
    centre = (size - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    for t in np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, length):
        r = centre + t * np.cos(theta)
        c = centre + t * np.sin(theta)
        r0, c0 = int(np.floor(r)), int(np.floor(c))
        fr, fc = r - r0, c - c0
        for rr, wr in ((r0, 1 - fr), (r0 + 1, fr)):
            for cc, wc in ((c0, 1 - fc), (c0 + 1, fc)):
                if 0 <= rr < size and 0 <= cc < size:
                    k[rr, cc] += wr * wc
    return k / k.sum()


def render_streaks(h: int, w: int, params: RainParams) -> np.ndarray:
    """Single-channel streak layer in [0, 1]."""
    if h < params.length_px or w < params.length_px:
        raise ValueError(f"{h}x{w} canvas is smaller than streak length {params.length_px}")
    rng = np.random.default_rng(params.seed)
    noise = rng.random((h, w))
    if params.density <= 0.0:
        drops = np.zeros((h, w))
    else:
        drops = (noise > np.quantile(noise, 1.0 - params.density)).astype(np.float64)
    streaks = ndimage.convolve(drops, line_kernel(params.length_px, params.angle_deg), mode="constant")
    return np.clip(streaks * params.intensity, 0.0, 1.0)


def synth_pair(clean: np.ndarray, params: RainParams) -> Tuple[np.ndarray, np.ndarray]:
    """Additive white rain: R = clip(B + S, 0, 1). Returns (rainy, clean)."""
    clean = np.asarray(clean, dtype=np.float64)
    layer = render_streaks(clean.shape[0], clean.shape[1], params)
    return np.clip(clean + layer[..., None], 0.0, 1.0), clean


def synthetic_scene(h: int, w: int, seed: int) -> np.ndarray:
    """Smooth procedural RGB scene: colour gradient plus a few flat shapes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((h, w, 3))
    for c in range(3):
        a, b, base = rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.2, 0.6)
        img[..., c] = base + a * yy + b * xx
    for _ in range(rng.integers(3, 7)):
        colour = rng.uniform(0.05, 0.75, 3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            r = rng.uniform(0.08, 0.25) * min(h, w)
            mask = (yy * max(h, w) - cy) ** 2 + (xx * max(h, w) - cx) ** 2 < r * r
        else:
            hh, ww = rng.uniform(0.1, 0.4) * h, rng.uniform(0.1, 0.4) * w
            mask = (np.abs(yy * max(h, w) - cy) < hh / 2) & (np.abs(xx * max(h, w) - cx) < ww / 2)
        img[mask] = colour
    return to_lattice(np.clip(img, 0.0, 1.0))


def to_lattice(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so that a save/load round trip is exact."""
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255) / 255.0


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _read_token(buf: bytes, pos: int) -> Tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated header")
    return buf[start:pos], pos


def decode_pnm(buf: bytes, expect: bytes = b"P6") -> np.ndarray:
    magic, pos = _read_token(buf, 0)
    if magic != expect:
        raise ImageFormatError(f"expected {expect.decode()} magic, got {magic[:8]!r}")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"malformed header field {tok[:16]!r}")
        fields.append(int(tok))
    w, h, maxval = fields
    if w < 1 or h < 1 or w > MAX_DIM or h > MAX_DIM:
        raise ImageFormatError(f"unsupported dimensions {w}x{h}")
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit images supported, maxval={maxval}")
    pos += 1  # single whitespace byte ends the header
    channels = 3 if expect == b"P6" else 1
    need = w * h * channels
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels) if channels == 3 else np.frombuffer(
        payload, dtype=np.uint8
    ).reshape(h, w)
    return arr.astype(np.float64) / 255.0


def encode_pnm(img: np.ndarray) -> bytes:
    data = _to_bytes(img)
    if data.ndim == 3:
        h, w, _ = data.shape
        magic = b"P6"
    else:
        h, w = data.shape
        magic = b"P5"
    return magic + f"\n{w} {h}\n255\n".encode() + data.tobytes()


def load_image(path) -> np.ndarray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        return decode_pnm(path.read_bytes())
    if suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    raise ImageFormatError(f"unsupported image type {suffix!r}")


def save_image(path, img: np.ndarray) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected an (H, W, 3) image, got {img.shape}")
    if suffix == ".ppm":
        path.write_bytes(encode_pnm(img))
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(_to_bytes(img), "RGB").save(path)
    else:
        raise ImageFormatError(f"unsupported image type {suffix!r}")


def save_gray(path, img: np.ndarray) -> None:
    """8-bit grayscale PGM (P5)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ImageFormatError(f"expected an (H, W) image, got {img.shape}")
    Path(path).write_bytes(encode_pnm(img))


def list_images(directory) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@dataclass
class PairEntry:
    rainy: Path
    clean: Path
    params: Optional[RainParams] = None


class PairedDataset:
    """Pairs of (rainy, clean) image files, usually read from a manifest."""

    def __init__(self, pairs: Sequence[PairEntry]):
        if not pairs:
            raise ValueError("a paired dataset needs at least one pair")
        self.pairs = list(pairs)
        self._cache = None

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def from_manifest(cls, path) -> "PairedDataset":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        root = path.parent
        pairs = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
            rainy, clean, angle, length, density, intensity = parts
            params = RainParams(float(angle), int(length), float(density), float(intensity))
            pairs.append(PairEntry(root / rainy, root / clean, params))
        return cls(pairs)

    def arrays(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Load every pair once; shapes are checked to agree within a pair."""
        if self._cache is None:
            loaded = []
            for entry in self.pairs:
                r = load_image(entry.rainy)
                b = load_image(entry.clean)
                if r.shape != b.shape:
                    raise ValueError(f"pair {entry.rainy.name}: {r.shape} vs {b.shape}")
                loaded.append((r, b))
            self._cache = loaded
        return self._cache


def format_manifest_line(rainy: str, clean: str, p: RainParams) -> str:
    return f"{rainy}\t{clean}\t{p.angle_deg:.4f}\t{p.length_px}\t{p.density:.6f}\t{p.intensity:.6f}"


def make_dataset(clean_dir, out_dir, n: int, ranges: RainRanges = RainRanges(), seed: int = 0) -> PairedDataset:
    """Render ``n`` rainy/clean pairs under ``out_dir`` and write the manifest.

    Pair ``i`` draws its parameters and noise from seed ``seed ^ i``, so the
    output does not depend on generation order.
    """
    sources = list_images(clean_dir)
    if not sources:
        raise ValueError(f"no .ppm/.png images in {clean_dir}")
    out = Path(out_dir)
    (out / "rainy").mkdir(parents=True, exist_ok=True)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    lines = []
    pairs = []
    for i in range(n):
        pair_seed = seed ^ i
        params = ranges.sample(np.random.default_rng([pair_seed, 0]), pair_seed)
        clean = load_image(sources[i % len(sources)])
        rainy, _ = synth_pair(clean, params)
        rainy_rel = f"rainy/{i:04d}.ppm"
        clean_rel = f"clean/{i:04d}.ppm"
        save_image(out / rainy_rel, rainy)
        save_image(out / clean_rel, clean)
        lines.append(format_manifest_line(rainy_rel, clean_rel, params))
        pairs.append(PairEntry(out / rainy_rel, out / clean_rel, params))
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return PairedDataset(pairs)


def to_nchw(images: Sequence[np.ndarray]) -> np.ndarray:
    return np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2), dtype=np.float32)


def from_nchw(batch: np.ndarray) -> List[np.ndarray]:
    return list(np.asarray(batch, dtype=np.float64).transpose(0, 2, 3, 1))


class PatchSampler:
    """Random crops with horizontal flips; batch ``step`` depends only on (seed, step)."""

    def __init__(self, pairs: Sequence[Tuple[np.ndarray, np.ndarray]], patch: int, batch: int, seed: int):
        if patch % 8:
            raise ValueError(f"patch size {patch} must be divisible by 8")
        for r, _ in pairs:
            if min(r.shape[:2]) < patch:
                raise ValueError(f"image {r.shape[:2]} smaller than patch {patch}")
        self.pairs = list(pairs)
        self.patch = patch
        self.batch = batch
        self.seed = seed

    def sample(self, step: int) -> Tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, step])
        rainy, clean = [], []
        for i in rng.integers(0, len(self.pairs), size=self.batch):
            r, b = self.pairs[i]
            h, w = r.shape[:2]
            y = int(rng.integers(0, h - self.patch + 1))
            x = int(rng.integers(0, w - self.patch + 1))
            r = r[y : y + self.patch, x : x + self.patch]
            b = b[y : y + self.patch, x : x + self.patch]
            if rng.random() < 0.5:
                r = r[:, ::-1]
                b = b[:, ::-1]
            rainy.append(r)
            clean.append(b)
        return to_nchw(rainy), to_nchw(clean)
