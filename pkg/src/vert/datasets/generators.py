"""Signal-distractor datasets with stored ground truth.

Every sample satisfies ``x = s * m + d * (1 - m)`` exactly, with the mask
``m`` and distractor ``d`` drawn independently of the label.  Each sample is
generated from its own RNG stream keyed by (seed, index), so results do not
depend on generation order.
"""
from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, UsageError
from . import glyphs


@dataclass
class DatasetConfig:
    kind: str = "hard-digit"           # "hard-digit" | "spurious-patch"
    image_size: int = 24
    channels: int = 3
    num_classes: int = 4
    signal_size: tuple[int, int] = (8, 8)   # min/max side of the signal sub-patch
    signal_stride: int = 4                  # placement grid for the sub-patch
    signal_keepout: int = 8                 # top-left block never touched by the signal
    noise_std: float = 0.04                 # per-pixel distractor noise
    n_decoys: int = 2
    decoy_size: int = 4
    n_noise_patches: int = 2
    noise_patch_size: int = 3
    patch_size: int = 4
    patch_amplitude: float | None = None    # None -> 5 * noise_std
    patch_stride: int | None = None         # None -> patch_size
    patch_band: int | None = None           # rows eligible for the patch; None -> patch_size (top row)
    correlated: bool = True
    target_class: int = 0
    seed: int = 0

    @classmethod
    def spurious(cls, **kw) -> "DatasetConfig":
        base = dict(kind="spurious-patch", image_size=32, channels=1, num_classes=2,
                    noise_std=0.03, n_decoys=0, n_noise_patches=0, signal_keepout=0)
        base.update(kw)
        return cls(**base)

    def amplitude(self) -> float:
        return 5.0 * self.noise_std if self.patch_amplitude is None else float(self.patch_amplitude)

    def validate(self):
        if self.kind not in ("hard-digit", "spurious-patch"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.image_size < 2 or self.channels < 1 or self.num_classes < 2:
            raise ConfigError("image_size >= 2, channels >= 1 and num_classes >= 2 required")
        lo, hi = self.signal_size
        if self.kind == "hard-digit":
            if not 1 <= lo <= hi:
                raise ConfigError(f"bad signal size range {self.signal_size}")
            if hi >= self.image_size:
                raise ConfigError("signal region must be strictly smaller than the image")
            if not _signal_positions(self, hi).size:
                raise ConfigError(f"signal_keepout {self.signal_keepout} leaves no placement")
        else:
            if self.patch_size >= self.image_size or self.patch_size < 1:
                raise ConfigError("patch must be nonempty and strictly smaller than the image")
            if not 0 <= self.target_class < self.num_classes:
                raise ConfigError(f"target_class {self.target_class} out of range")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["signal_size"] = list(self.signal_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "signal_size" in d:
            d["signal_size"] = tuple(d["signal_size"])
        return cls(**d)


@dataclass
class SignalDistractorSample:
    x: np.ndarray
    y: int
    s: np.ndarray
    d: np.ndarray
    m_dataset: np.ndarray


@dataclass
class Dataset:
    """Batched signal-distractor samples. Arrays are (N, C, H, W) / (N, H, W)."""

    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    d: np.ndarray
    m: np.ndarray
    config: DatasetConfig
    ids: np.ndarray
    patch_pos: np.ndarray | None = None
    patched_classes: frozenset = field(default_factory=frozenset)

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> SignalDistractorSample:
        return SignalDistractorSample(self.x[i], int(self.y[i]), self.s[i], self.d[i], self.m[i])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return dataclasses.replace(
            self, x=self.x[idx], y=self.y[idx], s=self.s[idx], d=self.d[idx], m=self.m[idx],
            ids=self.ids[idx], patch_pos=None if self.patch_pos is None else self.patch_pos[idx])

    def split(self, train_frac: float = 0.8, seed: int = 12345) -> tuple["Dataset", "Dataset"]:
        perm = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(train_frac * len(self)))
        return self.subset(np.sort(perm[:cut])), self.subset(np.sort(perm[cut:]))

    def reconstruction_error(self) -> float:
        m = self.m[:, None].astype(np.float64)
        return float(np.abs(self.s * m + self.d * (1.0 - m) - self.x).max(initial=0.0))


def _sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), int(stream)])


# -- hard-digit ----------------------------------------------------------------

def _signal_positions(cfg: DatasetConfig, size: int) -> np.ndarray:
    """Top-left corners on the placement grid that avoid the keep-out block."""
    rows = np.arange(0, cfg.image_size - size + 1, max(1, cfg.signal_stride))
    grid = np.stack(np.meshgrid(rows, rows, indexing="ij"), -1).reshape(-1, 2)
    k = cfg.signal_keepout
    return grid[(grid[:, 0] >= k) | (grid[:, 1] >= k)]


def _hard_digit_sample(cfg: DatasetConfig, i: int):
    rng = _sample_rng(cfg.seed, i)
    n, c = cfg.image_size, cfg.channels
    y = int(rng.integers(cfg.num_classes))
    # distractor: colored background, pixel noise, decoy glyphs, noise patches
    bg = rng.uniform(0.2, 0.8, size=c)
    d = bg[:, None, None] + cfg.noise_std * rng.normal(size=(c, n, n))
    for _ in range(cfg.n_decoys):
        k = cfg.decoy_size
        g = glyphs.render(int(rng.integers(glyphs.NUM_GLYPHS)), k)
        col = rng.uniform(0.0, 1.0, size=c)
        r0, c0 = rng.integers(0, n - k + 1, size=2)
        region = d[:, r0:r0 + k, c0:c0 + k]
        d[:, r0:r0 + k, c0:c0 + k] = np.where(g > 0, col[:, None, None], region)
    for _ in range(cfg.n_noise_patches):
        k = cfg.noise_patch_size
        r0, c0 = rng.integers(0, n - k + 1, size=2)
        d[:, r0:r0 + k, c0:c0 + k] = rng.uniform(0.0, 1.0, size=(c, k, k))
    # signal: class glyph in a random bright color on a black sub-patch
    lo, hi = cfg.signal_size
    size = int(rng.integers(lo, hi + 1))
    r0, c0 = (int(v) for v in rng.choice(_signal_positions(cfg, size)))
    g = glyphs.render(y, size)
    col = rng.uniform(0.6, 1.0, size=c)
    s = np.zeros((c, n, n))
    s[:, r0:r0 + size, c0:c0 + size] = g[None] * col[:, None, None]
    s[:, r0:r0 + size, c0:c0 + size] += cfg.noise_std * rng.normal(size=(c, size, size))
    m = np.zeros((n, n), dtype=np.uint8)
    m[r0:r0 + size, c0:c0 + size] = 1
    return y, s, d, m


# -- spurious-patch --------------------------------------------------------------

def _smooth_field(low: np.ndarray, n: int) -> np.ndarray:
    """Bilinear upsampling of a coarse grid to (n, n)."""
    k = low.shape[0]
    src = np.linspace(0.0, 1.0, k)
    dst = np.linspace(0.0, 1.0, n)
    rows = np.stack([np.interp(dst, src, r) for r in low])
    return np.stack([np.interp(dst, src, col) for col in rows.T], axis=1)


def _texture(cfg: DatasetConfig, rng: np.random.Generator) -> np.ndarray:
    """Smooth radiograph-like texture: two dark lobes on a bright field, plus noise."""
    n, c = cfg.image_size, cfg.channels
    yy, xx = np.meshgrid(np.linspace(-1, 1, n), np.linspace(-1, 1, n), indexing="ij")
    img = 0.65 + 0.1 * rng.normal()
    for side in (-1.0, 1.0):
        cx = side * rng.uniform(0.35, 0.55)
        cy = rng.uniform(-0.1, 0.25)
        sx, sy = rng.uniform(0.18, 0.3), rng.uniform(0.35, 0.55)
        img -= rng.uniform(0.2, 0.35) * np.exp(-((xx - cx) ** 2 / (2 * sx ** 2) + (yy - cy) ** 2 / (2 * sy ** 2)))
    img += 0.05 * _smooth_field(rng.normal(size=(5, 5)), n)
    return img[None].repeat(c, axis=0) + cfg.noise_std * rng.normal(size=(c, n, n))


def _patch_pattern(cfg: DatasetConfig) -> np.ndarray:
    """Fixed +-1 pattern with (near) zero sum in every row of every channel, so
    a flat fill over whole rows does not correlate with it."""
    rng = np.random.default_rng([int(cfg.seed), 7919])
    p = cfg.patch_size
    base = np.where(np.arange(p) < p // 2, 1.0, -1.0)
    return np.stack([np.stack([rng.permutation(base) for _ in range(p)]) for _ in range(cfg.channels)])


def _patch_positions(cfg: DatasetConfig, ids: np.ndarray) -> np.ndarray:
    p = cfg.patch_size
    stride = cfg.patch_stride or p
    band = cfg.patch_band or p
    rows = np.arange(0, max(band - p, 0) + 1, stride)
    cols = np.arange(0, cfg.image_size - p + 1, stride)
    out = np.zeros((len(ids), 2), dtype=np.int64)
    for j, i in enumerate(ids):
        rng = _sample_rng(cfg.seed, int(i), stream=1)
        out[j] = (rng.choice(rows), rng.choice(cols))
    return out


def generate(config: DatasetConfig, n: int) -> Dataset:
    """Generate ``n`` samples. Spurious-patch sets come back already patched
    when ``config.correlated`` is true."""
    config.validate()
    if n < 1:
        raise ConfigError("n must be >= 1")
    ids = np.arange(n)
    if config.kind == "hard-digit":
        ys, ss, ds, ms = zip(*(_hard_digit_sample(config, int(i)) for i in ids))
        s, d, m = np.stack(ss), np.stack(ds), np.stack(ms)
        mf = m[:, None].astype(np.float64)
        return Dataset(x=s * mf + d * (1.0 - mf), y=np.array(ys, dtype=np.int64), s=s, d=d, m=m,
                       config=config, ids=ids)
    ys = np.empty(n, dtype=np.int64)
    d = np.empty((n, config.channels, config.image_size, config.image_size))
    for i in ids:
        rng = _sample_rng(config.seed, int(i))
        ys[i] = int(rng.integers(config.num_classes))
        d[i] = _texture(config, rng)
    ds = Dataset(x=d.copy(), y=ys, s=np.zeros_like(d), d=d, m=np.zeros((n,) + d.shape[2:], dtype=np.uint8),
                 config=config, ids=ids, patch_pos=_patch_positions(config, ids))
    if config.correlated:
        ds = inject_spurious_patch(ds, config.target_class)
    return ds


def _apply_patches(ds: Dataset, classes: frozenset) -> Dataset:
    cfg = ds.config
    p = cfg.patch_size
    pattern = _patch_pattern(cfg)
    amp = cfg.amplitude()
    x, s = ds.d.copy(), np.zeros_like(ds.d)
    m = np.zeros_like(ds.m)
    for j in range(len(ds)):
        if int(ds.y[j]) not in classes:
            continue
        r0, c0 = ds.patch_pos[j]
        # additive: local brightness is unchanged, only the fixed pattern is new
        s[j, :, r0:r0 + p, c0:c0 + p] = ds.d[j, :, r0:r0 + p, c0:c0 + p] + amp * pattern
        m[j, r0:r0 + p, c0:c0 + p] = 1
        x[j, :, r0:r0 + p, c0:c0 + p] = s[j, :, r0:r0 + p, c0:c0 + p]
    return dataclasses.replace(ds, x=x, s=s, m=m, patched_classes=frozenset(classes))


def inject_spurious_patch(ds: Dataset, target_class: int, amplitude: float | None = None,
                          size: int | None = None) -> Dataset:
    """Stamp the noise patch on every ``target_class`` sample; their ground
    truth becomes the patch region, other samples keep an empty mask."""
    cfg = ds.config
    if amplitude is not None or size is not None:
        cfg = dataclasses.replace(cfg, patch_amplitude=amplitude if amplitude is not None else cfg.patch_amplitude,
                                  patch_size=size if size is not None else cfg.patch_size)
    if not 0 <= target_class < cfg.num_classes:
        raise UsageError(f"target_class {target_class} out of range")
    if cfg.patch_size >= min(ds.x.shape[2:]):
        raise UsageError("patch does not fit the image")
    if cfg.amplitude() == 0.0:
        warnings.warn("patch amplitude is 0: the spurious signal vanishes", stacklevel=2)
    cfg = dataclasses.replace(cfg, target_class=target_class)
    base = dataclasses.replace(ds, config=cfg, patch_pos=_patch_positions(cfg, ds.ids))
    return _apply_patches(base, frozenset({target_class}))


def flip_correlation(ds: Dataset) -> Dataset:
    """Move the patch onto the complementary class(es); labels are unchanged."""
    if not ds.patched_classes:
        raise UsageError("flip_correlation needs a patched dataset")
    others = frozenset(range(ds.num_classes)) - ds.patched_classes
    return _apply_patches(ds, others)


def dataset_moments(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std over all pixels, merged chunk by chunk."""
    x = x.x if isinstance(x, Dataset) else np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise UsageError("empty dataset")
    c = x.shape[1]
    count = 0
    mu = np.zeros(c)
    m2 = np.zeros(c)
    for i in range(0, len(x), 256):
        chunk = np.moveaxis(x[i:i + 256], 1, 0).reshape(c, -1)
        nb = chunk.shape[1]
        mb = chunk.mean(axis=1)
        m2b = ((chunk - mb[:, None]) ** 2).sum(axis=1)
        delta = mb - mu
        tot = count + nb
        mu = mu + delta * nb / tot
        m2 = m2 + m2b + delta ** 2 * count * nb / tot
        count = tot
    return mu, np.sqrt(m2 / count)
