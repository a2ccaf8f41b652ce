"""Procedural toy datasets: a 4-class shape set and a two-mode Gaussian mixture.

Everything is generated from a seeded PCG64 stream and versioned by a content
hash, so a (seed, size) pair always reproduces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .schedule import MODEL_DTYPE

IMAGE_SIZE = 32
NUM_CLASSES = 4
CLASS_NAMES = ("rectangle", "disk", "cross", "frame")


def _draw_shape(rng: np.random.Generator, label: int, size: int) -> np.ndarray:
    # low-contrast rendering: the class-discriminative signal is a fraction of
    # the dynamic range, so pixel budgets of a few /255 are meaningful
    bg = rng.uniform(0.25, 0.32)
    img = np.full((size, size), bg, dtype=np.float64)
    cx = rng.integers(size // 2 - 4, size // 2 + 5)
    cy = rng.integers(size // 2 - 4, size // 2 + 5)
    fg = bg + rng.uniform(0.25, 0.40)
    yy, xx = np.mgrid[0:size, 0:size]
    if label == 0:  # filled rectangle
        hw = rng.integers(5, 9)
        hh = rng.integers(5, 9)
        img[max(cy - hh, 0) : cy + hh, max(cx - hw, 0) : cx + hw] = fg
    elif label == 1:  # filled disk
        r = rng.integers(5, 9)
        img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = fg
    elif label == 2:  # cross of two bars
        arm = rng.integers(6, 10)
        th = rng.integers(2, 4)
        img[max(cy - th, 0) : cy + th, max(cx - arm, 0) : cx + arm] = fg
        img[max(cy - arm, 0) : cy + arm, max(cx - th, 0) : cx + th] = fg
    else:  # hollow square frame
        h = rng.integers(6, 10)
        th = rng.integers(2, 4)
        img[max(cy - h, 0) : cy + h, max(cx - h, 0) : cx + h] = fg
        inner = max(h - th, 1)
        img[max(cy - inner, 0) : cy + inner, max(cx - inner, 0) : cx + inner] = bg
    img += rng.normal(0.0, 0.025, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_shape_dataset(seed: int, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Balanced (images, labels): images (N, 1, 32, 32) in [0, 1], labels in [0, 4)."""
    if size <= 0:
        raise ValueError("dataset size must be positive")
    rng = np.random.default_rng(np.random.PCG64(seed))
    labels = np.arange(size) % NUM_CLASSES
    rng.shuffle(labels)
    imgs = np.stack([_draw_shape(rng, int(l), IMAGE_SIZE) for l in labels])
    x = torch.from_numpy(imgs).to(MODEL_DTYPE).unsqueeze(1)
    y = torch.from_numpy(labels.astype(np.int64))
    return x, y


@dataclass(frozen=True)
class MixtureSpec:
    """Two-component Gaussian mixture over flat latents, shaped (1, side, side)."""

    side: int = 4
    separation: float = 3.0
    sigma0: float = 0.2
    seed: int = 1234

    @property
    def dim(self) -> int:
        return self.side * self.side

    def modes(self) -> torch.Tensor:
        rng = np.random.default_rng(np.random.PCG64(self.seed))
        u = rng.normal(size=self.dim)
        u /= np.linalg.norm(u)
        mu = torch.from_numpy(u).to(MODEL_DTYPE).reshape(1, 1, self.side, self.side)
        return torch.cat([0.5 * self.separation * mu, -0.5 * self.separation * mu], dim=0)

    def sample(self, n: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
        gen = torch.Generator().manual_seed(seed)
        comps = torch.randint(0, 2, (n,), generator=gen)
        noise = torch.randn(n, 1, self.side, self.side, generator=gen, dtype=MODEL_DTYPE)
        modes = self.modes()
        return modes[comps] + self.sigma0 * noise, comps


def content_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
        h.update(str(a.shape).encode())
    return h.hexdigest()


def ingest_dataset(seed: int, size: int, out_dir: str | Path) -> dict:
    """Generate (or verify) the shape dataset on disk; returns its manifest.

    Re-ingesting with the same (seed, size) reproduces identical bytes; a
    corrupted store fails the hash check.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x, y = make_shape_dataset(seed, size)
    imgs = x.numpy()
    labels = y.numpy()
    digest = content_hash(imgs, labels)
    manifest = {"seed": seed, "size": size, "image_size": IMAGE_SIZE, "classes": NUM_CLASSES, "sha256": digest}
    img_path = out / "images.npy"
    lbl_path = out / "labels.npy"
    man_path = out / "manifest.json"
    if man_path.exists():
        stored = json.loads(man_path.read_text())
        on_disk = content_hash(np.load(img_path), np.load(lbl_path))
        if stored.get("sha256") != digest or on_disk != digest:
            raise RuntimeError(f"dataset store at {out} does not match seed={seed} size={size}")
        return stored
    np.save(img_path, imgs)
    np.save(lbl_path, labels)
    man_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(store: str | Path) -> tuple[torch.Tensor, torch.Tensor]:
    store = Path(store)
    manifest = json.loads((store / "manifest.json").read_text())
    imgs = np.load(store / "images.npy")
    labels = np.load(store / "labels.npy")
    if content_hash(imgs, labels) != manifest["sha256"]:
        raise RuntimeError(f"dataset store at {store} is corrupted (hash mismatch)")
    return torch.from_numpy(imgs).to(MODEL_DTYPE), torch.from_numpy(labels)


def split_train_test(x: torch.Tensor, y: torch.Tensor, test_fraction: float = 0.25):
    n_test = int(len(x) * test_fraction)
    return (x[n_test:], y[n_test:]), (x[:n_test], y[:n_test])
