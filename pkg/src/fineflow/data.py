"""Dataset ingestion, split protocols, and the synthetic texture generator.

Class labels come from directory names sorted lexicographically; all split
protocols are stratified and keyed by seed, so the same inputs always yield
the same partition.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .image import ImageU8, decode_file
from .rng import DOM_KFOLD, DOM_SPLIT, DOM_SYNTH, RngState, stream

IMAGE_EXTENSIONS = (".ppm", ".pgm", ".png")


@dataclass
class Dataset:
    """Labeled samples: file paths or inline images, plus the class map."""

    samples: list[tuple[str | ImageU8, int]]
    class_names: list[str]
    name: str = "dataset"

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.samples], dtype=np.int64)

    def load_image(self, index: int, assume_bgr: bool = False) -> ImageU8:
        source, _ = self.samples[index]
        if isinstance(source, ImageU8):
            return source
        return decode_file(source, assume_bgr=assume_bgr)


@dataclass
class SplitIndices:
    train: list[int]
    validation: list[int]
    test: list[int]

    def part(self, name: str) -> list[int]:
        mapping = {"train": self.train, "val": self.validation, "test": self.test}
        if name not in mapping:
            raise DataError(f"unknown split part {name!r}")
        return mapping[name]


def ingest_directory(root: str, name: str | None = None) -> Dataset:
    """Build a dataset from one subdirectory per class.

    Files are ordered lexicographically within each class; loose files in the
    root and empty class directories are errors.
    """
    if not os.path.isdir(root):
        raise DataError(f"not a directory: {root}")
    entries = sorted(os.listdir(root))
    class_dirs = [e for e in entries if os.path.isdir(os.path.join(root, e))]
    loose = [e for e in entries if not os.path.isdir(os.path.join(root, e))]
    if loose:
        raise DataError(f"loose file outside any class directory: {os.path.join(root, loose[0])}")
    if not class_dirs:
        raise DataError(f"no class directories under {root}")
    samples: list[tuple[str | ImageU8, int]] = []
    for label, cls in enumerate(class_dirs):
        cdir = os.path.join(root, cls)
        files = sorted(
            f for f in os.listdir(cdir) if f.lower().endswith(IMAGE_EXTENSIONS)
        )
        if not files:
            raise DataError(f"class directory has no images: {cdir}")
        for f in files:
            path = os.path.join(cdir, f)
            try:
                with open(path, "rb") as fh:
                    fh.read(1)
            except OSError as exc:
                raise DataError(f"unreadable file: {path} ({exc})") from None
            samples.append((path, label))
    return Dataset(samples, class_dirs, name=name or os.path.basename(os.path.normpath(root)))


def _shuffled(indices: list[int], rng: RngState) -> list[int]:
    """Fisher-Yates driven by the package PRNG (not numpy's)."""
    out = list(indices)
    n = len(out)
    u, _ = rng.uniforms(max(0, n - 1))
    for i in range(n - 1, 0, -1):
        j = int(u[n - 1 - i] * (i + 1))
        out[i], out[j] = out[j], out[i]
    return out


def _part_counts(total: int, ratios: tuple[float, float, float]) -> list[int]:
    """Floor each share, then hand out remainders in train -> val -> test order."""
    counts = [int(total * r) for r in ratios]
    for i in range(total - sum(counts)):
        counts[i % 3] += 1
    return counts


def stratified_split(d: Dataset, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                     seed: int = 1000) -> SplitIndices:
    """Per-class shuffles keyed by (seed, class), split by floor-then-remainder."""
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be non-negative and sum to 1, got {ratios}")
    if any(r == 0 for r in ratios):
        raise DataError("each split part needs a positive ratio")
    labels = d.labels()
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for cls_idx, cls_name in enumerate(d.class_names):
        members = np.flatnonzero(labels == cls_idx).tolist()
        if len(members) < 3:
            raise DataError(f"class {cls_name!r} has {len(members)} samples; need >= 3")
        order = _shuffled(members, stream(seed, DOM_SPLIT, cls_idx))
        n_tr, n_va, _ = _part_counts(len(order), ratios)
        parts[0].extend(order[:n_tr])
        parts[1].extend(order[n_tr : n_tr + n_va])
        parts[2].extend(order[n_tr + n_va :])
    return SplitIndices(sorted(parts[0]), sorted(parts[1]), sorted(parts[2]))


def kfold_split(d: Dataset, k: int, seed: int = 1000) -> list[tuple[list[int], list[int]]]:
    """Stratified k folds; fold i serves as validation, the rest as train."""
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    labels = d.labels()
    fold_members: list[list[int]] = [[] for _ in range(k)]
    for cls_idx, cls_name in enumerate(d.class_names):
        members = np.flatnonzero(labels == cls_idx).tolist()
        if len(members) < k:
            raise DataError(f"class {cls_name!r} has {len(members)} samples; need >= k={k}")
        order = _shuffled(members, stream(seed, DOM_KFOLD, cls_idx))
        q, r = divmod(len(order), k)
        pos = 0
        for i in range(k):
            size = q + (1 if i < r else 0)
            fold_members[i].extend(order[pos : pos + size])
            pos += size
    folds = []
    for i in range(k):
        val = sorted(fold_members[i])
        train = sorted(x for j in range(k) if j != i for x in fold_members[j])
        folds.append((train, val))
    return folds


# ---------------------------------------------------------------------------
# synthetic textures

SYNTH_CLASS_NAMES = ["00_hstripes", "01_vstripes", "02_checker", "03_radial"]


def _texture(cls: int, side: int, style: int) -> np.ndarray:
    """Base grayscale texture for a class; `style` shifts phase/frequency so a
    style-1 dataset makes a distinct task from the style-0 one.
    """
    period = max(4, side // 8) if style == 0 else max(4, (side * 3) // 32)
    phase = 0 if style == 0 else period // 3
    yy, xx = np.mgrid[0:side, 0:side]
    if cls == 0:  # horizontal stripes
        tex = np.where(((yy + phase) * 2 // period) % 2 == 0, 230, 25)
    elif cls == 1:  # vertical stripes
        tex = np.where(((xx + phase) * 2 // period) % 2 == 0, 230, 25)
    elif cls == 2:  # checkerboard
        cell = max(2, period // 2)
        tex = np.where(((xx // cell + yy // cell) % 2) == 0, 230, 25)
    elif cls == 3:  # radial gradient
        cx = cy = (side - 1) / 2.0 if style == 0 else (side - 1) * 0.35
        r = np.hypot(xx - cx, yy - cy)
        tex = 255.0 * (1.0 - r / r.max())
    else:
        raise DataError(f"no texture for class {cls}")
    return tex.astype(np.float64)


def synth_dataset(num_classes: int, per_class: int, side: int = 64,
                  noise: float = 0.1, seed: int = 1000, style: int = 0,
                  name: str = "synthetic") -> Dataset:
    """Procedural texture dataset; bit-identical for identical arguments.

    Noise is additive uniform in [-noise*255, +noise*255] per pixel, drawn
    from a stream keyed by (seed, class, sample); at noise 0 every sample of
    a class is the same image.
    """
    if num_classes not in (2, 4):
        raise DataError(f"num_classes must be 2 or 4, got {num_classes}")
    if side < 16:
        raise DataError(f"side must be >= 16, got {side}")
    if per_class < 10:
        raise DataError(f"per_class must be >= 10, got {per_class}")
    if not 0.0 <= noise < 1.0:
        raise DataError(f"noise must be in [0, 1), got {noise}")
    samples: list[tuple[str | ImageU8, int]] = []
    amplitude = noise * 255.0
    for cls in range(num_classes):
        base = _texture(cls, side, style)
        for i in range(per_class):
            plane = base
            if amplitude > 0.0:
                u, _ = stream(seed, DOM_SYNTH, cls, i).uniforms(side * side)
                plane = base + (u.reshape(side, side) * 2.0 - 1.0) * amplitude
            gray = np.clip(np.floor(plane + 0.5), 0.0, 255.0).astype(np.uint8)
            rgb = np.repeat(gray[:, :, None], 3, axis=2)
            samples.append((ImageU8(side, side, 3, "RGB", rgb), cls))
    return Dataset(samples, SYNTH_CLASS_NAMES[:num_classes], name=name)


# ---------------------------------------------------------------------------
# manifest and split files (CSV, UTF-8, LF endings)


def write_manifest(d: Dataset, path: str) -> None:
    lines = ["path,label,class_name"]
    for source, label in d.samples:
        if isinstance(source, ImageU8):
            raise DataError("cannot write a manifest for inline images; save them first")
        lines.append(f"{source},{label},{d.class_names[label]}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path: str, name: str | None = None) -> Dataset:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln]
    if not lines or lines[0] != "path,label,class_name":
        raise DataError(f"bad manifest header in {path}")
    samples: list[tuple[str | ImageU8, int]] = []
    class_names: dict[int, str] = {}
    for ln in lines[1:]:
        p, lab, cls = ln.rsplit(",", 2)
        label = int(lab)
        samples.append((p, label))
        class_names.setdefault(label, cls)
    names = [class_names[i] for i in sorted(class_names)]
    if sorted(names) != names or len(names) != len(set(names)):
        raise DataError(f"manifest class names out of order in {path}")
    return Dataset(samples, names, name=name or os.path.basename(path))


def write_split(s: SplitIndices, path: str) -> None:
    lines = ["index,part"]
    pairs = [(i, "train") for i in s.train]
    pairs += [(i, "val") for i in s.validation]
    pairs += [(i, "test") for i in s.test]
    for idx, part in sorted(pairs):
        lines.append(f"{idx},{part}")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_split(path: str) -> SplitIndices:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln]
    if not lines or lines[0] != "index,part":
        raise DataError(f"bad split header in {path}")
    out = SplitIndices([], [], [])
    for ln in lines[1:]:
        idx, part = ln.split(",")
        out.part(part).append(int(idx))
    return out
