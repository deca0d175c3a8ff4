"""Synthetic datasets with controlled sensitive/target structure, plus oracles.

The shapes dataset is a desk-scale stand-in for digits over distracting
backgrounds: each 16x16 image carries a gray outlined background shape
(square or circle -- the sensitive label) and one of several bright glyphs
at a jittered position (the target label). Both labels are perfectly
balanced and independent of each other by construction.

The Gaussian pair dataset is a 1-D two-component location mixture whose
mutual information with the class label has a cheap quadrature oracle,
used to validate the neighbor-distance estimators.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

__all__ = [
    "ShapesSpec",
    "GaussianPairSpec",
    "Dataset",
    "gen_shapes",
    "gen_gaussian_pair",
    "inject_label_noise",
    "gaussian_pair_mi",
    "save_dataset_csv",
    "load_dataset_csv",
]

BACKGROUND_LEVEL = 0.4
GLYPH_LEVEL = 1.0
TRAIN_FRACTION = 0.8

# 5x5 glyph bitmaps: plus, diagonal cross, horizontal bars, hollow box
_GLYPHS = np.array(
    [
        [[0, 0, 1, 0, 0], [0, 0, 1, 0, 0], [1, 1, 1, 1, 1], [0, 0, 1, 0, 0], [0, 0, 1, 0, 0]],
        [[1, 0, 0, 0, 1], [0, 1, 0, 1, 0], [0, 0, 1, 0, 0], [0, 1, 0, 1, 0], [1, 0, 0, 0, 1]],
        [[1, 1, 1, 1, 1], [0, 0, 0, 0, 0], [1, 1, 1, 1, 1], [0, 0, 0, 0, 0], [1, 1, 1, 1, 1]],
        [[1, 1, 1, 1, 1], [1, 0, 0, 0, 1], [1, 0, 0, 0, 1], [1, 0, 0, 0, 1], [1, 1, 1, 1, 1]],
    ],
    dtype=bool,
)


@dataclass(frozen=True)
class ShapesSpec:
    image_side: int = 16
    n_samples: int = 8000
    glyph_classes: int = 4
    noise_std: float = 0.2
    jitter: int = 2
    background_jitter: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_samples % (2 * self.glyph_classes) != 0:
            raise ValueError("n_samples must divide evenly over backgrounds x glyphs")
        if not 1 <= self.glyph_classes <= len(_GLYPHS):
            raise ValueError(f"glyph_classes must be in [1, {len(_GLYPHS)}]")
        if self.image_side < 2 * self.jitter + 5 + 4:
            raise ValueError("image too small for glyph jitter range")
        if self.background_jitter < 0 or self.background_jitter > 2:
            raise ValueError("background_jitter must be in [0, 2]")


@dataclass(frozen=True)
class GaussianPairSpec:
    delta: float
    sigma: float = 1.0
    n_per_class: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.n_per_class < 100:
            raise ValueError("n_per_class must be >= 100")


@dataclass
class Dataset:
    """Flattened samples with sensitive labels s in {-1,+1}, target classes
    and a train/test split that is stratified over (s, target)."""

    x: np.ndarray
    s: np.ndarray
    target: np.ndarray
    is_train: np.ndarray

    def __post_init__(self):
        n = self.x.shape[0]
        if not (self.s.shape == (n,) and self.target.shape == (n,) and self.is_train.shape == (n,)):
            raise ValueError("field lengths disagree")

    @property
    def n_classes(self) -> int:
        return int(self.target.max()) + 1

    @property
    def train_x(self):
        return self.x[self.is_train]

    @property
    def train_s(self):
        return self.s[self.is_train]

    @property
    def train_target(self):
        return self.target[self.is_train]

    @property
    def test_x(self):
        return self.x[~self.is_train]

    @property
    def test_s(self):
        return self.s[~self.is_train]

    @property
    def test_target(self):
        return self.target[~self.is_train]

    def copy(self) -> "Dataset":
        return Dataset(self.x.copy(), self.s.copy(), self.target.copy(), self.is_train.copy())


def _background_masks(side: int) -> dict[int, np.ndarray]:
    # square: one-pixel outline inset by 3; circle: ring of matching radius;
    # the one-pixel margin beyond the jitter range keeps shifted outlines inside
    square = np.zeros((side, side), dtype=bool)
    square[3, 3:side - 3] = True
    square[side - 4, 3:side - 3] = True
    square[3:side - 3, 3] = True
    square[3:side - 3, side - 4] = True

    center = (side - 1) / 2.0
    radius = (side - 7) / 2.0
    rr, cc = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    dist = np.hypot(rr - center, cc - center)
    circle = np.abs(dist - radius) <= 0.5
    return {-1: square, 1: circle}


def _stratified_split(s: np.ndarray, target: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    is_train = np.zeros(s.size, dtype=bool)
    for lab in (-1, 1):
        for cls in np.unique(target):
            cell = np.flatnonzero((s == lab) & (target == cls))
            cell = cell[rng.permutation(cell.size)]
            n_train = int(round(TRAIN_FRACTION * cell.size))
            is_train[cell[:n_train]] = True
    return is_train


def gen_shapes(spec: ShapesSpec) -> Dataset:
    """Render the background-shape / glyph dataset described above."""
    rng = np.random.default_rng(spec.seed)
    side = spec.image_side
    masks = _background_masks(side)
    n = spec.n_samples
    per_cell = n // (2 * spec.glyph_classes)

    s = np.repeat([-1, 1], n // 2)
    target = np.tile(np.repeat(np.arange(spec.glyph_classes), per_cell), 2)
    order = rng.permutation(n)
    s, target = s[order], target[order]

    images = np.zeros((n, side, side))
    top_center = (side - 5) // 2
    bj = spec.background_jitter
    for i in range(n):
        img = images[i]
        br, bc = rng.integers(-bj, bj + 1, size=2) if bj else (0, 0)
        img[np.roll(np.roll(masks[s[i]], br, axis=0), bc, axis=1)] = BACKGROUND_LEVEL
        dr, dc = rng.integers(-spec.jitter, spec.jitter + 1, size=2)
        r0, c0 = top_center + dr, top_center + dc
        patch = img[r0:r0 + 5, c0:c0 + 5]
        patch[_GLYPHS[target[i]]] = GLYPH_LEVEL
    images += rng.normal(0.0, spec.noise_std, size=images.shape)
    np.clip(images, 0.0, 1.0, out=images)

    is_train = _stratified_split(s, target, rng)
    return Dataset(images.reshape(n, side * side), s, target, is_train)


def gen_gaussian_pair(spec: GaussianPairSpec) -> Dataset:
    """1-D mixture: class -1 ~ N(0, sigma^2), class +1 ~ N(delta, sigma^2)."""
    rng = np.random.default_rng(spec.seed)
    n = 2 * spec.n_per_class
    s = np.repeat([-1, 1], spec.n_per_class)
    x = rng.normal(0.0, spec.sigma, size=n)
    x[s == 1] += spec.delta
    order = rng.permutation(n)
    s, x = s[order], x[order]
    target = (s > 0).astype(np.int64)
    is_train = _stratified_split(s, target, rng)
    return Dataset(x.reshape(-1, 1), s, target, is_train)


def inject_label_noise(dataset: Dataset, ratio: float, seed: int) -> Dataset:
    """Replace a fraction of *training* targets with uniform random classes.

    Test targets are never touched. Replacement is uniform over all classes,
    so a replaced label may coincide with the true one.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    out = dataset.copy()
    rng = np.random.default_rng(seed)
    train_idx = np.flatnonzero(out.is_train)
    n_noisy = int(round(ratio * train_idx.size))
    chosen = rng.choice(train_idx, size=n_noisy, replace=False)
    out.target[chosen] = rng.integers(0, dataset.n_classes, size=n_noisy)
    return out


def gaussian_pair_mi(delta: float, sigma: float = 1.0) -> float:
    """I(X;S) in nats for the balanced two-component mixture, by quadrature."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")

    def log_pdf(x, mean):
        return -0.5 * ((x - mean) / sigma) ** 2 - np.log(sigma * np.sqrt(2 * np.pi))

    def integrand(x):
        l0 = log_pdf(x, 0.0)
        l1 = log_pdf(x, delta)
        # log(p(x|s) / p(x)) = log 2 - log1p(exp(l_other - l_self)), stable in tails
        t0 = np.log(2.0) - np.log1p(np.exp(l1 - l0))
        t1 = np.log(2.0) - np.log1p(np.exp(l0 - l1))
        return 0.5 * (np.exp(l0) * t0 + np.exp(l1) * t1)

    lo = min(0.0, delta) - 12 * sigma
    hi = max(0.0, delta) + 12 * sigma
    mid = delta / 2.0
    left, _ = quad(integrand, lo, mid, limit=200)
    right, _ = quad(integrand, mid, hi, limit=200)
    return left + right


# --- CSV interchange ---------------------------------------------------------
# header: target,s,p0,...,pK ; s in {-1,1}; floats with 9 significant digits


def _write_split(path, x, s, target):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target", "s"] + [f"p{i}" for i in range(x.shape[1])])
        for i in range(x.shape[0]):
            writer.writerow([int(target[i]), int(s[i])] + [f"{v:.9g}" for v in x[i]])


def save_dataset_csv(dataset: Dataset, train_path, test_path):
    _write_split(train_path, dataset.train_x, dataset.train_s, dataset.train_target)
    _write_split(test_path, dataset.test_x, dataset.test_s, dataset.test_target)


def _read_split(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["target", "s"]:
            raise ValueError(f"{path}: expected header starting with target,s")
        rows = list(reader)
    target = np.array([int(r[0]) for r in rows])
    s = np.array([int(r[1]) for r in rows])
    x = np.array([[float(v) for v in r[2:]] for r in rows])
    return x, s, target


def load_dataset_csv(train_path, test_path) -> Dataset:
    """Load a train/test CSV pair (the hook for user-supplied datasets)."""
    xtr, str_, ttr = _read_split(train_path)
    xte, ste, tte = _read_split(test_path)
    if xtr.shape[1] != xte.shape[1]:
        raise ValueError("train and test feature widths disagree")
    x = np.concatenate([xtr, xte])
    s = np.concatenate([str_, ste])
    target = np.concatenate([ttr, tte])
    is_train = np.concatenate([np.ones(xtr.shape[0], bool), np.zeros(xte.shape[0], bool)])
    return Dataset(x, s, target, is_train)
