"""K-Means segmentation of the cirrus band into contamination classes.

Each pixel becomes a (value, row, col) feature.  Features are clustered with
Lloyd's algorithm from a seeded k-means++ start and the clusters are
renamed by ascending centroid intensity to none / scattered / dense.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

NONE, SCATTERED, DENSE = 0, 1, 2
CLASS_NAMES = ("none", "scattered", "dense")
ENCODING = np.array([0.0, 0.5, 1.0])
PGM_LEVELS = np.array([0, 128, 255], dtype=np.uint8)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


@dataclass
class SegmentedCirrus:
    labels: np.ndarray  # (H, W) in {0, 1, 2}
    centroids: np.ndarray  # (3, 3) ordered none, scattered, dense
    degenerate: bool = False


@dataclass(frozen=True)
class RegressionFit:
    slope: float
    intercept: float
    n: int


def build_features(band, normalize=False) -> np.ndarray:
    """Row-major (value, row, col) triples, one per pixel.

    ``normalize`` rescales every column to zero mean / unit sd; off by
    default so the raw intensity dominates the distance.
    """
    band = np.asarray(band, dtype=np.float64)
    h, w = band.shape
    rows, cols = np.mgrid[0:h, 0:w]
    feats = np.column_stack([band.ravel(), rows.ravel(), cols.ravel()]).astype(np.float64)
    if normalize:
        sd = feats.std(axis=0)
        sd[sd == 0] = 1.0
        feats = (feats - feats.mean(axis=0)) / sd
    return feats


def _sq_dist(x, c):
    d = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", d, d)


def kmeans_pp_init(x, k, rng) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dist(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dist(x, x[idx][None])[:, 0])
    return np.array(centers)


def kmeans(features, k=3, seed=0, max_iter=100, tol=1e-6, init=None) -> KMeansResult:
    """Lloyd's algorithm.

    ``inertia_history[i]`` is the within-cluster sum of squares after the
    i-th assignment step.  Stops once no centroid moves more than ``tol``
    (Euclidean).  A cluster left empty is re-seeded at the point farthest
    from its assigned centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {x.shape}")
    if len(x) < k:
        raise ValueError(f"need at least k={k} points, got {len(x)}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(x, k, rng) if init is None else np.array(init, dtype=np.float64)
    history = []
    for it in range(1, max_iter + 1):
        d = _sq_dist(x, centroids)
        labels = d.argmin(axis=1)
        point_cost = d[np.arange(len(x)), labels]
        history.append(float(point_cost.sum()))
        new = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                far = int(point_cost.argmax())
                new[j] = x[far]
                point_cost[far] = 0.0
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    d = _sq_dist(x, centroids)
    labels = d.argmin(axis=1)
    history.append(float(d[np.arange(len(x)), labels].sum()))
    return KMeansResult(centroids, labels, history, it)


def order_clusters(centroids) -> np.ndarray:
    """Map raw cluster index -> class index by ascending intensity
    (feature column 0).  Ties keep original index order."""
    centroids = np.asarray(centroids)
    order = np.argsort(centroids[:, 0], kind="stable")
    mapping = np.empty(len(order), dtype=int)
    mapping[order] = np.arange(len(order))
    return mapping


def segment_cirrus(band, seed=0, normalize=False, max_iter=100, tol=1e-6) -> SegmentedCirrus:
    band = np.asarray(band, dtype=np.float64)
    if band.max() == band.min():
        log.warning("constant cirrus band (value %g); labelling every pixel 'none'", band.flat[0])
        c = np.array([[band.flat[0], (band.shape[0] - 1) / 2, (band.shape[1] - 1) / 2]] * 3)
        return SegmentedCirrus(np.zeros(band.shape, dtype=np.uint8), c, degenerate=True)
    feats = build_features(band, normalize)
    res = kmeans(feats, 3, seed, max_iter, tol)
    centroids = res.centroids
    if normalize:
        # rank clusters by their mean raw intensity
        centroids = np.array([[band.ravel()[res.labels == j].mean() if (res.labels == j).any()
                               else -np.inf, *res.centroids[j, 1:]] for j in range(3)])
    mapping = order_clusters(centroids)
    labels = mapping[res.labels].reshape(band.shape).astype(np.uint8)
    ordered = np.empty_like(centroids)
    ordered[mapping] = centroids
    return SegmentedCirrus(labels, ordered)


def image_seed(seed: int, index: int) -> int:
    """Per-image seed derived from a global seed and the image index."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def segment_dataset(dataset, cirrus_band="B9", seed=0) -> list[SegmentedCirrus]:
    return [segment_cirrus(p.band(cirrus_band), image_seed(seed, i))
            for i, p in enumerate(dataset.patches)]


def encode_channel(seg: SegmentedCirrus) -> np.ndarray:
    return ENCODING[seg.labels]


def contamination_counts(seg: SegmentedCirrus) -> tuple[int, int, int]:
    """(n_dense, n_scattered, n_none)."""
    counts = np.bincount(seg.labels.ravel(), minlength=3)
    return int(counts[DENSE]), int(counts[SCATTERED]), int(counts[NONE])


def fire_vs_cirrus_table(dataset, segs) -> list[tuple[int, int, int, int]]:
    """Rows of (fire_pixel_count, n_dense, n_scattered, n_none), one per image."""
    if len(dataset) != len(segs):
        raise ValueError(f"{len(dataset)} images but {len(segs)} segmentations")
    return [(int(p.mask.sum()), *contamination_counts(s)) for p, s in zip(dataset.patches, segs)]


def write_table_csv(rows, path) -> None:
    lines = ["image_index,fire_pixels,dense,scattered,none"]
    lines += [f"{i},{f},{d},{s},{n}" for i, (f, d, s, n) in enumerate(rows)]
    Path(path).write_text("\n".join(lines) + "\n")


def linear_fit(x, y) -> RegressionFit:
    """Ordinary least squares y = slope * x + intercept."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("x and y lengths differ")
    n = x.size
    if n < 2:
        raise ValueError("linear fit needs at least 2 points")
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise ValueError("x has zero variance")
    slope = float(dx @ (y - y.mean())) / sxx
    return RegressionFit(slope, float(y.mean() - slope * x.mean()), n)


def write_pgm(labels, path) -> None:
    """8-bit binary PGM with classes none/scattered/dense at 0/128/255."""
    img = PGM_LEVELS[np.asarray(labels)]
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def plot_fire_vs_cirrus(rows, out_dir) -> list[Path]:
    """One SVG scatter per contamination class with its OLS line overlaid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "firescope"
    out_dir = Path(out_dir)
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    fire = arr[:, 0]
    paths = []
    for col, name in ((1, "dense"), (2, "scattered"), (3, "none")):
        x = arr[:, col]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.scatter(x, fire, s=6)
        if len(x) >= 2 and x.var() > 0:
            fit = linear_fit(x, fire)
            xs = np.array([x.min(), x.max()])
            ax.plot(xs, fit.slope * xs + fit.intercept, color="C3")
        ax.set_xlabel(f"{name} cirrus pixels")
        ax.set_ylabel("fire pixels")
        fig.tight_layout()
        path = out_dir / f"fire_vs_{name}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths
