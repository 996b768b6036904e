"""Dataset ingestion and graph construction.

Images become graphs over their above-threshold pixels with intensity
features and radius connectivity; point clouds are centered and scaled into
the unit sphere. A seeded synthetic-shape sampler provides a desk-scale
point-cloud classification set.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .graph import DirectedGraph, GraphSignal, radius_graph
from .rng import SplitMix64, derive

__all__ = [
    "GraphSample",
    "read_idx",
    "load_mnist",
    "mnist_to_graph",
    "mnist_graph_subset",
    "pixel_grid",
    "normalize_pointcloud",
    "synthetic_shapes",
    "read_pointcloud",
    "write_pointcloud",
    "write_manifest",
    "read_manifest",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class GraphSample:
    """One training example: a graph, its signal, and a target."""

    graph: DirectedGraph
    signal: GraphSignal
    target: Union[int, np.ndarray]
    key: Optional[int] = None


def read_idx(path) -> np.ndarray:
    """Read a big-endian IDX file (images -> (n, r, c) uint8, labels -> (n,))."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    magic = struct.unpack(">i", raw[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        n, rows, cols = struct.unpack(">iii", raw[4:16])
        data = np.frombuffer(raw, dtype=np.uint8, offset=16)
        return data.reshape(n, rows, cols)
    if magic == IDX_LABELS_MAGIC:
        n = struct.unpack(">i", raw[4:8])[0]
        return np.frombuffer(raw, dtype=np.uint8, offset=8).reshape(n)
    raise ValueError(f"{path}: unrecognized IDX magic 0x{magic:08x}")


_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _find_idx(root: Path, stem: str) -> Path:
    for candidate in (root / stem, root / (stem + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"missing {stem}[.gz] under {root}")


def load_mnist(data_root):
    """Load the four canonical IDX files from a directory (plain or .gz)."""
    root = Path(data_root)
    out = {}
    for key, stem in _MNIST_FILES.items():
        out[key] = read_idx(_find_idx(root, stem))
    return out["train_images"], out["train_labels"], out["test_images"], out["test_labels"]


def mnist_to_graph(image, rho: float = 2.9, threshold: float = 0.0,
                   label: Optional[int] = None, key: Optional[int] = None) -> GraphSample:
    """Interpret an intensity grid as a graph over its bright pixels.

    Nodes are the pixels with intensity strictly above ``threshold``; their
    positions are the integer pixel coordinates and the 1-dim signal is the
    intensity. Connectivity is the radius graph at ``rho``. An all-dark image
    yields a 0-node sample, which loaders flag and skip.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-d intensity grid, got shape {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("intensities must lie in [0, 1]; scale raw bytes by 1/255")
    mask = image > threshold
    coords = np.argwhere(mask).astype(np.float64)
    values = image[mask][:, None]
    if coords.shape[0] == 0:
        graph = DirectedGraph(0, [], positions=np.zeros((0, 2)), label_dim=2)
        return GraphSample(graph, GraphSignal(np.zeros((0, 1))), target=label, key=key)
    graph = radius_graph(coords, rho)
    return GraphSample(graph, GraphSignal(values), target=label, key=key)


def pixel_grid(rows: int, cols: Optional[int] = None) -> np.ndarray:
    """Integer pixel coordinates in row-major order, matching image flattening."""
    cols = rows if cols is None else cols
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1).astype(np.float64)


def _stratified_pick(labels: np.ndarray, total: int, rng: SplitMix64) -> np.ndarray:
    """Pick ``total`` indices with per-class proportions as even as possible."""
    classes = np.unique(labels)
    per = total // classes.size
    extra = total - per * classes.size
    picked = []
    for c in classes:
        want = per + (1 if extra > 0 else 0)
        extra -= 1 if extra > 0 else 0
        pool = np.flatnonzero(labels == c)
        order = rng.permutation(pool.size)
        picked.append(pool[order[:want]])
    idx = np.concatenate(picked)
    return np.sort(idx)


def mnist_graph_subset(images, labels, count: int, seed: int, rho: float = 2.9,
                       threshold: float = 0.0, key_base: int = 0,
                       with_image_target: bool = False) -> list[GraphSample]:
    """Stratified, seeded subset of images converted to graph samples.

    All-dark images are skipped. With ``with_image_target`` the target is the
    flattened image (for reconstruction) instead of the class label.
    """
    labels = np.asarray(labels)
    rng = SplitMix64(derive(seed, 0x5E7))
    idx = _stratified_pick(labels, count, rng)
    samples = []
    for j, i in enumerate(idx):
        img = np.asarray(images[i], dtype=np.float64) / 255.0
        s = mnist_to_graph(img, rho=rho, threshold=threshold,
                           label=int(labels[i]), key=key_base + j)
        if s.graph.num_nodes == 0:
            continue
        if with_image_target:
            s.target = img.reshape(-1, 1)
        samples.append(s)
    return samples


def normalize_pointcloud(points) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError(f"expected an n x k point matrix with n >= 1, got {points.shape}")
    centered = points - points.mean(axis=0)
    top = np.linalg.norm(centered, axis=1).max()
    if top == 0.0:
        return centered
    return centered / top


SHAPE_NAMES = ("sphere", "cube", "cylinder", "cone", "torus", "plane")


def _sample_shape(name: str, n: int, rng: SplitMix64) -> np.ndarray:
    if name == "sphere":
        v = rng.normal_array((n, 3))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        return v / np.maximum(norms, 1e-12)
    if name == "cube":
        face = np.asarray([rng.randint(6) for _ in range(n)])
        uv = rng.uniform_array((n, 2), -1.0, 1.0)
        pts = np.zeros((n, 3))
        axis = face % 3
        side = np.where(face < 3, -1.0, 1.0)
        for i in range(n):
            others = [a for a in range(3) if a != axis[i]]
            pts[i, axis[i]] = side[i]
            pts[i, others[0]] = uv[i, 0]
            pts[i, others[1]] = uv[i, 1]
        return pts
    if name == "cylinder":
        theta = rng.uniform_array(n, 0.0, 2.0 * np.pi)
        z = rng.uniform_array(n, -1.0, 1.0)
        return np.stack([np.cos(theta), np.sin(theta), z], axis=1)
    if name == "cone":
        u = rng.uniform_array(n)
        theta = rng.uniform_array(n, 0.0, 2.0 * np.pi)
        r = np.sqrt(u)
        return np.stack([r * np.cos(theta), r * np.sin(theta), 1.0 - r], axis=1)
    if name == "torus":
        theta = rng.uniform_array(n, 0.0, 2.0 * np.pi)
        phi = rng.uniform_array(n, 0.0, 2.0 * np.pi)
        major, minor = 1.0, 0.4
        ring = major + minor * np.cos(phi)
        return np.stack([ring * np.cos(theta), ring * np.sin(theta),
                         minor * np.sin(phi)], axis=1)
    if name == "plane":
        uv = rng.uniform_array((n, 2), -1.0, 1.0)
        return np.concatenate([uv, np.zeros((n, 1))], axis=1)
    raise ValueError(f"unknown shape {name!r}")


def synthetic_shapes(num_classes: int, points_per_cloud: int, samples_per_class: int,
                     noise: float, seed: int, graph_radius: float = 0.5) -> list[GraphSample]:
    """Deterministic point-cloud classification set over simple surfaces.

    Clouds are normalized into the unit sphere; the constant-1 feature leaves
    shape information to the edge labels, as in spatial point-cloud setups.
    """
    if not 1 <= num_classes <= len(SHAPE_NAMES):
        raise ValueError(f"num_classes must be in [1, {len(SHAPE_NAMES)}]")
    samples = []
    key = 0
    for c in range(num_classes):
        for s in range(samples_per_class):
            rng = SplitMix64(derive(seed, c, s))
            pts = _sample_shape(SHAPE_NAMES[c], points_per_cloud, rng)
            if noise > 0:
                pts = pts + rng.normal_array(pts.shape, sigma=noise)
            pts = normalize_pointcloud(pts)
            graph = radius_graph(pts, graph_radius)
            signal = GraphSignal(np.ones((points_per_cloud, 1)))
            samples.append(GraphSample(graph, signal, target=c, key=key))
            key += 1
    return samples


def read_pointcloud(path) -> np.ndarray:
    """Whitespace-separated ``x y z`` rows, one point per line."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split()])
    return np.asarray(rows, dtype=np.float64)


def write_pointcloud(path, points) -> None:
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        for row in points:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def write_manifest(path, entries: list[tuple[str, int]]) -> None:
    """Write ``<sample-path> <label>`` lines."""
    with open(path, "w") as fh:
        for sample_path, label in entries:
            fh.write(f"{sample_path} {label}\n")


def read_manifest(path) -> list[tuple[str, int]]:
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                sample_path, label = line.rsplit(" ", 1)
                entries.append((sample_path, int(label)))
    return entries
