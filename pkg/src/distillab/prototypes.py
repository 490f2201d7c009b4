"""Latent-space K-means and per-class prototype extraction.

Each class is partitioned into as many clusters as the images-per-class
budget; the cluster centroids become the prototypes that condition
generation. Everything is deterministic given the rng: k-means++ seeding,
lowest-index tie-breaks, fixed restart count, and farthest-point adoption
for empty clusters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .data import DatasetFormatError, LabeledDataset
from .numerics import SeededRng, require_finite

__all__ = [
    "KmeansResult",
    "Prototype",
    "extract_prototypes",
    "kmeans",
    "read_prototypes",
    "write_prototypes",
]


@dataclass(frozen=True)
class Prototype:
    """One cluster centroid in latent space, tagged with its class."""

    class_id: int
    latent: np.ndarray
    cluster_size: int
    cluster_index: int


@dataclass(frozen=True)
class KmeansResult:
    centroids: np.ndarray  # (C, d) float32
    assignments: np.ndarray  # (N,) int64, nearest-centroid with low-index ties
    inertia: float
    iterations_run: int
    inertia_history: tuple[float, ...]  # per assignment phase of the winning run


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ncd,ncd->nc", diff, diff)


def _kmeanspp_init(points: np.ndarray, c: int, rng: SeededRng) -> np.ndarray:
    n = len(points)
    centroids = np.empty((c, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    for j in range(1, c):
        d2 = _sq_dists(points, centroids[:j]).min(axis=1)
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = points[rng.integers(n)]
            continue
        u = float(rng.uniform(1)[0]) * total
        idx = int(np.searchsorted(np.cumsum(d2), u, side="right"))
        centroids[j] = points[min(idx, n - 1)]
    return centroids


def _lloyd(points: np.ndarray, c: int, max_iters: int, rng: SeededRng):
    n = len(points)
    centroids = _kmeanspp_init(points, c, rng)
    assign = np.full(n, -1, dtype=np.int64)
    history = []
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        d2 = _sq_dists(points, centroids)
        new_assign = d2.argmin(axis=1)
        # adopt the globally farthest point into each empty cluster
        for _repair in range(c):
            counts = np.bincount(new_assign, minlength=c)
            empties = np.nonzero(counts == 0)[0]
            if len(empties) == 0:
                break
            j = int(empties[0])
            far = int(np.argmax(d2[np.arange(n), new_assign]))
            new_assign[far] = j
            centroids[j] = points[far]
            d2[:, j] = ((points - centroids[j]) ** 2).sum(axis=1)
        history.append(float(d2[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(c):
            centroids[j] = points[assign == j].mean(axis=0)
    return centroids, assign, iterations, history


def kmeans(
    points: np.ndarray,
    num_clusters: int,
    max_iters: int = 100,
    restarts: int = 10,
    rng: SeededRng | None = None,
) -> KmeansResult:
    """Best-of-restarts Lloyd iterations with k-means++ seeding.

    Ties in nearest-centroid assignment break to the lowest centroid index;
    ties in inertia across restarts keep the earliest run. The returned
    assignment is recomputed against the float32 centroids so the
    nearest-centroid invariant holds exactly for the stored values.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("points must be a non-empty (N, d) array")
    require_finite("points", points)
    n = len(points)
    if not 1 <= num_clusters <= n:
        raise ValueError(f"num_clusters={num_clusters} outside [1, {n}]")
    if rng is None:
        rng = SeededRng(0)
    best = None
    for r in range(restarts):
        centroids, assign, iters, history = _lloyd(
            points, num_clusters, max_iters, rng.spawn(r)
        )
        inertia = history[-1]
        if best is None or inertia < best[0]:
            best = (inertia, centroids, iters, history)
    _, centroids, iters, history = best
    cent32 = centroids.astype(np.float32)
    d2 = _sq_dists(points, cent32.astype(np.float64))
    assignments = d2.argmin(axis=1).astype(np.int64)
    inertia = float(d2[np.arange(n), assignments].sum())
    return KmeansResult(
        centroids=cent32,
        assignments=assignments,
        inertia=inertia,
        iterations_run=iters,
        inertia_history=tuple(history),
    )


def extract_prototypes(
    encode_fn,
    dataset: LabeledDataset,
    ipc: int,
    rng: SeededRng,
    *,
    restarts: int = 10,
    max_iters: int = 100,
) -> list[Prototype]:
    """Per-class K-means over encoded latents; one prototype per cluster.

    Output ordering is (class_id ascending, cluster_index ascending) and the
    total count is num_classes * ipc.
    """
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    protos: list[Prototype] = []
    for c in range(dataset.num_classes):
        idx = dataset.class_indices(c)
        if len(idx) < ipc:
            raise ValueError(
                f"class {c} has {len(idx)} samples, fewer than ipc={ipc}"
            )
        latents = np.asarray(encode_fn(dataset.images[idx]), dtype=np.float32)
        result = kmeans(
            latents, ipc, max_iters=max_iters, restarts=restarts, rng=rng.spawn(c)
        )
        counts = np.bincount(result.assignments, minlength=ipc)
        for j in range(ipc):
            protos.append(
                Prototype(
                    class_id=c,
                    latent=result.centroids[j],
                    cluster_size=int(counts[j]),
                    cluster_index=j,
                )
            )
    return protos


# --- persistence --------------------------------------------------------------
#
# magic "PRTO" | u16 version | u32 count | u32 latent_dim
# | count x (u32 class_id, u32 cluster_index, u32 cluster_size)
# | count*latent_dim float32 LE | u32 trailer_len | JSON trailer

_PROTO_MAGIC = b"PRTO"
_PROTO_VERSION = 1


def write_prototypes(path, protos: list[Prototype], provenance: dict | None = None) -> None:
    if not protos:
        raise ValueError("prototype list is empty")
    dim = len(protos[0].latent)
    trailer = json.dumps(
        {"provenance": provenance or {}}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PROTO_MAGIC)
        f.write(struct.pack("<H", _PROTO_VERSION))
        f.write(struct.pack("<2I", len(protos), dim))
        for p in protos:
            f.write(struct.pack("<3I", p.class_id, p.cluster_index, p.cluster_size))
        blob = np.stack([p.latent for p in protos]).astype("<f4")
        f.write(blob.tobytes())
        f.write(struct.pack("<I", len(trailer)))
        f.write(trailer)


def read_prototypes(path) -> tuple[list[Prototype], dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _PROTO_MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}, expected {_PROTO_MAGIC!r}")
        (version,) = struct.unpack("<H", f.read(2))
        if version != _PROTO_VERSION:
            raise DatasetFormatError(f"unsupported prototype version {version}")
        count, dim = struct.unpack("<2I", f.read(8))
        meta = [struct.unpack("<3I", f.read(12)) for _ in range(count)]
        blob = f.read(4 * count * dim)
        if len(blob) != 4 * count * dim:
            raise DatasetFormatError("truncated payload while reading latents")
        latents = np.frombuffer(blob, dtype="<f4").reshape(count, dim)
        (tlen,) = struct.unpack("<I", f.read(4))
        trailer = json.loads(f.read(tlen).decode("utf-8"))
    protos = [
        Prototype(class_id=cid, latent=latents[i].copy(), cluster_size=size, cluster_index=ci)
        for i, (cid, ci, size) in enumerate(meta)
    ]
    return protos, trailer.get("provenance", {})
