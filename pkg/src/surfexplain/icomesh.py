"""Icosphere meshes: subdivision, 1-ring neighbor tables, pooling index maps.

Level L has 10*4^L + 2 vertices. Subdivision is midpoint-based with
projection to the unit sphere, and new vertices are appended after the
coarse prefix in (min, max) edge-sorted order, so the first 10*4^(L-1)+2
vertices of level L are exactly the vertices of level L-1. All index
tables are derived deterministically from that ordering.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAX_LEVEL = 7
CACHE_MAGIC = b"ICOM"
CACHE_VERSION = 1

_GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0

# Canonical icosahedron: 12 vertices, 20 CCW-outward faces.
_ICO_VERTS = np.array(
    [
        [-1.0, _GOLDEN, 0.0],
        [1.0, _GOLDEN, 0.0],
        [-1.0, -_GOLDEN, 0.0],
        [1.0, -_GOLDEN, 0.0],
        [0.0, -1.0, _GOLDEN],
        [0.0, 1.0, _GOLDEN],
        [0.0, -1.0, -_GOLDEN],
        [0.0, 1.0, -_GOLDEN],
        [_GOLDEN, 0.0, -1.0],
        [_GOLDEN, 0.0, 1.0],
        [-_GOLDEN, 0.0, -1.0],
        [-_GOLDEN, 0.0, 1.0],
    ],
    dtype=np.float64,
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


class MeshError(ValueError):
    """Invalid mesh input or a malformed mesh cache file."""


def vertex_count(level: int) -> int:
    return 10 * 4**level + 2


def face_count(level: int) -> int:
    return 20 * 4**level


@dataclass
class IcoMesh:
    """Immutable icosphere at one subdivision level.

    Attributes
    ----------
    level : int
        Subdivision level in [0, 7].
    positions : (V, 3) float64
        Unit vectors; the first 10*4^(level-1)+2 rows equal the coarser
        level's positions exactly.
    neighbors : (V, 6) uint32
        1-ring neighbors in counterclockwise order (viewed from outside
        the sphere), starting from the smallest-index neighbor. The 12
        pentagon vertices repeat their first neighbor in slot 5.
    faces : (F, 3) uint32
        Canonical triangle list, CCW outward, each face keyed by its
        smallest corner.
    pool_map : (V_coarse, 7) uint32
        For each vertex of the next-coarser level, its fine-level
        footprint (self + 1-ring at this level). Empty at level 0.
    unpool_map : (V, 2) uint32
        Coarse parents of every vertex of this level: prefix vertices
        repeat themselves, edge-midpoint vertices store their edge
        endpoints with parent0 < parent1. Empty at level 0.
    """

    level: int
    positions: np.ndarray
    neighbors: np.ndarray
    faces: np.ndarray
    pool_map: np.ndarray
    unpool_map: np.ndarray
    neighbor_counts: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.neighbor_counts is None:
            # distinct neighbors per vertex: 5 where slot 5 repeats slot 0
            counts = np.full(len(self.positions), 6, dtype=np.int64)
            counts[self.neighbors[:, 5] == self.neighbors[:, 0]] = 5
            self.neighbor_counts = counts
        for arr in (self.positions, self.neighbors, self.faces,
                    self.pool_map, self.unpool_map, self.neighbor_counts):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.positions.shape[0]

    @property
    def ring1(self) -> np.ndarray:
        """(V, 7) table: self first, then the CCW-ordered neighbor row."""
        if not hasattr(self, "_ring1"):
            ring = np.concatenate(
                [np.arange(self.n_vertices, dtype=np.uint32)[:, None],
                 self.neighbors], axis=1)
            ring.setflags(write=False)
            object.__setattr__(self, "_ring1", ring)
        return self._ring1


def _neighbor_rows(n_vertices: int, faces: np.ndarray):
    """Ascending-index adjacency from a triangle list.

    Returns (nbr, counts): nbr is (V, 6) with unused slots set to the
    first neighbor, counts holds the number of distinct neighbors.
    """
    pairs = np.concatenate([
        faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]],
        faces[:, [1, 0]], faces[:, [2, 1]], faces[:, [0, 2]],
    ])
    key = pairs[:, 0].astype(np.int64) * (1 << 32) + pairs[:, 1]
    key = np.unique(key)
    src = (key >> 32).astype(np.int64)
    dst = (key & 0xFFFFFFFF).astype(np.int64)
    counts = np.bincount(src, minlength=n_vertices)
    if counts.min() < 5 or counts.max() > 6:
        raise MeshError("triangle list does not form an icosphere")
    offsets = np.concatenate([[0], np.cumsum(counts)])
    nbr = np.empty((n_vertices, 6), dtype=np.int64)
    slot = np.arange(len(dst)) - offsets[src]
    nbr[src, slot] = dst
    pent = counts == 5
    nbr[pent, 5] = nbr[pent, 0]
    return nbr, counts


def _order_ccw(positions: np.ndarray, nbr: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Reorder each ascending neighbor row counterclockwise.

    The seam starts at the smallest-index neighbor (slot 0 of the
    ascending row); angles are measured in the tangent plane with
    e2 = n x e1, which is CCW when viewed from outside the sphere.
    """
    n = positions
    d = positions[nbr]  # (V, 6, 3)
    proj = d - (d * n[:, None, :]).sum(axis=2, keepdims=True) * n[:, None, :]
    e1 = proj[:, 0, :]
    e1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    ang = np.arctan2((proj * e2[:, None, :]).sum(axis=2),
                     (proj * e1[:, None, :]).sum(axis=2))
    ang = np.mod(ang, 2.0 * np.pi)
    ang[:, 0] = 0.0
    # push duplicate pentagon slot to the end before sorting
    slot_idx = np.arange(6)[None, :]
    ang[slot_idx >= counts[:, None]] = np.inf
    order = np.argsort(ang, axis=1, kind="stable")
    out = np.take_along_axis(nbr, order, axis=1)
    pent = counts == 5
    out[pent, 5] = out[pent, 0]
    return out


def _canonical_faces(neighbors: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Triangle list rebuilt from CCW neighbor rows.

    Every face is emitted once, at its smallest corner, as (v, n_k, n_k+1)
    with both other corners larger than v; rows are sorted by (v, k).
    """
    n_vertices = neighbors.shape[0]
    v_col, a_col, b_col, k_col = [], [], [], []
    idx = np.arange(n_vertices)
    for k in range(6):
        valid = k < counts
        nk = neighbors[idx, k]
        k1 = np.where(k + 1 < counts, k + 1, 0)
        nk1 = neighbors[idx, k1]
        m = valid & (nk > idx) & (nk1 > idx)
        v_col.append(idx[m])
        a_col.append(nk[m])
        b_col.append(nk1[m])
        k_col.append(np.full(m.sum(), k))
    v = np.concatenate(v_col)
    a = np.concatenate(a_col)
    b = np.concatenate(b_col)
    k = np.concatenate(k_col)
    order = np.lexsort((k, v))
    faces = np.stack([v[order], a[order], b[order]], axis=1)
    return faces


def _subdivide(positions: np.ndarray, faces: np.ndarray):
    """One midpoint-subdivision step.

    Returns (positions, faces, edges): new vertices are appended in
    lexicographic (min, max) edge order and edges[i] are the coarse
    endpoints of appended vertex V_coarse + i.
    """
    v_coarse = positions.shape[0]
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    ekey = np.unique(e[:, 0].astype(np.int64) * (1 << 32) + e[:, 1])
    ea = (ekey >> 32).astype(np.int64)
    eb = (ekey & 0xFFFFFFFF).astype(np.int64)
    mids = positions[ea] + positions[eb]
    mids /= np.linalg.norm(mids, axis=1, keepdims=True)
    new_positions = np.concatenate([positions, mids])

    def mid(u, v):
        lo = np.minimum(u, v).astype(np.int64)
        hi = np.maximum(u, v).astype(np.int64)
        return v_coarse + np.searchsorted(ekey, lo * (1 << 32) + hi)

    m01 = mid(faces[:, 0], faces[:, 1])
    m12 = mid(faces[:, 1], faces[:, 2])
    m20 = mid(faces[:, 2], faces[:, 0])
    new_faces = np.concatenate([
        np.stack([faces[:, 0], m01, m20], axis=1),
        np.stack([faces[:, 1], m12, m01], axis=1),
        np.stack([faces[:, 2], m20, m12], axis=1),
        np.stack([m01, m12, m20], axis=1),
    ])
    edges = np.stack([ea, eb], axis=1)
    return new_positions, new_faces, edges


def _assemble(level, positions, faces, edges) -> IcoMesh:
    n_v = positions.shape[0]
    nbr_sorted, counts = _neighbor_rows(n_v, faces)
    nbr_ccw = _order_ccw(positions, nbr_sorted, counts)
    canon = _canonical_faces(nbr_ccw, counts)
    if canon.shape[0] != face_count(level):
        raise MeshError(f"level {level}: face reconstruction produced "
                        f"{canon.shape[0]} != {face_count(level)} faces")
    if level == 0:
        pool = np.empty((0, 7), dtype=np.uint32)
        unpool = np.empty((0, 2), dtype=np.uint32)
    else:
        v_c = vertex_count(level - 1)
        pool = np.concatenate(
            [np.arange(v_c, dtype=np.int64)[:, None], nbr_ccw[:v_c]],
            axis=1).astype(np.uint32)
        prefix = np.repeat(np.arange(v_c, dtype=np.int64)[:, None], 2, axis=1)
        unpool = np.concatenate([prefix, edges]).astype(np.uint32)
    return IcoMesh(
        level=level,
        positions=positions,
        neighbors=nbr_ccw.astype(np.uint32),
        faces=canon.astype(np.uint32),
        pool_map=pool,
        unpool_map=unpool,
    )


_MESH_MEMO: dict[int, IcoMesh] = {}
_CHAIN_FACES: dict[int, np.ndarray] = {}  # subdivision-order faces, builder internal


def build_icosphere(level: int, *, fresh: bool = False) -> IcoMesh:
    """Build (or fetch from the in-process memo) the level-`level` icosphere.

    Deterministic across runs and platforms. `fresh=True` bypasses and
    does not touch the memo (used to test reproducibility).
    """
    if not isinstance(level, (int, np.integer)) or not 0 <= level <= MAX_LEVEL:
        raise MeshError(f"icosphere level must be an integer in [0, {MAX_LEVEL}], got {level!r}")
    level = int(level)
    if not fresh and level in _MESH_MEMO:
        return _MESH_MEMO[level]
    memo = {} if fresh else _MESH_MEMO
    chain = {} if fresh else _CHAIN_FACES
    start = 0
    positions = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = _ICO_FACES.copy()
    if not fresh:
        while start + 1 in memo and start + 1 <= level and start + 1 in chain:
            start += 1
        if start > 0:
            positions = memo[start].positions.copy()
            faces = chain[start].copy()
    mesh = None
    for lv in range(start, level + 1):
        if lv == start:
            if lv == 0:
                mesh = _assemble(0, positions, faces, None)
                memo.setdefault(0, mesh)
                chain.setdefault(0, faces)
            else:
                mesh = memo[lv]
            continue
        positions, faces, edges = _subdivide(positions, faces)
        mesh = _assemble(lv, positions, faces, edges)
        memo.setdefault(lv, mesh)
        chain.setdefault(lv, faces)
    return mesh


def mesh_pyramid(max_level: int) -> dict[int, IcoMesh]:
    """All meshes from level 0 through `max_level`, keyed by level."""
    build_icosphere(max_level)
    return {lv: build_icosphere(lv) for lv in range(max_level + 1)}


def ring1_indices(mesh: IcoMesh, vertex: int) -> np.ndarray:
    """7-entry row [self, ccw neighbors...] for one vertex.

    Pentagon vertices return 7 entries with the first neighbor repeated
    in the last slot.
    """
    if not 0 <= vertex < mesh.n_vertices:
        raise MeshError(f"vertex {vertex} out of range for level {mesh.level}")
    return mesh.ring1[vertex].copy()


def hex_region(mesh_fine: IcoMesh, mesh_coarse: IcoMesh, coarse_vertex: int,
               depth: int) -> np.ndarray:
    """Transitive pooling footprint of a coarse vertex, `depth` levels down.

    Expands {v} through the pool maps of each intermediate level and
    de-duplicates; returns sorted fine-level indices.
    """
    if mesh_fine.level - mesh_coarse.level != depth or depth < 0:
        raise MeshError(
            f"hex_region: levels {mesh_coarse.level}->{mesh_fine.level} "
            f"inconsistent with depth {depth}")
    if not 0 <= coarse_vertex < mesh_coarse.n_vertices:
        raise MeshError(f"vertex {coarse_vertex} out of range for level {mesh_coarse.level}")
    current = np.array([coarse_vertex], dtype=np.int64)
    for lv in range(mesh_coarse.level + 1, mesh_fine.level + 1):
        pool = build_icosphere(lv).pool_map
        current = np.unique(pool[current].astype(np.int64))
    return current


def hex_regions_all(fine_level: int, coarse_level: int):
    """Footprints of every coarse vertex as a padded matrix.

    Returns (regions, lengths): regions is (V_coarse, W) int64 padded by
    repeating each row's first entry; lengths gives true region sizes.
    """
    if fine_level < coarse_level:
        raise MeshError("fine_level must be >= coarse_level")
    v_c = vertex_count(coarse_level)
    rows = [np.arange(v_c, dtype=np.int64)[:, None]]
    current = rows[0]
    for lv in range(coarse_level + 1, fine_level + 1):
        pool = build_icosphere(lv).pool_map.astype(np.int64)
        current = pool[current].reshape(v_c, -1)
    # de-duplicate each row, keep as padded matrix
    sorted_rows = np.sort(current, axis=1)
    keep = np.concatenate(
        [np.ones((v_c, 1), dtype=bool), sorted_rows[:, 1:] != sorted_rows[:, :-1]],
        axis=1)
    lengths = keep.sum(axis=1)
    width = int(lengths.max())
    regions = np.empty((v_c, width), dtype=np.int64)
    regions[:] = sorted_rows[:, :1]
    for r in range(v_c):
        vals = sorted_rows[r][keep[r]]
        regions[r, :lengths[r]] = vals
        regions[r, lengths[r]:] = vals[0]
    return regions, lengths


def save_mesh(mesh: IcoMesh, path) -> None:
    """Write the "ICOM" cache: header, positions f64, neighbors/pool/unpool u32."""
    payload = [
        struct.pack("<4sII", CACHE_MAGIC, CACHE_VERSION, mesh.level),
        np.ascontiguousarray(mesh.positions, dtype="<f8").tobytes(),
        np.ascontiguousarray(mesh.neighbors, dtype="<u4").tobytes(),
        np.ascontiguousarray(mesh.pool_map, dtype="<u4").tobytes(),
        np.ascontiguousarray(mesh.unpool_map, dtype="<u4").tobytes(),
    ]
    Path(path).write_bytes(b"".join(payload))


def load_mesh(path) -> IcoMesh:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise MeshError(f"{path}: truncated mesh cache header")
    magic, version, level = struct.unpack_from("<4sII", raw, 0)
    if magic != CACHE_MAGIC:
        raise MeshError(f"{path}: bad magic {magic!r}, expected {CACHE_MAGIC!r}")
    if version != CACHE_VERSION:
        raise MeshError(f"{path}: unsupported cache version {version}")
    if level > MAX_LEVEL:
        raise MeshError(f"{path}: level {level} out of range")
    n_v = vertex_count(level)
    n_c = vertex_count(level - 1) if level > 0 else 0
    n_unpool = n_v if level > 0 else 0
    off = 12
    sizes = [n_v * 3 * 8, n_v * 6 * 4, n_c * 7 * 4, n_unpool * 2 * 4]
    if len(raw) != off + sum(sizes):
        raise MeshError(f"{path}: size {len(raw)} does not match level {level} layout")
    positions = np.frombuffer(raw, dtype="<f8", count=n_v * 3, offset=off).reshape(n_v, 3).copy()
    off += sizes[0]
    neighbors = np.frombuffer(raw, dtype="<u4", count=n_v * 6, offset=off).reshape(n_v, 6).copy()
    off += sizes[1]
    pool = np.frombuffer(raw, dtype="<u4", count=n_c * 7, offset=off).reshape(n_c, 7).copy()
    off += sizes[2]
    unpool = np.frombuffer(raw, dtype="<u4", count=n_unpool * 2, offset=off).reshape(n_unpool, 2).copy()
    counts = np.full(n_v, 6, dtype=np.int64)
    counts[neighbors[:, 5] == neighbors[:, 0]] = 5
    faces = _canonical_faces(neighbors.astype(np.int64), counts).astype(np.uint32)
    return IcoMesh(level=int(level), positions=positions, neighbors=neighbors,
                   faces=faces, pool_map=pool, unpool_map=unpool)


def angular_distance(positions: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Great-circle distance (radians) from each position to a unit vector."""
    dots = np.clip(positions @ np.asarray(center, dtype=np.float64), -1.0, 1.0)
    return np.arccos(dots)
