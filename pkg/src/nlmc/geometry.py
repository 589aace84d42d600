"""Structured fine mesh, fracture embedding, coarse partition and continua.

Nodes are numbered lexicographically with x fastest: node (ix, iy) has index
``iy * (nx + 1) + ix``. Cells and coarse blocks follow the same convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sps
from scipy.sparse.csgraph import connected_components

GLOBAL = "global"


@dataclass(frozen=True)
class FineMesh:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    @property
    def h(self) -> float:
        return self.lx / self.nx

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_edges(self) -> int:
        return 2 * self.nx * self.ny + self.nx + self.ny

    def node(self, ix, iy):
        return np.asarray(iy) * (self.nx + 1) + np.asarray(ix)

    def node_ij(self, k):
        k = np.asarray(k)
        return k % (self.nx + 1), k // (self.nx + 1)

    @cached_property
    def coords(self) -> np.ndarray:
        x = np.linspace(0.0, self.lx, self.nx + 1)
        y = np.linspace(0.0, self.ly, self.ny + 1)
        X, Y = np.meshgrid(x, y)
        return np.column_stack([X.ravel(), Y.ravel()])

    @cached_property
    def cell_nodes(self) -> np.ndarray:
        """(n_cells, 4) corners, counterclockwise from the lower-left."""
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        ll = self.node(ix.ravel(), iy.ravel())
        s = self.nx + 1
        return np.column_stack([ll, ll + 1, ll + 1 + s, ll + s])

    @cached_property
    def edges(self) -> np.ndarray:
        s = self.nx + 1
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny + 1))
        a = self.node(ix.ravel(), iy.ravel())
        horizontal = np.column_stack([a, a + 1])
        ix, iy = np.meshgrid(np.arange(self.nx + 1), np.arange(self.ny))
        a = self.node(ix.ravel(), iy.ravel())
        vertical = np.column_stack([a, a + s])
        return np.vstack([horizontal, vertical])


def build_fine_mesh(nx: int, ny: int, lx: float = 1.0, ly: float = 1.0) -> FineMesh:
    if nx < 1 or ny < 1:
        raise ValueError(f"cell counts must be positive, got nx={nx}, ny={ny}")
    if lx <= 0 or ly <= 0:
        raise ValueError("domain lengths must be positive")
    hx, hy = lx / nx, ly / ny
    if abs(hx - hy) > 1e-12 * max(hx, hy):
        raise ValueError(
            f"cells must be square: aspect ratio hx/hy = {hx / hy:.6g} "
            f"(Lx/nx = {hx:.6g}, Ly/ny = {hy:.6g})"
        )
    return FineMesh(int(nx), int(ny), float(lx), float(ly))


@dataclass(frozen=True)
class Fracture:
    nodes: np.ndarray
    conductivity: float
    id: int = 0

    @property
    def edges(self) -> np.ndarray:
        return np.column_stack([self.nodes[:-1], self.nodes[1:]])


@dataclass(frozen=True)
class FractureNetwork:
    fractures: tuple[Fracture, ...] = ()

    def __len__(self):
        return len(self.fractures)

    @cached_property
    def edges(self) -> np.ndarray:
        if not self.fractures:
            return np.zeros((0, 2), dtype=np.int64)
        return np.vstack([f.edges for f in self.fractures]).astype(np.int64)

    @cached_property
    def edge_conductivity(self) -> np.ndarray:
        if not self.fractures:
            return np.zeros(0)
        return np.concatenate(
            [np.full(len(f.nodes) - 1, f.conductivity) for f in self.fractures]
        )

    @cached_property
    def edge_fracture(self) -> np.ndarray:
        if not self.fractures:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(
            [np.full(len(f.nodes) - 1, f.id) for f in self.fractures]
        )

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.unique(self.edges)


def edge_lengths(mesh: FineMesh, edges: np.ndarray) -> np.ndarray:
    d = mesh.coords[edges[:, 1]] - mesh.coords[edges[:, 0]]
    return np.hypot(d[:, 0], d[:, 1])


def snap_fracture(mesh: FineMesh, p0: Sequence[float], p1: Sequence[float],
                  conductivity: float, id: int = 0) -> Fracture:
    """Embed the segment p0-p1 as a path of fine nodes.

    Endpoints snap to the nearest fine node; the snapped segment must be
    horizontal, vertical or at 45 degrees to the grid.
    """
    h = mesh.h
    ends = []
    for p in (p0, p1):
        x, y = float(p[0]), float(p[1])
        tol = 1e-9 * max(mesh.lx, mesh.ly)
        if not (-tol <= x <= mesh.lx + tol and -tol <= y <= mesh.ly + tol):
            raise ValueError(f"fracture endpoint {p} lies outside the domain")
        ends.append((int(np.clip(round(x / h), 0, mesh.nx)),
                     int(np.clip(round(y / h), 0, mesh.ny))))
    (i0, j0), (i1, j1) = ends
    di, dj = i1 - i0, j1 - j0
    steps = max(abs(di), abs(dj))
    if steps == 0:
        raise ValueError(
            f"fracture {id} from {tuple(p0)} to {tuple(p1)} is shorter than "
            f"h = {h:g} after snapping"
        )
    if not (di == 0 or dj == 0 or abs(di) == abs(dj)):
        raise ValueError(
            f"fracture {id} has unsupported orientation (di={di}, dj={dj}); "
            "allowed orientations are horizontal, vertical and 45-degree diagonal"
        )
    t = np.arange(steps + 1)
    ix = i0 + np.sign(di) * t
    iy = j0 + np.sign(dj) * t
    return Fracture(mesh.node(ix, iy).astype(np.int64), float(conductivity), id)


@dataclass(frozen=True)
class CoarseGrid:
    mesh: FineMesh
    Nx: int
    Ny: int

    @property
    def n_blocks(self) -> int:
        return self.Nx * self.Ny

    @property
    def mx(self) -> int:
        """Fine cells per block along x."""
        return self.mesh.nx // self.Nx

    @property
    def my(self) -> int:
        return self.mesh.ny // self.Ny

    @property
    def H(self) -> float:
        return self.mesh.lx / self.Nx

    def block_ij(self, b):
        b = np.asarray(b)
        return b % self.Nx, b // self.Nx

    def block(self, bx, by):
        return np.asarray(by) * self.Nx + np.asarray(bx)

    def block_area(self) -> float:
        return self.mesh.lx * self.mesh.ly / self.n_blocks

    def node_range(self, bx0, bx1, by0, by1):
        """Fine nodes of the closure of the block rectangle [bx0..bx1]x[by0..by1]."""
        ix = np.arange(bx0 * self.mx, (bx1 + 1) * self.mx + 1)
        iy = np.arange(by0 * self.my, (by1 + 1) * self.my + 1)
        IX, IY = np.meshgrid(ix, iy)
        return self.mesh.node(IX.ravel(), IY.ravel())

    def block_nodes(self, b) -> np.ndarray:
        bx, by = self.block_ij(b)
        return self.node_range(bx, bx, by, by)

    def block_cells(self, b) -> np.ndarray:
        bx, by = self.block_ij(b)
        ix = np.arange(bx * self.mx, (bx + 1) * self.mx)
        iy = np.arange(by * self.my, (by + 1) * self.my)
        IX, IY = np.meshgrid(ix, iy)
        return (IY * self.mesh.nx + IX).ravel()

    @cached_property
    def cell_block(self) -> np.ndarray:
        ix = np.arange(self.mesh.nx) // self.mx
        iy = np.arange(self.mesh.ny) // self.my
        IX, IY = np.meshgrid(ix, iy)
        return (IY * self.Nx + IX).ravel()

    def node_in_block(self, nodes, b) -> np.ndarray:
        """True where a fine node lies in the closed block b."""
        ix, iy = self.mesh.node_ij(nodes)
        bx, by = self.block_ij(b)
        return ((ix >= bx * self.mx) & (ix <= (bx + 1) * self.mx)
                & (iy >= by * self.my) & (iy <= (by + 1) * self.my))


def build_coarse_grid(mesh: FineMesh, Nx: int, Ny: int) -> CoarseGrid:
    if Nx < 1 or Ny < 1 or mesh.nx % Nx or mesh.ny % Ny:
        raise ValueError(
            f"coarse grid {Nx}x{Ny} does not conform to fine grid {mesh.nx}x{mesh.ny}"
        )
    return CoarseGrid(mesh, int(Nx), int(Ny))


@dataclass(frozen=True)
class OversampleRegion:
    """Coarse block ``center`` grown by ``layers`` rings of coarse blocks.

    The region is always a rectangle of blocks ``[bx0..bx1] x [by0..by1]``.
    ``artificial_nodes`` are fine nodes on the part of the region boundary
    that lies inside the domain; ``physical_nodes`` are the remaining region
    boundary nodes, on the domain boundary.
    """
    center: int
    layers: int | str
    blocks: np.ndarray
    extent: tuple[int, int, int, int]
    nodes: np.ndarray
    boundary_nodes: np.ndarray
    artificial_nodes: np.ndarray
    physical_nodes: np.ndarray
    interior_nodes: np.ndarray
    touches: dict = field(default_factory=dict)
    row_length: int = 0

    def free_nodes(self, policy: str = "physical_on_domain_boundary") -> np.ndarray:
        if policy in ("physical_on_domain_boundary", "physical"):
            return np.setdiff1d(self.nodes, self.artificial_nodes, assume_unique=True)
        if policy in ("dirichlet_everywhere", "dirichlet"):
            return self.interior_nodes
        raise ValueError(f"unknown boundary policy {policy!r}")

    @property
    def is_global(self) -> bool:
        return self.artificial_nodes.size == 0 and all(self.touches.values())


def oversample(coarse: CoarseGrid, i: int, layers: int | str) -> OversampleRegion:
    if not 0 <= i < coarse.n_blocks:
        raise ValueError(f"block {i} out of range")
    cx, cy = (int(v) for v in coarse.block_ij(i))
    if layers == GLOBAL:
        bx0, bx1, by0, by1 = 0, coarse.Nx - 1, 0, coarse.Ny - 1
    else:
        k = int(layers)
        if k < 0:
            raise ValueError("layers must be nonnegative or 'global'")
        bx0, bx1 = max(cx - k, 0), min(cx + k, coarse.Nx - 1)
        by0, by1 = max(cy - k, 0), min(cy + k, coarse.Ny - 1)
    BX, BY = np.meshgrid(np.arange(bx0, bx1 + 1), np.arange(by0, by1 + 1))
    blocks = coarse.block(BX.ravel(), BY.ravel())

    mesh = coarse.mesh
    ix0, ix1 = bx0 * coarse.mx, (bx1 + 1) * coarse.mx
    iy0, iy1 = by0 * coarse.my, (by1 + 1) * coarse.my
    nodes = coarse.node_range(bx0, bx1, by0, by1)
    ix, iy = mesh.node_ij(nodes)
    on_left, on_right = ix == ix0, ix == ix1
    on_bottom, on_top = iy == iy0, iy == iy1
    boundary = on_left | on_right | on_bottom | on_top
    touches = {"left": ix0 == 0, "right": ix1 == mesh.nx,
               "bottom": iy0 == 0, "top": iy1 == mesh.ny}
    artificial = ((on_left & (not touches["left"])) | (on_right & (not touches["right"]))
                  | (on_bottom & (not touches["bottom"])) | (on_top & (not touches["top"])))
    return OversampleRegion(
        center=i,
        layers=layers,
        blocks=blocks,
        extent=(bx0, bx1, by0, by1),
        nodes=nodes,
        boundary_nodes=nodes[boundary],
        artificial_nodes=nodes[artificial],
        physical_nodes=nodes[boundary & ~artificial],
        interior_nodes=nodes[~boundary],
        touches=touches,
        row_length=mesh.nx + 1,
    )


def chebyshev_distance(coarse: CoarseGrid, i: int, blocks) -> np.ndarray:
    cx, cy = coarse.block_ij(i)
    bx, by = coarse.block_ij(blocks)
    return np.maximum(np.abs(bx - cx), np.abs(by - cy))


@dataclass(frozen=True)
class Continuum:
    block: int
    local: int
    nodes: np.ndarray
    edges: np.ndarray | None = None
    fractures: tuple[int, ...] = ()

    @property
    def is_matrix(self) -> bool:
        return self.local == 0


@dataclass(frozen=True)
class ContinuumIndex:
    entries: tuple[Continuum, ...]
    n_blocks: int

    def __len__(self):
        return len(self.entries)

    @property
    def n(self) -> int:
        return len(self.entries)

    @cached_property
    def offsets(self) -> np.ndarray:
        counts = np.bincount(self.block_of, minlength=self.n_blocks)
        return np.concatenate([[0], np.cumsum(counts)])

    @cached_property
    def block_of(self) -> np.ndarray:
        return np.array([c.block for c in self.entries], dtype=np.int64)

    @cached_property
    def local_of(self) -> np.ndarray:
        return np.array([c.local for c in self.entries], dtype=np.int64)

    @cached_property
    def is_matrix(self) -> np.ndarray:
        return self.local_of == 0

    def n_fracture_continua(self, block: int) -> int:
        return int(self.offsets[block + 1] - self.offsets[block] - 1)

    def index(self, block: int, local: int) -> int:
        if not 0 <= local <= self.n_fracture_continua(block):
            raise IndexError(f"block {block} has no continuum {local}")
        return int(self.offsets[block] + local)

    def rows_of_blocks(self, blocks) -> np.ndarray:
        return np.concatenate(
            [np.arange(self.offsets[b], self.offsets[b + 1]) for b in blocks]
        )

    def label(self, k: int) -> str:
        c = self.entries[k]
        return f"(block {c.block}, continuum {c.local})"


def enumerate_continua(coarse: CoarseGrid, network: FractureNetwork) -> ContinuumIndex:
    """One matrix continuum per block plus one per connected fracture component.

    Fracture edges are clipped to the closed block, so an edge on a block
    interface is seen by both neighbours. Components are ordered by their
    smallest fine-node index.
    """
    mesh = coarse.mesh
    edges = network.edges
    eix, eiy = mesh.node_ij(edges)
    # block rectangle of every edge (an edge fits in the blocks covering both ends)
    entries = []
    frac_nodes = set(network.nodes.tolist())
    for b in range(coarse.n_blocks):
        bx, by = (int(v) for v in coarse.block_ij(b))
        if frac_nodes:
            bn = coarse.block_nodes(b)
            if all(int(k) in frac_nodes for k in bn):
                raise ValueError(f"coarse block {b} is entirely covered by fracture nodes")
        entries.append(Continuum(b, 0, coarse.block_nodes(b)))
        if edges.shape[0] == 0:
            continue
        inside = ((eix >= bx * coarse.mx) & (eix <= (bx + 1) * coarse.mx)
                  & (eiy >= by * coarse.my) & (eiy <= (by + 1) * coarse.my)).all(axis=1)
        if not inside.any():
            continue
        local_edges = edges[inside]
        ids = network.edge_fracture[inside]
        nodes, inv = np.unique(local_edges, return_inverse=True)
        inv = inv.reshape(-1, 2)
        graph = sps.coo_matrix(
            (np.ones(len(inv)), (inv[:, 0], inv[:, 1])), shape=(len(nodes), len(nodes))
        )
        ncomp, label = connected_components(graph, directed=False)
        edge_label = label[inv[:, 0]]
        comps = []
        for c in range(ncomp):
            sel = edge_label == c
            cn = nodes[label == c]
            comps.append((int(cn.min()), cn, local_edges[sel],
                          tuple(sorted(set(ids[sel].tolist())))))
        comps.sort(key=lambda t: t[0])
        for m, (_, cn, ce, fids) in enumerate(comps, start=1):
            entries.append(Continuum(b, m, cn, ce, fids))
    return ContinuumIndex(tuple(entries), coarse.n_blocks)
