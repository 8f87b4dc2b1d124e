"""Edge-driven box refinement.

An exact Euclidean distance transform records, for every pixel, which edge
pixel is closest. A box is then pulled towards the tight extent of the nearest
edge points of the pixels it covers, blended with its current position.

Box coordinates inside this module are in the *pixel-index frame* of the edge
map: pixel ``(i, j)`` sits at the point ``(i, j)``, and a box covers the
pixels whose index lies inside it (borders inclusive).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .errors import EmptyDataset, EmptyEdgeMap, EmptyIntersection
from .geometry import ProposalSet, Source, as_proposal_set, iou_matrix

GAMMA_GRID = np.round(np.arange(101) * 0.01, 2)


@dataclass(frozen=True)
class NearestEdgeMap:
    nearest_x: np.ndarray
    nearest_y: np.ndarray
    sqdist: np.ndarray

    @property
    def width(self) -> int:
        return self.sqdist.shape[1]

    @property
    def height(self) -> int:
        return self.sqdist.shape[0]


@dataclass
class EdgeRefineParams:
    gamma: float | Sequence[float] = 1.0
    max_iters: int = 3
    epsilon: float = 0.95
    resize_factor: float = 1.0 / 3.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if not 0.0 < self.resize_factor <= 1.0:
            raise ValueError("resize_factor must be in (0, 1]")
        if any(not 0.0 <= g <= 1.0 for g in self.gammas()):
            raise ValueError("gamma values must be in [0, 1]")

    def gammas(self) -> np.ndarray:
        """Per-iteration gamma; a short sequence repeats its last value."""
        g = np.atleast_1d(np.asarray(self.gamma, dtype=np.float64))
        if len(g) >= self.max_iters:
            return g[: self.max_iters].copy()
        return np.concatenate([g, np.full(self.max_iters - len(g), g[-1])])


# ---------------------------------------------------------------------------
# distance transform


@numba.njit(cache=True, nogil=True)
def _edt(mask):
    h, w = mask.shape
    big = np.int64(1) << 60
    # pass 1, along rows: nearest edge column in the same row (ties -> smaller x)
    row_d = np.full((h, w), big, dtype=np.int64)
    row_x = np.full((h, w), -1, dtype=np.int64)
    for y in range(h):
        last = -1
        for x in range(w):
            if mask[y, x]:
                last = x
            if last >= 0:
                row_x[y, x] = last
                row_d[y, x] = (x - last) * (x - last)
        nxt = -1
        for x in range(w - 1, -1, -1):
            if mask[y, x]:
                nxt = x
            if nxt >= 0:
                d = (nxt - x) * (nxt - x)
                if d < row_d[y, x]:
                    row_d[y, x] = d
                    row_x[y, x] = nxt
    # pass 2, along columns: lower envelope of parabolas f(v) + (q - v)^2
    sq = np.empty((h, w), dtype=np.int64)
    nx = np.empty((h, w), dtype=np.int32)
    ny = np.empty((h, w), dtype=np.int32)
    v = np.empty(h, dtype=np.int64)
    z = np.empty(h + 1, dtype=np.float64)
    for x in range(w):
        k = -1
        for q in range(h):
            fq = row_d[q, x]
            if fq >= big:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                continue
            while True:
                p = v[k]
                s = ((fq + q * q) - (row_d[p, x] + p * p)) / (2.0 * (q - p))
                # popping on equality keeps the smaller index reachable at ties
                if s <= z[k]:
                    k -= 1
                    if k < 0:
                        break
                else:
                    break
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
            else:
                k += 1
                v[k] = q
                z[k] = s
                z[k + 1] = np.inf
        k = 0
        for q in range(h):
            while z[k + 1] < q:
                k += 1
            p = v[k]
            sq[q, x] = (q - p) * (q - p) + row_d[p, x]
            ny[q, x] = p
            nx[q, x] = row_x[p, x]
    return nx, ny, sq


def distance_transform(edges: np.ndarray) -> NearestEdgeMap:
    """Exact squared Euclidean distance transform with nearest-edge indices.

    Among equidistant edge pixels the one with the smaller y, then smaller x,
    is reported.
    """
    mask = np.ascontiguousarray(edges, dtype=np.bool_)
    if mask.ndim != 2:
        raise ValueError("edge map must be 2-D")
    if not mask.any():
        raise EmptyEdgeMap("edge map has no edge pixels")
    nx, ny, sq = _edt(mask)
    return NearestEdgeMap(nx, ny, sq)


# ---------------------------------------------------------------------------
# box update


@numba.njit(cache=True, nogil=True, inline="always")
def _pixel_span(lo, hi, n):
    a = int(np.ceil(max(lo, 0.0)))
    b = int(np.floor(min(hi, n - 1.0)))
    return a, b


@numba.njit(cache=True, nogil=True)
def _extent(nx, ny, x1, y1, x2, y2, out):
    h, w = nx.shape
    c0, c1 = _pixel_span(x1, x2, w)
    r0, r1 = _pixel_span(y1, y2, h)
    if c0 > c1 or r0 > r1:
        return 0
    mnx = w
    mny = h
    mxx = -1
    mxy = -1
    for y in range(r0, r1 + 1):
        for x in range(c0, c1 + 1):
            qx = nx[y, x]
            qy = ny[y, x]
            if qx < mnx:
                mnx = qx
            if qx > mxx:
                mxx = qx
            if qy < mny:
                mny = qy
            if qy > mxy:
                mxy = qy
    out[0] = mnx
    out[1] = mny
    out[2] = mxx
    out[3] = mxy
    return (r1 - r0 + 1) * (c1 - c0 + 1)


@numba.njit(cache=True, nogil=True)
def _extents(nx, ny, boxes):
    n = boxes.shape[0]
    out = boxes.copy()
    ok = np.zeros(n, dtype=np.bool_)
    tmp = np.empty(4, dtype=np.float64)
    visits = 0
    for i in range(n):
        c = _extent(nx, ny, boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3], tmp)
        if c > 0:
            out[i, :] = tmp
            ok[i] = True
            visits += c
    return out, ok, visits


@numba.njit(cache=True, nogil=True)
def _recursive_box(nx, ny, boxes, gammas, eps):
    n = boxes.shape[0]
    out = boxes.copy()
    ok = np.ones(n, dtype=np.bool_)
    iters = np.zeros(n, dtype=np.int64)
    ext = np.empty(4, dtype=np.float64)
    visits = 0
    for i in range(n):
        a0 = boxes[i, 0]
        a1 = boxes[i, 1]
        a2 = boxes[i, 2]
        a3 = boxes[i, 3]
        for t in range(gammas.shape[0]):
            c = _extent(nx, ny, a0, a1, a2, a3, ext)
            if c == 0:
                ok[i] = False
                break
            visits += c
            iters[i] = t + 1
            g = gammas[t]
            b0 = (1.0 - g) * a0 + g * ext[0]
            b1 = (1.0 - g) * a1 + g * ext[1]
            b2 = (1.0 - g) * a2 + g * ext[2]
            b3 = (1.0 - g) * a3 + g * ext[3]
            iw = min(a2, b2) - max(a0, b0)
            ih = min(a3, b3) - max(a1, b1)
            ov = 0.0
            if iw > 0 and ih > 0:
                inter = iw * ih
                union = (a2 - a0) * (a3 - a1) + (b2 - b0) * (b3 - b1) - inter
                if union > 0:
                    ov = inter / union
            a0 = b0
            a1 = b1
            a2 = b2
            a3 = b3
            if ov >= eps:
                break
        if ok[i]:
            out[i, 0] = a0
            out[i, 1] = a1
            out[i, 2] = a2
            out[i, 3] = a3
    return out, ok, iters, visits


def box_nearest_extent(nmap: NearestEdgeMap, r) -> np.ndarray:
    """Tight box ``[min_x, min_y, max_x, max_y]`` of the nearest edge points of
    every pixel covered by ``r``."""
    r = np.asarray(getattr(r, "as_tuple", lambda: r)(), dtype=np.float64)
    out = np.empty(4)
    if _extent(nmap.nearest_x, nmap.nearest_y, r[0], r[1], r[2], r[3], out) == 0:
        raise EmptyIntersection(f"box {tuple(r)} covers no pixel of the edge map")
    return out


def nearest_extents(nmap: NearestEdgeMap, boxes: np.ndarray):
    """Batch form of :func:`box_nearest_extent`.

    Returns ``(extents, ok, pixel_visits)``; rows with ``ok == False`` covered no
    pixel and hold the input box.
    """
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    return _extents(nmap.nearest_x, nmap.nearest_y, boxes)


@dataclass
class RefineStats:
    pixel_visits: int = 0
    iterations: np.ndarray | None = None
    failed: int = 0


def edge_recursive_box(
    nmap: NearestEdgeMap,
    props,
    params: EdgeRefineParams,
    stats: RefineStats | None = None,
) -> ProposalSet:
    """Iterate ``r <- blend(r, nearest_extent(r), gamma_t)`` for up to T steps.

    Stops early once consecutive boxes overlap by at least ``epsilon``. Scores
    and order are preserved. A box that covers no edge-map pixel is passed
    through untouched and keeps its original source tag.
    """
    ps = as_proposal_set(props)
    boxes, ok, iters, visits = _recursive_box(
        nmap.nearest_x, nmap.nearest_y, ps.boxes, params.gammas(), float(params.epsilon)
    )
    sources = np.where(ok, np.int8(Source.EDGE_REFINED), ps.sources).astype(np.int8)
    if stats is not None:
        stats.pixel_visits += int(visits)
        stats.iterations = iters
        stats.failed += int((~ok).sum())
    return ProposalSet(boxes, ps.scores, sources)


# ---------------------------------------------------------------------------
# frames


def edge_frame_size(width: int, height: int, factor: float) -> tuple[int, int]:
    return max(1, int(round(width * factor))), max(1, int(round(height * factor)))


def to_edge_frame(boxes: np.ndarray, width: int, height: int, factor: float) -> np.ndarray:
    """Continuous image boxes to the pixel-index frame of the resized edge map."""
    ew, eh = edge_frame_size(width, height, factor)
    s = np.array([ew / width, eh / height, ew / width, eh / height])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * s - 0.5


def from_edge_frame(boxes: np.ndarray, width: int, height: int, factor: float) -> np.ndarray:
    ew, eh = edge_frame_size(width, height, factor)
    s = np.array([ew / width, eh / height, ew / width, eh / height])
    return (np.asarray(boxes, dtype=np.float64).reshape(-1, 4) + 0.5) / s


# ---------------------------------------------------------------------------
# learning


@dataclass
class EdgeSample:
    """One training image expressed in its edge-map frame."""

    nmap: NearestEdgeMap
    boxes: np.ndarray
    gts: np.ndarray


def _missed(boxes: np.ndarray, gts: np.ndarray, eta: float) -> int:
    if len(gts) == 0:
        return 0
    if len(boxes) == 0:
        return len(gts)
    return int((iou_matrix(gts, boxes).max(axis=1) < eta).sum())


def learn_gamma(samples: Sequence[EdgeSample], eta: float = 0.5, iters: int = 3, grid=GAMMA_GRID):
    """Greedy per-iteration grid search for the blend weight.

    At iteration t every candidate gamma advances all boxes one step from the
    boxes chosen at t-1; the gamma with the fewest missed objects wins (ties go
    to the smaller gamma). Returns ``(gammas, min_losses, loss_table)`` where
    ``loss_table[t, g]`` is the loss of grid value g at iteration t.
    """
    if not samples:
        raise EmptyDataset("no training images")
    grid = np.asarray(grid, dtype=np.float64)
    current = [np.asarray(s.boxes, dtype=np.float64).reshape(-1, 4).copy() for s in samples]
    gammas, losses = [], []
    table = np.zeros((iters, len(grid)), dtype=np.int64)
    for t in range(iters):
        extents = [nearest_extents(s.nmap, b)[0] for s, b in zip(samples, current)]
        for gi, g in enumerate(grid):
            table[t, gi] = sum(
                _missed((1.0 - g) * b + g * e, s.gts, eta) for s, b, e in zip(samples, current, extents)
            )
        best = int(np.argmin(table[t]))
        g = float(grid[best])
        gammas.append(g)
        losses.append(int(table[t, best]))
        current = [(1.0 - g) * b + g * e for b, e in zip(current, extents)]
    return gammas, losses, table
