"""End-to-end proposal generation: BING scan, edge refinement, segment expansion, NMS."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import bing, edge_refine, raster, segment_refine
from .errors import BingppError, ModelMissing
from .geometry import ProposalSet, Source, clip_boxes, nms

log = logging.getLogger(__name__)

STAGES = ("bing", "edge", "seg", "nms")


@dataclass
class PipelineConfig:
    model: str | None = None
    max_proposals: int = 1000
    bing_keep: int | None = None
    per_size_keep: int = bing.PER_SIZE_KEEP
    # edge stage
    gamma: float | list[float] = 1.0
    iters: int = 3
    epsilon: float = 0.95
    edge_resize: float = 1.0 / 3.0
    canny_sigma: float = raster.CANNY_SIGMA
    canny_low: float = raster.CANNY_LOW
    canny_high: float = raster.CANNY_HIGH
    # segment stage
    delta: list[float] = field(default_factory=lambda: list(segment_refine.DEFAULT_DELTAS))
    seg_k: float = segment_refine.DEFAULT_K
    min_size: int = segment_refine.DEFAULT_MIN_SIZE
    seg_frame: tuple[int, int] = segment_refine.SEG_FRAME
    cell_px: int = segment_refine.CELL_PX
    # final
    nms_rho: float = 0.85
    enable_edge: bool = True
    enable_seg: bool = True
    order: str = "edge_first"
    eta: float = 0.5
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.order not in ("edge_first", "seg_first"):
            raise ValueError("order must be 'edge_first' or 'seg_first'")
        if self.max_proposals < 0:
            raise ValueError("max_proposals must be >= 0")
        self.seg_frame = tuple(self.seg_frame)
        # validate the embedded parameter blocks eagerly
        self.edge_params()
        self.seg_params()

    def edge_params(self) -> edge_refine.EdgeRefineParams:
        return edge_refine.EdgeRefineParams(self.gamma, self.iters, self.epsilon, self.edge_resize)

    def seg_params(self) -> segment_refine.SegRefineParams:
        return segment_refine.SegRefineParams(self.delta, self.seg_k, self.min_size, self.seg_frame, self.cell_px)

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seg_frame"] = list(self.seg_frame)
        return d

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


def nearest_edge_map(img, cfg: PipelineConfig) -> edge_refine.NearestEdgeMap:
    """Canny edges of the downsized luminance and their distance transform."""
    h, w = img.shape[:2]
    ew, eh = edge_refine.edge_frame_size(w, h, cfg.edge_resize)
    small = raster.resize(raster.to_gray(img), ew, eh)
    edges = raster.canny(small, cfg.canny_low, cfg.canny_high, cfg.canny_sigma)
    return edge_refine.distance_transform(edges)


def _edge_stage(gray, props: ProposalSet, cfg: PipelineConfig) -> ProposalSet:
    h, w = gray.shape[:2]
    f = cfg.edge_resize
    nmap = nearest_edge_map(gray, cfg)
    local = props.with_boxes(edge_refine.to_edge_frame(props.boxes, w, h, f))
    refined = edge_refine.edge_recursive_box(nmap, local, cfg.edge_params())
    back = edge_refine.from_edge_frame(refined.boxes, w, h, f)
    moved = refined.sources == Source.EDGE_REFINED
    boxes = np.where(moved[:, None], back, props.boxes)
    return ProposalSet(boxes, props.scores, refined.sources)


def _seg_stage(img, props: ProposalSet, cfg: PipelineConfig) -> ProposalSet:
    h, w = img.shape[:2]
    grid = segment_refine.build_cell_grid(img, cfg.seg_frame, cfg.cell_px)
    labeling = segment_refine.segment_graph(grid, cfg.seg_k, cfg.min_size)
    gw, gh = grid.grid_w, grid.grid_h
    local = props.with_boxes(segment_refine.to_cell_frame(props.boxes, w, h, gw, gh))
    out = segment_refine.segment_recursive_box(labeling, local, cfg.seg_params().delta_set)
    return out.with_boxes(segment_refine.from_cell_frame(out.boxes, w, h, gw, gh))


def edge_sample(img, boxes, gts, cfg: PipelineConfig) -> edge_refine.EdgeSample:
    """Training sample for the gamma search, in the edge-map frame."""
    h, w = img.shape[:2]
    f = cfg.edge_resize
    return edge_refine.EdgeSample(
        nearest_edge_map(img, cfg),
        edge_refine.to_edge_frame(boxes, w, h, f),
        edge_refine.to_edge_frame(np.asarray(gts, dtype=np.float64).reshape(-1, 4), w, h, f),
    )


def seg_sample(img, boxes, gts, cfg: PipelineConfig, classes=None) -> segment_refine.SegSample:
    """Training sample for the delta search, in cell units."""
    h, w = img.shape[:2]
    grid = segment_refine.build_cell_grid(img, cfg.seg_frame, cfg.cell_px)
    labeling = segment_refine.segment_graph(grid, cfg.seg_k, cfg.min_size)
    gw, gh = grid.grid_w, grid.grid_h
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    return segment_refine.SegSample(
        labeling,
        segment_refine.to_cell_frame(boxes, w, h, gw, gh),
        segment_refine.to_cell_frame(gts, w, h, gw, gh),
        classes,
    )


def _guarded(name: str, stage: Callable, img, props: ProposalSet, cfg: PipelineConfig) -> ProposalSet:
    try:
        return stage(img, props, cfg)
    except BingppError as exc:
        log.warning("%s stage failed (%s); passing proposals through unrefined", name, exc)
        return props


def run_bingpp(
    img: np.ndarray,
    cfg: PipelineConfig,
    model: bing.BinarizedModel | None,
    timings: dict | None = None,
) -> ProposalSet:
    """Proposals for one image, in original coordinates, best first."""
    if model is None:
        raise ModelMissing("no objectness model loaded")
    img = np.asarray(img)
    h, w = img.shape[:2]
    clock = time.perf_counter
    spent = dict.fromkeys(STAGES, 0.0)
    t_start = clock()

    t = clock()
    gray = raster.to_gray(img)
    keep = cfg.bing_keep if cfg.bing_keep is not None else cfg.max_proposals
    props = bing.scan(gray, model, cfg.per_size_keep, keep)
    spent["bing"] = clock() - t

    # the edge stage only needs luminance; segmentation works on colour
    stages = [("edge", cfg.enable_edge, _edge_stage, gray), ("seg", cfg.enable_seg, _seg_stage, img)]
    if cfg.order == "seg_first":
        stages.reverse()
    for name, enabled, fn, src in stages:
        if not enabled or len(props) == 0:
            continue
        t = clock()
        props = _guarded(name, fn, src, props, cfg)
        spent[name] = clock() - t

    t = clock()
    props = props.with_boxes(clip_boxes(props.boxes, w, h), props.sources)
    props = nms(props, cfg.nms_rho, limit=cfg.max_proposals)
    spent["nms"] = clock() - t
    spent["total"] = clock() - t_start
    if timings is not None:
        timings.update(spent)
    return props


def run_many(
    images: Sequence[Callable[[], np.ndarray] | np.ndarray],
    cfg: PipelineConfig,
    model: bing.BinarizedModel,
    threads: int | None = None,
    with_timings: bool = False,
):
    """Run the pipeline over several images; results come back in input order.

    Items may be arrays or zero-argument loaders. With ``with_timings`` each
    result is a ``(proposals, timings)`` pair.
    """
    n_threads = max(1, threads if threads is not None else cfg.threads)

    def one(item):
        img = item() if callable(item) else item
        tm: dict = {}
        props = run_bingpp(img, cfg, model, tm)
        return (props, tm) if with_timings else props

    if n_threads == 1:
        return [one(it) for it in images]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(one, images))
