"""Edge-guided splitting of large primitives.

Large Gaussians that sit on image edges blur high-frequency detail.  Each
training view contributes a per-primitive edge score (blend-weighted sum of
its Sobel edge map over covered pixels, normalized by the covered-pixel
count); scores are summed across views and primitives that are both large
and edge-heavy are split in place.
"""

from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianCloud, split_primitives
from .rasterizer import BlendRecord, RasterSettings, render

LUMA = np.array([0.299, 0.587, 0.114])
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T

# world-scale size gate used by clone-vs-split densification, as a fraction
# of the scene extent; the edge-splitting threshold is a multiple of it
BASE_SIZE_FRACTION = 0.01


class EssError(ValueError):
    pass


@dataclass(frozen=True)
class EssConfig:
    edge_threshold: float = 1e-3    # minimum aggregated score
    scale_multiplier: float = 50.0  # times the base densification size threshold
    interval: int = 500             # iterations between splitting rounds
    enabled: bool = True

    def __post_init__(self):
        if self.edge_threshold < 0:
            raise EssError("edge threshold must be non-negative")
        if self.scale_multiplier <= 0:
            raise EssError("scale multiplier must be positive")
        if self.interval < 1:
            raise EssError("interval must be at least 1")

    def scale_threshold(self, scene_extent: float) -> float:
        return self.scale_multiplier * BASE_SIZE_FRACTION * scene_extent


def sobel_edge_map(image: np.ndarray) -> np.ndarray:
    """Normalized Sobel gradient magnitude of the image luma.

    RGB images are reduced with Rec.601 weights; borders are replicated.
    The result is divided by its maximum so values lie in [0,1] (an all-flat
    image returns zeros).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 3:
            raise EssError(f"expected 3 channels, got {img.shape[2]}")
        img = img @ LUMA
    elif img.ndim != 2:
        raise EssError(f"expected HxW or HxWx3 image, got shape {img.shape}")
    pad = np.pad(img, 1, mode="edge")
    h, w = img.shape
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            win = pad[di:di + h, dj:dj + w]
            gx += SOBEL_X[di, dj] * win
            gy += SOBEL_Y[di, dj] * win
    mag = np.hypot(gx, gy)
    peak = mag.max()
    # flat images leave only rounding residue; report them as edge-free
    if peak <= 1e-12:
        return np.zeros_like(mag)
    return mag / peak


def per_view_edge_score(record: BlendRecord, edge_map: np.ndarray,
                        n_primitives: int):
    """Blend-weighted edge mass and covered-pixel count per primitive.

    scores[i] sums the primitive's blend weight times the pixel's edge value
    over every pixel it covers; counts[i] is the number of covered pixels
    (accepted blend samples) in this view.
    """
    edge = np.asarray(edge_map, dtype=np.float64)
    if edge.shape != (record.height, record.width):
        raise EssError(f"edge map shape {edge.shape} does not match "
                       f"render {(record.height, record.width)}")
    n_entries = int(record.pixel_offsets[-1])
    if n_entries == 0:
        return np.zeros(n_primitives), np.zeros(n_primitives, dtype=np.int64)
    pix = np.repeat(np.arange(record.width * record.height),
                    np.diff(record.pixel_offsets))
    w = record.alpha * record.t_before
    src = record.proj.source_index[record.slot]
    scores = np.bincount(src, weights=w * edge.ravel()[pix],
                         minlength=n_primitives)
    counts = np.bincount(src, minlength=n_primitives)
    return scores, counts.astype(np.int64)


@dataclass
class EdgeScoreTable:
    """Per-view raw scores and coverage counts, aggregated on demand."""
    n: int
    view_scores: list = field(default_factory=list)
    view_counts: list = field(default_factory=list)

    @property
    def n_views(self) -> int:
        return len(self.view_scores)

    def add_view(self, scores: np.ndarray, counts: np.ndarray):
        if len(scores) != self.n or len(counts) != self.n:
            raise EssError("per-view result length does not match table size")
        self.view_scores.append(np.asarray(scores, dtype=np.float64))
        self.view_counts.append(np.asarray(counts, dtype=np.int64))

    def aggregate(self) -> np.ndarray:
        """Sum over views of score/covered-count; uncovered views add 0."""
        out = np.zeros(self.n)
        for scores, counts in zip(self.view_scores, self.view_counts):
            seen = counts > 0
            out[seen] += scores[seen] / counts[seen]
        return out


def collect_edge_scores(cloud: GaussianCloud, cameras, images,
                        settings: RasterSettings = RasterSettings(),
                        background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Render every training view against its image and aggregate scores."""
    table = EdgeScoreTable(cloud.count)
    for camera, image in zip(cameras, images):
        _, record = render(cloud, camera, background=background,
                           settings=settings, want_record=True)
        edge = sobel_edge_map(image)
        table.add_view(*per_view_edge_score(record, edge, cloud.count))
    return table.aggregate()


def ess_mask(cloud: GaussianCloud, edge_scores: np.ndarray,
             scale_threshold: float, edge_threshold: float) -> np.ndarray:
    """Primitives that are both oversized and edge-heavy.

    Selected iff the largest activated world scale >= scale_threshold and
    the aggregated edge score >= edge_threshold.
    """
    if len(edge_scores) != cloud.count:
        raise EssError("edge score length does not match cloud size")
    if cloud.count == 0:
        return np.zeros(0, dtype=bool)
    big = cloud.scales().max(axis=1) >= scale_threshold
    edgy = np.asarray(edge_scores) >= edge_threshold
    return big & edgy


def apply_ess(cloud: GaussianCloud, edge_scores: np.ndarray, rng,
              config: EssConfig = EssConfig()):
    """Split the selected primitives; returns (new_cloud, mask, index_map).

    index_map gives, for every primitive of the new cloud, the index of its
    ancestor in the old cloud (survivors map to themselves, children map to
    their parent).  Optimizer state rows for children should be zeroed by
    the caller; the map identifies which rows they are (duplicated parents).
    """
    mask = ess_mask(cloud, edge_scores,
                    config.scale_threshold(cloud.scene_extent),
                    config.edge_threshold)
    if not mask.any():
        return cloud, mask, np.arange(cloud.count)
    new_cloud = split_primitives(cloud, mask, rng)
    survivors = np.nonzero(~mask)[0]
    parents = np.nonzero(mask)[0]
    index_map = np.concatenate([survivors, np.repeat(parents, 2)])
    return new_cloud, mask, index_map
