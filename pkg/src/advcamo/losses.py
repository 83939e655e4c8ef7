"""Attack objectives: separable attention terms, 3-D smoothness, printability.

The attention loss suppresses foreground attention and amplifies background
attention, each combining a region mean with a top-k concentration ratio.
All terms are taped scalars, so one backward pass yields texture gradients.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .scene import Mesh

RATIO_EPS = 1e-6
PAPER_IMAGE_SIZE = 608
MIN_TOPK = 4
ATTENTION_ITEMS = ("fas", "baa", "fas+baa")


class LossError(Exception):
    pass


@dataclass
class LossWeights:
    """alpha1/alpha2 weight the attention terms, k is the top-k size at
    reference resolution, beta and gamma weight smoothness and printability."""

    alpha1: float = 5.0
    alpha2: float = 1.0
    k: int = 100
    beta: float = 0.1
    gamma: float = 0.01

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.beta, self.gamma) < 0:
            raise LossError("loss weights must be non-negative")
        if self.k < 1:
            raise LossError("k must be at least 1")


def effective_topk(k: int, image_size: int) -> int:
    """Scale a reference-resolution k to the working image size."""
    scaled = int(round(k * (image_size / PAPER_IMAGE_SIZE) ** 2))
    return max(MIN_TOPK, scaled)


@dataclass
class PrintablePalette:
    colors: np.ndarray  # (P, 3) in [0, 1]

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.colors.ndim != 2 or self.colors.shape[1] != 3 or len(self.colors) == 0:
            raise LossError("palette must be a non-empty (P, 3) array")
        if self.colors.min() < 0 or self.colors.max() > 1:
            raise LossError("palette colors must lie in [0, 1]")


def load_palette(path) -> PrintablePalette:
    """One 'r g b' float triple per line; blank lines and # comments skipped."""
    colors = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise LossError(f"palette line needs three floats: {line!r}")
            colors.append([float(p) for p in parts])
    return PrintablePalette(np.asarray(colors))


def default_palette() -> PrintablePalette:
    ref = importlib.resources.files("advcamo").joinpath("data/palette30.txt")
    with importlib.resources.as_file(ref) as path:
        return load_palette(path)


@dataclass
class LossBreakdown:
    """Scalar loss values plus the taped total for backpropagation."""

    l_fas: float
    l_baa: float
    l_s3d: float
    l_nps: float
    l_total: float
    total: dc.Tensor
    terms: dict = field(default_factory=dict)  # name -> Tensor
    grad_norms: dict | None = None  # name -> float, filled on request


# ---------------------------------------------------------------------------
# region statistics


def _region_indices(mask) -> np.ndarray:
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise LossError("empty region")
    return idx


def region_mean(map_t, mask) -> dc.Tensor:
    """Mean of the map over nonzero mask entries."""
    m = map_t if isinstance(map_t, dc.Tensor) else dc.Tensor(np.asarray(map_t, dtype=np.float64))
    idx = _region_indices(mask)
    vals = dc.take(m, idx)
    return dc.mul(dc.reduce_sum(vals), dc.Tensor(np.float64(1.0 / idx.size)))


def topk_mean(map_t, mask, k: int) -> dc.Tensor:
    """Mean of the k largest masked values; k clips to the region size."""
    m = map_t if isinstance(map_t, dc.Tensor) else dc.Tensor(np.asarray(map_t, dtype=np.float64))
    idx = _region_indices(mask)
    if k < 1:
        raise LossError("k must be at least 1")
    vals = dc.take(m, idx)
    kk = min(k, idx.size)
    top, _ = dc.topk(vals, kk)
    return dc.reduce_mean(top)


# ---------------------------------------------------------------------------
# loss terms


def fas_baa(stack, weights: LossWeights):
    """Foreground suppression and background amplification terms.

    Each combines the region mean with the top-k/mean concentration ratio,
    denominator guarded by a small epsilon. An all-foreground mask yields a
    zero background term rather than an error. k is scaled to the map size.
    """
    mask = np.asarray(stack.mask)
    fg = mask != 0
    if not fg.any():
        raise LossError("empty foreground: attack is ill-posed with no visible object")
    size = mask.shape[0]
    k_eff = effective_topk(weights.k, size)
    eps = dc.Tensor(np.float64(RATIO_EPS))

    mean_f = region_mean(stack.s_fg, fg)
    phi_f = topk_mean(stack.s_fg, fg, k_eff)
    l_fas = dc.add(
        dc.mul(dc.Tensor(np.float64(weights.alpha1)), mean_f),
        dc.mul(dc.Tensor(np.float64(weights.alpha2)), dc.div(phi_f, dc.add(mean_f, eps))),
    )

    bg = mask == 0
    if not bg.any():
        return l_fas, dc.Tensor(np.float64(0.0))
    mean_b = region_mean(stack.s_bg, bg)
    phi_b = topk_mean(stack.s_bg, bg, k_eff)
    l_baa = dc.neg(
        dc.add(
            dc.mul(dc.Tensor(np.float64(weights.alpha1)), mean_b),
            dc.mul(dc.Tensor(np.float64(weights.alpha2)), dc.div(phi_b, dc.add(mean_b, eps))),
        )
    )
    return l_fas, l_baa


def smooth_3d(texture, mesh: Mesh) -> dc.Tensor:
    """Edge-length-weighted L1 difference between adjacent face colors."""
    t = texture if isinstance(texture, dc.Tensor) else dc.Tensor(np.asarray(texture, dtype=np.float64))
    if not mesh.edges:
        return dc.Tensor(np.float64(0.0))
    ii = np.asarray([e[0] for e in mesh.edges], dtype=np.int64)
    jj = np.asarray([e[1] for e in mesh.edges], dtype=np.int64)
    lengths = np.asarray([e[2] for e in mesh.edges], dtype=np.float64)
    ch = np.arange(3, dtype=np.int64)[None, :]
    a = dc.take(t, ii[:, None] * 3 + ch)
    b = dc.take(t, jj[:, None] * 3 + ch)
    per_edge = dc.reduce_sum(dc.absolute(dc.sub(a, b)), axis=1)
    return dc.reduce_sum(dc.mul(per_edge, dc.Tensor(lengths)))


def nps(texture, palette: PrintablePalette) -> dc.Tensor:
    """Sum over faces of the L1 distance to the nearest printable color."""
    t = texture if isinstance(texture, dc.Tensor) else dc.Tensor(np.asarray(texture, dtype=np.float64))
    best = None
    for color in palette.colors:
        d = dc.reduce_sum(dc.absolute(dc.sub(t, dc.Tensor(color[None, :]))), axis=1)
        best = d if best is None else dc.minimum(best, d)
    return dc.reduce_sum(best)


def total_loss(
    stack,
    texture,
    mesh: Mesh,
    palette: PrintablePalette,
    weights: LossWeights,
    items: str = "fas+baa",
) -> LossBreakdown:
    """Combined objective; disabled attention items report as exact zeros."""
    if items not in ATTENTION_ITEMS:
        raise LossError(f"attention items must be one of {ATTENTION_ITEMS}")
    l_fas, l_baa = fas_baa(stack, weights)
    zero = dc.Tensor(np.float64(0.0))
    if items == "fas":
        l_baa = zero
    elif items == "baa":
        l_fas = zero
    l_s3d = smooth_3d(texture, mesh)
    l_nps = nps(texture, palette)
    total = dc.add(
        dc.add(l_fas, l_baa),
        dc.add(
            dc.mul(dc.Tensor(np.float64(weights.beta)), l_s3d),
            dc.mul(dc.Tensor(np.float64(weights.gamma)), l_nps),
        ),
    )
    return LossBreakdown(
        l_fas=l_fas.item(),
        l_baa=l_baa.item(),
        l_s3d=l_s3d.item(),
        l_nps=l_nps.item(),
        l_total=total.item(),
        total=total,
        terms={"fas": l_fas, "baa": l_baa, "s3d": l_s3d, "nps": l_nps},
    )


def fill_grad_norms(breakdown: LossBreakdown, tape: dc.Tape, texture: dc.Tensor) -> LossBreakdown:
    """Per-term gradient norms w.r.t. the texture (one backward per term)."""
    norms = {}
    for name, term in list(breakdown.terms.items()) + [("total", breakdown.total)]:
        if term.requires_grad:
            (g,) = tape.grad(term, [texture])
            norms[name] = float(np.linalg.norm(g.data))
        else:
            norms[name] = 0.0
    breakdown.grad_norms = norms
    return breakdown
