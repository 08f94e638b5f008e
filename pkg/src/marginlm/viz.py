"""Embedding-geometry analysis: projections, angles, norm correlation.

Quantifies how margin training reshapes the output word vectors: a polar
2-D projection (PCA then t-SNE) of the most frequent words aligned on a
reference word, full-dimensional angle reports for word pairs, the mean
pairwise angle as a dispersion measure, and the correlation between
vector norms and log word counts.

Angles come from the full-dimensional vectors, never from the 2-D
projection, so they are invariant under orthogonal transforms of the
embedding; the projection is only for pictures.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from sklearn.manifold import TSNE

from .corpus import Vocabulary

SVG_SIZE = 800
_PALETTE = ["#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d35400",
            "#16a085", "#7f8c8d", "#f39c12", "#2c3e50", "#e84393"]


@dataclass(frozen=True)
class ProjectionResult:
    """2-D layout of the top-k word vectors with polar coordinates."""

    words: list[str]
    xy: np.ndarray        # [k × 2]
    radius: np.ndarray    # [k]
    angle: np.ndarray     # [k], radians in (-pi, pi]
    seed: int
    reference: Optional[str] = None


def _wrap_angle(a: np.ndarray) -> np.ndarray:
    """Map angles into (-pi, pi]."""
    w = np.mod(a, 2.0 * np.pi)
    return np.where(w > np.pi, w - 2.0 * np.pi, w)


def pca(x: np.ndarray, dims: int) -> tuple[np.ndarray, np.ndarray,
                                           np.ndarray]:
    """Principal components via SVD with deterministic sign convention.

    Returns (coords [n × dims], components [dims × d], mean [d]); the
    original rows are ``coords @ components + mean`` up to truncation.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    dims = min(dims, vt.shape[0])
    comps = vt[:dims]
    # fix each component's sign by its largest-magnitude loading
    for i in range(dims):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T, comps, mean


def project(w_values: np.ndarray, vocab: Vocabulary, top_k: int = 100,
            seed: int = 0, pca_dims: int = 50,
            tsne_perplexity: float = 30.0,
            tsne_iters: int = 1000) -> ProjectionResult:
    """Project the ``top_k`` most frequent word vectors to 2-D.

    PCA reduces to ``pca_dims`` first, then exact-method t-SNE (seeded,
    initialized from the leading PCA pair) yields the final layout;
    the full pipeline is deterministic given the seed.
    """
    if top_k < 3:
        raise ValueError(f"top_k must be at least 3, got {top_k}")
    if top_k > len(vocab.words):
        raise ValueError(f"top_k {top_k} exceeds vocabulary size "
                         f"{len(vocab.words)}")
    rows = np.asarray(w_values, dtype=np.float64)[:top_k]
    coords, _, _ = pca(rows, min(pca_dims, rows.shape[1]))
    init = np.ascontiguousarray(coords[:, :2]) if coords.shape[1] >= 2 \
        else np.zeros((top_k, 2))
    if np.allclose(coords, 0.0):
        # identical input rows: every projected point coincides
        xy = np.zeros((top_k, 2))
    else:
        tsne = TSNE(n_components=2, method="exact", init=init,
                    random_state=seed,
                    perplexity=min(tsne_perplexity, (top_k - 1) / 3.0),
                    max_iter=tsne_iters)
        xy = np.asarray(tsne.fit_transform(coords), dtype=np.float64)
    radius = np.hypot(xy[:, 0], xy[:, 1])
    angle = _wrap_angle(np.arctan2(xy[:, 1], xy[:, 0]))
    return ProjectionResult(words=list(vocab.words[:top_k]), xy=xy,
                            radius=radius, angle=angle, seed=seed)


def align(projection: ProjectionResult,
          reference_word: str) -> ProjectionResult:
    """Rotate and rescale so the reference word sits at angle 0, radius 1.

    A rigid rotation plus one global scale: relative angles and radius
    ratios are untouched, and aligning twice equals aligning once.
    """
    try:
        idx = projection.words.index(reference_word)
    except ValueError:
        raise ValueError(f"reference word {reference_word!r} not in "
                         f"projection") from None
    r_ref = projection.radius[idx]
    if r_ref < 1e-12:
        raise ValueError(f"reference word {reference_word!r} projects to "
                         f"the origin; cannot align")
    angle = _wrap_angle(projection.angle - projection.angle[idx])
    radius = projection.radius / r_ref
    xy = np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])
    return replace(projection, xy=xy, radius=radius, angle=angle,
                   reference=reference_word)


def angle_report(w_values: np.ndarray, vocab: Vocabulary,
                 word_pairs: Sequence[tuple[str, str]]) -> np.ndarray:
    """Angle in radians between full-dimensional vectors of word pairs."""
    w = np.asarray(w_values, dtype=np.float64)
    out = np.empty(len(word_pairs))
    for i, (a, b) in enumerate(word_pairs):
        for word in (a, b):
            if word not in vocab:
                raise ValueError(f"word {word!r} not in vocabulary")
        va = w[vocab.id_of(a)]
        vb = w[vocab.id_of(b)]
        cos = float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))
        out[i] = math.acos(min(1.0, max(-1.0, cos)))
    return out


def dispersion(w_values: np.ndarray, top_k: int) -> float:
    """Mean pairwise angle among the top_k most frequent word vectors."""
    if top_k < 2:
        raise ValueError(f"top_k must be at least 2, got {top_k}")
    w = np.asarray(w_values, dtype=np.float64)[:top_k]
    unit = w / np.linalg.norm(w, axis=1, keepdims=True)
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    angles = np.arccos(cos)
    iu = np.triu_indices(top_k, k=1)
    return float(angles[iu].mean())


@dataclass(frozen=True)
class NormReport:
    """Per-word vector norms against counts, with their Pearson r."""

    words: list[str]
    counts: np.ndarray
    norms: np.ndarray
    correlation: float
    degenerate: bool


def norm_report(w_values: np.ndarray, vocab: Vocabulary) -> NormReport:
    """Correlate ||W_y|| with log c_y over the whole vocabulary.

    Zero counts contribute log 1 = 0.  A zero-variance side makes the
    correlation undefined; it is reported as 0 with ``degenerate`` set.
    """
    norms = np.linalg.norm(np.asarray(w_values, dtype=np.float64), axis=1)
    counts = np.asarray(vocab.counts)
    log_counts = np.log(np.maximum(counts, 1).astype(np.float64))
    if norms.std() == 0.0 or log_counts.std() == 0.0:
        corr, degenerate = 0.0, True
    else:
        corr = float(np.corrcoef(norms, log_counts)[0, 1])
        degenerate = False
    return NormReport(words=list(vocab.words), counts=counts.copy(),
                      norms=norms, correlation=corr, degenerate=degenerate)


# -- file output ----------------------------------------------------------


def write_projection_tsv(projection: ProjectionResult, path) -> None:
    """`word<TAB>x<TAB>y<TAB>radius<TAB>angle` rows, fixed formatting."""
    with open(path, "w", encoding="utf-8") as f:
        for i, word in enumerate(projection.words):
            f.write(f"{word}\t{projection.xy[i, 0]:.6f}"
                    f"\t{projection.xy[i, 1]:.6f}"
                    f"\t{projection.radius[i]:.6f}"
                    f"\t{projection.angle[i]:.6f}\n")


def write_angle_tsv(word_pairs: Sequence[tuple[str, str]],
                    angles: np.ndarray, path) -> None:
    """`word1<TAB>word2<TAB>angle_radians` rows."""
    with open(path, "w", encoding="utf-8") as f:
        for (a, b), angle in zip(word_pairs, angles):
            f.write(f"{a}\t{b}\t{angle:.6f}\n")


def write_norms_tsv(report: NormReport, path) -> None:
    """`rank<TAB>word<TAB>count<TAB>norm` rows plus a correlation footer."""
    with open(path, "w", encoding="utf-8") as f:
        for rank, (word, count, norm) in enumerate(
                zip(report.words, report.counts, report.norms)):
            f.write(f"{rank}\t{word}\t{int(count)}\t{norm:.6f}\n")
        flag = " degenerate" if report.degenerate else ""
        f.write(f"# pearson_norm_logcount\t{report.correlation:.6f}{flag}\n")


def write_polar_svg(projection: ProjectionResult, path,
                    title: str = "") -> None:
    """Fixed 800x800 polar scatter; byte-identical for identical inputs.

    Concentric gridlines at quarter fractions of the outermost radius;
    the ten most frequent words get distinct colors, the rest gray.
    """
    half = SVG_SIZE / 2.0
    r_max = float(projection.radius.max())
    if r_max <= 0.0:
        r_max = 1.0
    scale = (half - 60.0) / r_max

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_SIZE}" '
        f'height="{SVG_SIZE}" viewBox="0 0 {SVG_SIZE} {SVG_SIZE}">',
        f'<rect width="{SVG_SIZE}" height="{SVG_SIZE}" fill="white"/>',
    ]
    if title:
        parts.append(f'<text x="{half:.1f}" y="24" text-anchor="middle" '
                     f'font-size="16" font-family="sans-serif">'
                     f'{title}</text>')
    for frac in (0.25, 0.5, 0.75, 1.0):
        r = frac * r_max * scale
        parts.append(f'<circle cx="{half:.1f}" cy="{half:.1f}" '
                     f'r="{r:.2f}" fill="none" stroke="#dddddd" '
                     f'stroke-width="1"/>')
    parts.append(f'<line x1="60" y1="{half:.1f}" x2="{SVG_SIZE - 60}" '
                 f'y2="{half:.1f}" stroke="#dddddd" stroke-width="1"/>')
    parts.append(f'<line x1="{half:.1f}" y1="60" x2="{half:.1f}" '
                 f'y2="{SVG_SIZE - 60}" stroke="#dddddd" '
                 f'stroke-width="1"/>')
    for i, word in enumerate(projection.words):
        x = half + projection.xy[i, 0] * scale
        y = half - projection.xy[i, 1] * scale
        color = _PALETTE[i] if i < len(_PALETTE) else "#9a9a9a"
        safe = (word.replace("&", "&amp;").replace("<", "&lt;")
                .replace(">", "&gt;"))
        parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{x + 5:.2f}" y="{y - 4:.2f}" '
                     f'font-size="10" font-family="sans-serif" '
                     f'fill="{color}">{safe}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")
