"""Synthetic long-tailed segmentation scenes, frequency analysis, grouping and label masking.

A scene is a head-category background split by a horizontal boundary, body
rectangles painted on top, and thin tail bars that live inside (or right next
to) a rectangle of their fixed host body category. Per-pixel features are
noisy category embeddings blended with their 4-neighbourhood, so thin tail
structures pick up the signature of their host.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

IGNORE = 255

HEAD, BODY, TAIL = "head", "body", "tail"
GROUPS = (HEAD, BODY, TAIL)

HEAD_DECAY = 0.9


@dataclass(frozen=True)
class SceneSample:
    features: np.ndarray  # (H, W, D) float32
    labels: np.ndarray  # (H, W) uint8, IGNORE for unlabeled

    def __post_init__(self):
        if self.features.ndim != 3 or self.labels.ndim != 2:
            raise ValueError("features must be (H, W, D) and labels (H, W)")
        if self.features.shape[:2] != self.labels.shape:
            raise ValueError(
                f"feature grid {self.features.shape[:2]} does not match label grid {self.labels.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class FrequencyProfile:
    counts: np.ndarray  # int64, per category
    freqs: np.ndarray
    total: int

    @property
    def c(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class ExplicitCounts:
    n_head: int
    n_body: int
    n_tail: int


@dataclass(frozen=True)
class Thresholds:
    t_head: float
    t_body: float


GroupingMode = ExplicitCounts | Thresholds


@dataclass(frozen=True)
class CategoryGrouping:
    """Frequency-ranked categories and the nested expert label sets.

    ``order[r]`` is the category at rank ``r`` (0 = most frequent); ``c_b`` and
    ``c_t`` are the ranks of the first body and first tail category.
    """

    order: tuple[int, ...]
    c_b: int
    c_t: int
    group_of: dict[int, str]
    expert_sets: tuple[frozenset, ...]

    @property
    def c(self) -> int:
        return len(self.order)

    @property
    def K(self) -> int:
        return len(self.expert_sets)

    def members(self, group: str) -> list[int]:
        return sorted(k for k, g in self.group_of.items() if g == group)

    def with_experts(self, k: int) -> "CategoryGrouping":
        """Same partition, keeping only the first ``k`` expert label sets."""
        return CategoryGrouping(self.order, self.c_b, self.c_t, dict(self.group_of), self.expert_sets[:k])

    def to_dict(self) -> dict:
        return {
            "order": list(self.order),
            "c_b": self.c_b,
            "c_t": self.c_t,
            "expert_sets": [sorted(s) for s in self.expert_sets],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CategoryGrouping":
        order = tuple(int(k) for k in d["order"])
        c_b, c_t = int(d["c_b"]), int(d["c_t"])
        group_of = _groups_from_ranks(order, c_b, c_t)
        return cls(order, c_b, c_t, group_of, tuple(frozenset(int(k) for k in s) for s in d["expert_sets"]))


@dataclass
class GeneratorConfig:
    H: int = 64
    W: int = 64
    c: int = 12
    n_head: int = 2
    n_body: int = 4
    n_tail: int = 6
    D: int = 8
    gamma: float = 0.5
    sigma: float = 0.3
    n_scenes: int = 200
    seed: int = 0
    target_shares: tuple[float, float, float] = (0.8, 0.15, 0.05)
    rect_side: tuple[int, int] = (8, 20)
    host_inside_prob: float = 0.7

    def validate(self) -> None:
        if self.c < 3:
            raise ValueError(f"need at least 3 categories for a head/body/tail split, got c={self.c}")
        sizes = (self.n_head, self.n_body, self.n_tail)
        if min(sizes) <= 0:
            raise ValueError(f"every group needs at least one category, got sizes {sizes}")
        if sum(sizes) != self.c:
            raise ValueError(f"group sizes {sizes} do not sum to c={self.c}")
        if self.c > IGNORE:
            raise ValueError(f"c={self.c} collides with the ignore label {IGNORE}")
        if self.gamma < 0 or self.sigma < 0:
            raise ValueError("gamma and sigma must be non-negative")
        if len(self.target_shares) != 3 or any(s < 0 for s in self.target_shares):
            raise ValueError("target_shares must be three non-negative fractions")
        if abs(sum(self.target_shares) - 1.0) > 1e-9:
            raise ValueError(f"target_shares must sum to 1, got {sum(self.target_shares)}")
        if min(self.H, self.W) < self.rect_side[0] + 2:
            raise ValueError("grid too small for the configured rectangle sizes")
        if self.D < 2:
            raise ValueError("feature dimension must be at least 2")

    @property
    def head_ids(self) -> list[int]:
        return list(range(self.n_head))

    @property
    def body_ids(self) -> list[int]:
        return list(range(self.n_head, self.n_head + self.n_body))

    @property
    def tail_ids(self) -> list[int]:
        return list(range(self.n_head + self.n_body, self.c))

    def host_of(self, tail: int) -> int:
        """Fixed host body category of a tail category."""
        j = tail - self.n_head - self.n_body
        return self.n_head + j % self.n_body

    def confusable_pair(self) -> tuple[int, int] | None:
        tails = self.tail_ids
        return (tails[0], tails[1]) if len(tails) >= 2 else None


# ---------------------------------------------------------------------------
# generation


def _scene_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, index)))


def category_embeddings(cfg: GeneratorConfig) -> np.ndarray:
    """Seeded unit embeddings (c, D); the confusable tail pair has cosine >= 0.95."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2**31 - 1,)))
    emb = rng.standard_normal((cfg.c, cfg.D))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    pair = cfg.confusable_pair()
    if pair is not None:
        a, b = pair
        v = emb[a] + 0.2 * emb[b]
        v /= np.linalg.norm(v)
        emb[b] = v
    return emb.astype(np.float32)


def _geometric_weights(n: int, ratio: float) -> np.ndarray:
    w = ratio ** np.arange(n)
    return w / w.sum()


def _touches(host: np.ndarray, oy: int, ox: int, h: int, w: int) -> bool:
    """Does every cell of the ``h`` x ``w`` box at ``(oy, ox)`` have a host cell within Chebyshev distance 2?"""
    hit = ndimage.maximum_filter(host.astype(np.uint8), size=5, mode="constant")
    return bool(hit[oy : oy + h, ox : ox + w].all())


def _draw_scene_labels(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    H, W = cfg.H, cfg.W
    npix = H * W
    head_w = _geometric_weights(cfg.n_head, HEAD_DECAY)
    body_w = _geometric_weights(cfg.n_body, 0.7)
    tail_w = _geometric_weights(cfg.n_tail, 0.75)

    # head background: horizontal bands, sizes drawn around the head weights
    labels = np.empty((H, W), dtype=np.uint8)
    shares = rng.dirichlet(40 * head_w)
    order = rng.permutation(cfg.n_head)
    edges = np.round(np.cumsum(shares[order]) * H).astype(int)
    start = 0
    for k, end in zip(order, edges):
        labels[start:end] = cfg.head_ids[k]
        start = end
    labels[start:] = cfg.head_ids[order[-1]]

    _, share_body, share_tail = cfg.target_shares
    jitter = rng.uniform(0.7, 1.3)
    body_quota = share_body * npix * jitter
    tail_quota = share_tail * npix * jitter

    is_body = np.isin(labels, cfg.body_ids)
    rects: list[tuple[int, int, int, int, int]] = []  # (cat, y0, x0, h, w)
    lo, hi = cfg.rect_side
    hi = min(hi, H - 2, W - 2)
    attempts = 0
    while is_body.sum() < body_quota and attempts < 200:
        attempts += 1
        cat = cfg.body_ids[rng.choice(cfg.n_body, p=body_w)]
        h, w = rng.integers(lo, hi + 1, size=2)
        y0 = int(rng.integers(0, H - h + 1))
        x0 = int(rng.integers(0, W - w + 1))
        labels[y0 : y0 + h, x0 : x0 + w] = cat
        rects.append((cat, y0, x0, int(h), int(w)))
        is_body = np.isin(labels, cfg.body_ids)
    if not rects:
        return labels

    # tail bars, only for categories whose host is visible in this scene
    tail_count = 0
    attempts = 0
    while tail_count < tail_quota and attempts < 400:
        attempts += 1
        tail = cfg.tail_ids[rng.choice(cfg.n_tail, p=tail_w)]
        host = cfg.host_of(tail)
        hosts = [r for r in rects if r[0] == host and (labels[r[1] : r[1] + r[3], r[2] : r[2] + r[4]] == host).any()]
        if not hosts:
            continue
        _, y0, x0, h, w = hosts[rng.integers(len(hosts))]
        thick = int(rng.integers(1, 3))
        horizontal = bool(rng.integers(2))
        inside = rng.random() < cfg.host_inside_prob
        if horizontal:
            length = int(rng.integers(max(2, w // 3), max(3, w - 1)))
            bx = x0 + int(rng.integers(0, w - length + 1))
            if inside:
                by = y0 + int(rng.integers(1, max(2, h - thick)))
            else:
                by = y0 - thick if rng.random() < 0.5 else y0 + h
            ys, xs = slice(by, by + thick), slice(bx, bx + length)
        else:
            length = int(rng.integers(max(2, h // 3), max(3, h - 1)))
            by = y0 + int(rng.integers(0, h - length + 1))
            if inside:
                bx = x0 + int(rng.integers(1, max(2, w - thick)))
            else:
                bx = x0 - thick if rng.random() < 0.5 else x0 + w
            ys, xs = slice(by, by + length), slice(bx, bx + thick)
        if ys.start < 0 or xs.start < 0 or ys.stop > H or xs.stop > W:
            continue
        # later rectangles may have covered the host; keep only bars still touching it
        near = labels[max(ys.start - 2, 0) : ys.stop + 2, max(xs.start - 2, 0) : xs.stop + 2] == host
        if not _touches(near, ys.start - max(ys.start - 2, 0), xs.start - max(xs.start - 2, 0), ys.stop - ys.start, xs.stop - xs.start):
            continue
        region = labels[ys, xs]
        tail_count += int(np.count_nonzero(~np.isin(region, cfg.tail_ids)))
        region[...] = tail
    return labels


def _render_features(labels: np.ndarray, emb: np.ndarray, gamma: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    e = emb.astype(np.float64)[labels]
    p = np.pad(e, ((1, 1), (1, 1), (0, 0)), mode="edge")
    neigh = (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]) / 4.0
    noise = rng.standard_normal(e.shape)
    feats = e + gamma * neigh + sigma * noise
    return feats.astype(np.float32)


def generate_scene(cfg: GeneratorConfig, index: int, stream: int = 0, emb: np.ndarray | None = None) -> SceneSample:
    """One scene, drawn from its own (seed, stream, index) RNG stream."""
    if emb is None:
        emb = category_embeddings(cfg)
    rng = _scene_rng(cfg.seed, stream, index)
    labels = _draw_scene_labels(cfg, rng)
    feats = _render_features(labels, emb, cfg.gamma, cfg.sigma, rng)
    return SceneSample(feats, labels)


def generate_dataset(cfg: GeneratorConfig, stream: int = 0) -> list[SceneSample]:
    """Generate ``cfg.n_scenes`` scenes.

    ``stream`` separates disjoint splits (0 = train, 1 = test) that share the
    category embeddings of ``cfg.seed``. Scenes are independent, so the list
    can be produced in any order or in parallel with identical results.
    """
    cfg.validate()
    emb = category_embeddings(cfg)
    return [generate_scene(cfg, i, stream, emb) for i in range(cfg.n_scenes)]


# ---------------------------------------------------------------------------
# frequency and grouping


def compute_frequency(dataset: Sequence[SceneSample], c: int | None = None) -> FrequencyProfile:
    if not dataset:
        raise ValueError("empty dataset")
    labels = np.concatenate([s.labels.ravel() for s in dataset])
    valid = labels[labels != IGNORE]
    if valid.size == 0:
        raise ValueError("dataset has no labeled pixels")
    if c is None:
        c = int(valid.max()) + 1
    counts = np.bincount(valid, minlength=c).astype(np.int64)
    if len(counts) > c:
        raise ValueError(f"label {len(counts) - 1} out of range for c={c}")
    total = int(counts.sum())
    return FrequencyProfile(counts, counts / total, total)


def _groups_from_ranks(order: Sequence[int], c_b: int, c_t: int) -> dict[int, str]:
    group_of = {}
    for rank, k in enumerate(order):
        group_of[int(k)] = HEAD if rank < c_b else BODY if rank < c_t else TAIL
    return group_of


def make_grouping(profile: FrequencyProfile, mode: GroupingMode) -> CategoryGrouping:
    c = profile.c
    # descending frequency, ties to the lower category id
    order = tuple(int(k) for k in np.lexsort((np.arange(c), -profile.counts)))
    if isinstance(mode, ExplicitCounts):
        sizes = (mode.n_head, mode.n_body, mode.n_tail)
        if min(sizes) <= 0 or sum(sizes) != c:
            raise ValueError(f"group sizes {sizes} must be positive and sum to c={c}")
        c_b, c_t = mode.n_head, mode.n_head + mode.n_body
    elif isinstance(mode, Thresholds):
        f = profile.freqs[list(order)]
        c_b = int(np.count_nonzero(f >= mode.t_head))
        c_t = int(np.count_nonzero(f >= mode.t_body))
        if not (0 < c_b < c_t < c):
            raise ValueError(
                f"thresholds ({mode.t_head}, {mode.t_body}) leave an empty group "
                f"(head={c_b}, body={c_t - c_b}, tail={c - c_t})"
            )
    else:
        raise TypeError(f"unknown grouping mode {mode!r}")
    group_of = _groups_from_ranks(order, c_b, c_t)
    expert_sets = (frozenset(order), frozenset(order[c_b:]), frozenset(order[c_t:]))
    return CategoryGrouping(order, c_b, c_t, group_of, expert_sets)


# ---------------------------------------------------------------------------
# masking and resampling


def mask_label_grid(labels: np.ndarray, allowed: Iterable[int]) -> np.ndarray:
    allowed = np.fromiter(allowed, dtype=np.int64)
    if allowed.size == 0:
        raise ValueError("allowed label set is empty")
    return np.where(np.isin(labels, allowed), labels, IGNORE).astype(labels.dtype)


def mask_labels(sample: SceneSample, allowed: Iterable[int]) -> SceneSample:
    """Relabel pixels outside ``allowed`` as IGNORE; the feature grid is shared, not copied."""
    return SceneSample(sample.features, mask_label_grid(sample.labels, allowed))


def uniform_resample(dataset: Sequence[SceneSample], quota: int | str = "auto", seed: int = 0) -> list[SceneSample]:
    """Keep exactly ``min(quota, available)`` labeled pixels per category, chosen uniformly at random."""
    shape = dataset[0].labels.shape
    flat = np.concatenate([s.labels.ravel() for s in dataset])
    present = np.unique(flat[flat != IGNORE])
    if present.size == 0:
        raise ValueError("dataset has no labeled pixels")
    c = int(present.max()) + 1
    counts = np.bincount(flat[flat != IGNORE], minlength=c)
    if quota == "auto":
        if (counts == 0).any():
            missing = np.flatnonzero(counts == 0).tolist()
            raise ValueError(f"categories {missing} absent; auto quota needs every category present")
        quota = int(counts.min())
    quota = int(quota)
    rng = np.random.default_rng(seed)
    out = np.full_like(flat, IGNORE)
    for k in range(c):
        idx = np.flatnonzero(flat == k)
        keep = idx if idx.size <= quota else np.sort(rng.choice(idx, size=quota, replace=False))
        out[keep] = k
    out = out.reshape(len(dataset), *shape)
    return [SceneSample(s.features, out[i]) for i, s in enumerate(dataset)]


def group_shares(profile: FrequencyProfile, grouping: CategoryGrouping) -> dict[str, float]:
    return {g: float(sum(profile.freqs[k] for k in grouping.members(g))) for g in GROUPS}


# ---------------------------------------------------------------------------
# MEDS dataset file

_MEDS_MAGIC = b"MEDS"
_MEDS_HEADER = struct.Struct("<4sIIIIIIQ")


def save_dataset(path: str | Path, dataset: Sequence[SceneSample], c: int, seed: int) -> None:
    H, W = dataset[0].labels.shape
    D = dataset[0].features.shape[2]
    with open(path, "wb") as f:
        f.write(_MEDS_HEADER.pack(_MEDS_MAGIC, 1, H, W, c, D, len(dataset), seed))
        for s in dataset:
            if s.labels.shape != (H, W) or s.features.shape != (H, W, D):
                raise ValueError("all scenes must share the same dimensions")
            f.write(np.ascontiguousarray(s.features, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())


@dataclass(frozen=True)
class DatasetHeader:
    H: int
    W: int
    c: int
    D: int
    n_scenes: int
    seed: int


def read_dataset_header(path: str | Path) -> DatasetHeader:
    with open(path, "rb") as f:
        raw = f.read(_MEDS_HEADER.size)
    return _parse_header(raw, path)


def _parse_header(raw: bytes, path) -> DatasetHeader:
    if len(raw) < _MEDS_HEADER.size:
        raise ValueError(f"{path}: truncated dataset header")
    magic, version, H, W, c, D, n, seed = _MEDS_HEADER.unpack(raw[: _MEDS_HEADER.size])
    if magic != _MEDS_MAGIC:
        raise ValueError(f"{path}: not a dataset file (magic {magic!r})")
    if version != 1:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    return DatasetHeader(H, W, c, D, n, seed)


def load_dataset(path: str | Path) -> tuple[DatasetHeader, list[SceneSample]]:
    raw = Path(path).read_bytes()
    hdr = _parse_header(raw, path)
    nfeat = hdr.H * hdr.W * hdr.D
    nlab = hdr.H * hdr.W
    expected = _MEDS_HEADER.size + hdr.n_scenes * (4 * nfeat + nlab)
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    scenes = []
    off = _MEDS_HEADER.size
    for _ in range(hdr.n_scenes):
        feats = np.frombuffer(raw, dtype="<f4", count=nfeat, offset=off).reshape(hdr.H, hdr.W, hdr.D)
        off += 4 * nfeat
        labels = np.frombuffer(raw, dtype=np.uint8, count=nlab, offset=off).reshape(hdr.H, hdr.W)
        off += nlab
        scenes.append(SceneSample(feats.astype(np.float32), labels.copy()))
    return hdr, scenes


def stack(dataset: Sequence[SceneSample]) -> tuple[np.ndarray, np.ndarray]:
    """(N, H, W, D) features and (N, H, W) labels."""
    return np.stack([s.features for s in dataset]), np.stack([s.labels for s in dataset])
