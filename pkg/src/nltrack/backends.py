"""Perception backends: feature extractor, sentence encoder and 1x1 projection heads.

The toy extractor turns an RGB crop into a ``(24, H/8, W/8)`` map of per-cell color
statistics, gradient-orientation histograms and neighborhood color contrast. The toy sentence encoder is a
normalized bag of words over a fixed vocabulary with hashed out-of-vocabulary
buckets. Heads are plain affine maps over channels (batch norm folded in).
"""

from __future__ import annotations

import hashlib
import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from nltrack import kernels
from nltrack.tensor import ShapeError, check_feature_map

DEFAULT_VOCABULARY = (
    "red", "green", "blue", "yellow",
    "square", "circle", "triangle",
    "moving", "left", "right", "up", "down", "around",
    "the", "a", "object",
)
OOV_BUCKETS = 64
_TOKEN = re.compile(r"[a-z0-9]+")


class UnusableQuery(ValueError):
    """The NL description carries no usable tokens."""


class FeatureExtractor(Protocol):
    channels: int
    stride: int

    def extract(self, crop: np.ndarray) -> np.ndarray: ...


class SentenceEncoder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


def _check_image(crop: np.ndarray, stride: int) -> np.ndarray:
    crop = np.asarray(crop)
    if crop.ndim != 3 or crop.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) RGB crop, got shape {crop.shape}")
    h, w = crop.shape[:2]
    if h < stride or w < stride or h % stride or w % stride:
        raise ShapeError(f"crop {w}x{h} is not a positive multiple of stride {stride}")
    return crop


def _side_contrast(m: np.ndarray, reach: int, axis: int) -> np.ndarray:
    """Mean of the next ``reach`` cells minus mean of the previous ``reach`` cells along ``axis``."""
    pad = [(0, 0)] * m.ndim
    pad[axis] = (reach, reach)
    means = sliding_window_view(np.pad(m, pad, mode="edge"), reach, axis=axis).mean(axis=-1)
    n = m.shape[axis]
    after = np.take(means, np.arange(n) + reach + 1, axis=axis)
    before = np.take(means, np.arange(n), axis=axis)
    return after - before


class ToyFeatureExtractor:
    """Per-cell descriptor: 8 color statistics, an 8-bin gradient orientation
    histogram, and horizontal/vertical contrast of 4 color statistics over
    ``reach`` neighboring cells (which tells a cell where the blob it sits in
    extends)."""

    channels = 24
    stride = 8

    def __init__(self, stride: int = 8, grad_gain: float = 4.0, reach: int = 3):
        self.stride = stride
        self.grad_gain = grad_gain
        self.reach = reach

    def extract(self, crop: np.ndarray) -> np.ndarray:
        crop = _check_image(crop, self.stride)
        stats = kernels.cell_stats(crop, self.stride, self.grad_gain)
        base = stats[[3, 4, 5, 6]]
        ctx = np.concatenate([_side_contrast(base, self.reach, 2), _side_contrast(base, self.reach, 1)])
        return np.ascontiguousarray(np.concatenate([stats, ctx], axis=0))


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class BagOfWordsEncoder:
    """L2-normalized token counts over ``vocabulary`` plus hashed OOV buckets."""

    def __init__(self, vocabulary=DEFAULT_VOCABULARY, oov_buckets: int = OOV_BUCKETS):
        self.vocabulary = tuple(vocabulary)
        self.index = {tok: i for i, tok in enumerate(self.vocabulary)}
        self.oov_buckets = oov_buckets
        self.dim = len(self.vocabulary) + oov_buckets

    @classmethod
    def from_file(cls, path, oov_buckets: int = OOV_BUCKETS) -> "BagOfWordsEncoder":
        words = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
        return cls([w for w in words if w], oov_buckets)

    def save_vocabulary(self, path) -> None:
        Path(path).write_text("".join(f"{w}\n" for w in self.vocabulary), encoding="utf-8")

    def token_index(self, tok: str) -> int:
        if tok in self.index:
            return self.index[tok]
        return len(self.vocabulary) + zlib.crc32(tok.encode("utf-8")) % self.oov_buckets

    def counts(self, text: str) -> np.ndarray:
        toks = tokenize(text or "")
        if not toks:
            raise UnusableQuery(f"NL description {text!r} has no tokens")
        vec = np.zeros(self.dim)
        for tok in toks:
            vec[self.token_index(tok)] += 1.0
        return vec

    def embed(self, text: str) -> np.ndarray:
        vec = self.counts(text)
        return vec / np.linalg.norm(vec)


@dataclass
class ProjectionHead:
    """Affine channel map ``out = weight.T @ x + bias``; ``weight`` is (in, out)."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"head weight {self.weight.shape} and bias {self.bias.shape} disagree")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise ShapeError("head parameters must be finite")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def zeros(cls, n_in: int, n_out: int) -> "ProjectionHead":
        return cls(np.zeros((n_in, n_out)), np.zeros(n_out))

    @classmethod
    def identity(cls, n: int) -> "ProjectionHead":
        return cls(np.eye(n), np.zeros(n))

    def apply(self, fm: np.ndarray) -> np.ndarray:
        """Apply as a 1x1 convolution over a ``(C, H, W)`` map."""
        if fm.shape[0] != self.in_channels:
            raise ShapeError(f"head expects {self.in_channels} channels, map has shape {fm.shape}")
        return np.einsum("co,chw->ohw", self.weight, fm, optimize=True) + self.bias[:, None, None]

    def apply_vector(self, v: np.ndarray) -> np.ndarray:
        if v.shape != (self.in_channels,):
            raise ShapeError(f"head expects a {self.in_channels}-vector, got shape {v.shape}")
        return self.weight.T @ v + self.bias

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(self.weight.copy(), self.bias.copy())


@dataclass
class NLKernel:
    cls_kernel: np.ndarray
    reg_kernel: np.ndarray


HEAD_NAMES = (
    "siam_cls_x", "siam_cls_z", "siam_cls_out",
    "siam_reg_x", "siam_reg_z", "siam_reg_out",
    "nl_cls_x", "nl_cls_q", "nl_cls_out",
    "nl_reg_x", "nl_reg_q", "nl_reg_out",
)


@dataclass
class Model:
    """All projection heads of both branches plus the perception backends."""

    heads: dict[str, ProjectionHead]
    k: int = 5
    nl_kernel_size: int = 1
    extractor: FeatureExtractor = field(default_factory=ToyFeatureExtractor)
    encoder: BagOfWordsEncoder = field(default_factory=BagOfWordsEncoder)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, k: int = 5, seed: int = 0, embed_dim: int | None = None,
                nl_kernel_size: int = 1, init_scale: float = 0.05) -> "Model":
        """Identity-initialized projections and small random output heads."""
        extractor = ToyFeatureExtractor()
        encoder = BagOfWordsEncoder()
        c = extractor.channels
        e = embed_dim or encoder.dim
        s2 = nl_kernel_size * nl_kernel_size
        rng = np.random.default_rng(seed)

        def rand(n_in, n_out):
            return ProjectionHead(rng.normal(0.0, init_scale, (n_in, n_out)), np.zeros(n_out))

        heads = {
            "siam_cls_x": ProjectionHead.identity(c), "siam_cls_z": ProjectionHead.identity(c),
            "siam_cls_out": rand(c, 2 * k),
            "siam_reg_x": ProjectionHead.identity(c), "siam_reg_z": ProjectionHead.identity(c),
            "siam_reg_out": rand(c, 4 * k),
            "nl_cls_x": ProjectionHead.identity(c), "nl_cls_q": rand(e, c * s2),
            "nl_cls_out": rand(c, 2 * k),
            "nl_reg_x": ProjectionHead.identity(c), "nl_reg_q": rand(e, c * s2),
            "nl_reg_out": rand(c, 4 * k),
        }
        return cls(heads, k=k, nl_kernel_size=nl_kernel_size, extractor=extractor,
                   encoder=encoder, seed=seed)

    def copy(self) -> "Model":
        return Model({n: h.copy() for n, h in self.heads.items()}, self.k, self.nl_kernel_size,
                     self.extractor, self.encoder, self.seed, dict(self.meta))

    def extract_features(self, crop: np.ndarray) -> np.ndarray:
        return self.extractor.extract(crop)

    def embed_sentence(self, text: str) -> np.ndarray:
        return self.encoder.embed(text)

    def nl_kernel(self, embedding: np.ndarray) -> NLKernel:
        return build_nl_kernel(embedding, self.heads["nl_cls_q"], self.heads["nl_reg_q"],
                               self.heads["nl_cls_x"].out_channels, self.nl_kernel_size)

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        shapes = {}
        for name in HEAD_NAMES:
            head = self.heads[name]
            np.save(out / f"{name}.weight.npy", head.weight)
            np.save(out / f"{name}.bias.npy", head.bias)
            shapes[name] = list(head.weight.shape)
        self.encoder.save_vocabulary(out / "vocabulary.txt")
        manifest = {
            "format": "nltrack-model/1",
            "heads": shapes,
            "k": self.k,
            "nl_kernel_size": self.nl_kernel_size,
            "feature_channels": self.extractor.channels,
            "feature_stride": self.extractor.stride,
            "embedding_dim": self.encoder.dim,
            "oov_buckets": self.encoder.oov_buckets,
            "vocabulary": "vocabulary.txt",
            "seed": self.seed,
            "meta": self.meta,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, bundle_dir) -> "Model":
        root = Path(bundle_dir)
        manifest = json.loads((root / "manifest.json").read_text())
        heads = {}
        for name, shape in manifest["heads"].items():
            head = ProjectionHead(np.load(root / f"{name}.weight.npy"), np.load(root / f"{name}.bias.npy"))
            if list(head.weight.shape) != shape:
                raise ShapeError(f"{name}: manifest shape {shape} but weights are {head.weight.shape}")
            heads[name] = head
        encoder = BagOfWordsEncoder.from_file(root / manifest["vocabulary"], manifest["oov_buckets"])
        extractor = ToyFeatureExtractor(stride=manifest["feature_stride"])
        return cls(heads, manifest["k"], manifest["nl_kernel_size"], extractor, encoder,
                   manifest["seed"], manifest.get("meta", {}))


def build_nl_kernel(embedding: np.ndarray, cls_head: ProjectionHead, reg_head: ProjectionHead,
                    channels: int, size: int = 1) -> NLKernel:
    """Project a sentence embedding into ``(channels, size, size)`` correlation kernels."""
    embedding = np.asarray(embedding, dtype=np.float64)
    kernels = []
    for head in (cls_head, reg_head):
        if head.out_channels != channels * size * size:
            raise ShapeError(f"NL head yields {head.out_channels} values, need {channels}x{size}x{size}")
        kernels.append(head.apply_vector(embedding).reshape(channels, size, size))
    return NLKernel(*kernels)


def _crop_key(crop: np.ndarray) -> str:
    crop = np.ascontiguousarray(crop)
    return hashlib.sha1(crop.tobytes() + str(crop.shape).encode()).hexdigest()


class RecordingExtractor:
    """Wrap an extractor and remember every (crop, features) pair it produced."""

    def __init__(self, inner: FeatureExtractor):
        self.inner = inner
        self.channels = inner.channels
        self.stride = inner.stride
        self.records: dict[str, np.ndarray] = {}

    def extract(self, crop: np.ndarray) -> np.ndarray:
        feats = self.inner.extract(crop)
        self.records[_crop_key(crop)] = feats
        return feats

    def save(self, path) -> None:
        np.savez(path, **self.records)


class FileFeatureExtractor:
    """Replay precomputed features keyed by a hash of the crop bytes."""

    def __init__(self, path, channels: int = 24, stride: int = 8):
        with np.load(path) as data:
            self.table = {k: data[k] for k in data.files}
        self.channels = channels
        self.stride = stride

    def extract(self, crop: np.ndarray) -> np.ndarray:
        key = _crop_key(crop)
        if key not in self.table:
            raise KeyError(f"no precomputed features for crop {np.shape(crop)} ({key[:12]})")
        return check_feature_map(self.table[key])


class FileSentenceEncoder:
    """Embeddings from a JSON object mapping text to a vector."""

    def __init__(self, path):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in json.loads(Path(path).read_text()).items()}
        dims = {v.shape for v in self.table.values()}
        if len(dims) != 1:
            raise ShapeError(f"embedding file mixes dimensions {sorted(dims)}")
        self.dim = next(iter(dims))[0]

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise UnusableQuery("empty NL description")
        return self.table[text]

