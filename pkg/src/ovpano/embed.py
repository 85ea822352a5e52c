"""Embedding providers, the view sanity filter and the things/stuff discriminator."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from .render import RenderedView

FEATURE_MAGIC = b"HFM1"
VECTOR_MAGIC = b"HEV1"

DEFAULT_LOGIT_SCALE = 100.0
DEFAULT_THRESHOLD = 0.65
POSITIVE_PROMPTS = ("a normal scene", "an indoor scene", "an outdoor scene")
NEGATIVE_PROMPTS = ("an incoherent image", "unorganized, random points", "a blank image")
THING_PROMPT = "an object"
STUFF_PROMPT = "amorphous, uncountable stuff"


class EmbeddingProvider(Protocol):
    dim: int

    def text_embed(self, text: str) -> np.ndarray: ...

    def image_embed(self, view: RenderedView) -> np.ndarray: ...

    def pixel_features(self, view: RenderedView) -> np.ndarray: ...


def normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Scale to unit length along ``axis``; zero vectors stay zero."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def pixel_features_at(provider, view: RenderedView, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Feature vectors at selected pixels; uses a provider fast path when present."""
    fast = getattr(provider, "features_at", None)
    if fast is not None:
        return fast(view, rows, cols)
    return provider.pixel_features(view)[rows, cols]


# ------------------------------------------------------------------ verdicts

@dataclass(frozen=True)
class ViewVerdict:
    view_id: str
    keep: bool
    best_label: str
    probability: float


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def classify_view(image_vec, positives: Sequence, negatives: Sequence,
                  threshold: float = DEFAULT_THRESHOLD,
                  logit_scale: float = DEFAULT_LOGIT_SCALE,
                  view_id: str = "",
                  names: Optional[Sequence[str]] = None) -> ViewVerdict:
    """Keep a view iff its most probable label is positive with probability above ``threshold``.

    Probabilities are a joint softmax of ``logit_scale * cosine`` over all
    positive and negative label vectors. ``names`` labels positives then negatives.
    """
    if len(positives) == 0 or len(negatives) == 0:
        raise ValueError("need at least one positive and one negative label")
    labels = normalize(np.vstack([np.asarray(positives), np.asarray(negatives)]))
    probs = softmax(logit_scale * (labels @ normalize(image_vec)))
    best = int(np.argmax(probs))
    n_pos = len(positives)
    if names is None:
        names = [f"pos{i}" for i in range(n_pos)] + [f"neg{i}" for i in range(len(negatives))]
    p = float(probs[best])
    return ViewVerdict(view_id, bool(best < n_pos and p > threshold), names[best], p)


class ViewFilter:
    """Prompt embeddings bound to a provider, reused across many views."""

    def __init__(self, provider: EmbeddingProvider,
                 positives: Sequence[str] = POSITIVE_PROMPTS,
                 negatives: Sequence[str] = NEGATIVE_PROMPTS,
                 threshold: float = DEFAULT_THRESHOLD,
                 logit_scale: float = DEFAULT_LOGIT_SCALE):
        self.provider = provider
        self.names = list(positives) + list(negatives)
        self.pos = np.array([provider.text_embed(t) for t in positives])
        self.neg = np.array([provider.text_embed(t) for t in negatives])
        self.threshold = threshold
        self.logit_scale = logit_scale

    def __call__(self, view: RenderedView) -> ViewVerdict:
        return classify_view(self.provider.image_embed(view), self.pos, self.neg,
                             self.threshold, self.logit_scale, view.view_id, self.names)


def thing_probability(class_vec, provider: EmbeddingProvider,
                      logit_scale: float = DEFAULT_LOGIT_SCALE) -> float:
    prompts = np.array([provider.text_embed(THING_PROMPT), provider.text_embed(STUFF_PROMPT)])
    return float(softmax(logit_scale * (normalize(prompts) @ normalize(class_vec)))[0])


def things_stuff(class_vec, provider: EmbeddingProvider,
                 logit_scale: float = DEFAULT_LOGIT_SCALE) -> str:
    """``"thing"`` iff the object prompt wins with probability strictly above 0.5."""
    return "thing" if thing_probability(class_vec, provider, logit_scale) > 0.5 else "stuff"


# ------------------------------------------------------------- mock provider

def hashed_unit_vector(token: str, seed: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return normalize(rng.standard_normal(dim))


class MockProvider:
    """Deterministic stand-in for vision-language encoders.

    Text vectors come from a seeded hash of the token. ``traits`` optionally
    blends other tokens into a token's vector (``"a red car": ["an object"]``)
    so that hand-built scenes relate to the fixed prompts. Each pixel takes the
    text vector of the palette concept whose color is nearest to the pixel.
    """

    def __init__(self, seed: int = 0, palette: Optional[Mapping[Tuple[int, int, int], str]] = None,
                 dim: int = 256, traits: Optional[Mapping[str, Sequence[str]]] = None):
        self.seed = seed
        self.dim = dim
        self.palette = dict(palette or {(0, 0, 0): "a blank image"})
        self.traits = {k: list(v) for k, v in (traits or {}).items()}
        self._colors = np.array(list(self.palette), dtype=np.float64) / 255.0
        self._concepts = np.array([self.text_embed(t) for t in self.palette.values()])

    def text_embed(self, text: str) -> np.ndarray:
        vec = hashed_unit_vector(text, self.seed, self.dim)
        for trait in self.traits.get(text, ()):
            vec = vec + hashed_unit_vector(trait, self.seed, self.dim)
        return normalize(vec)

    def palette_index(self, rgb: np.ndarray) -> np.ndarray:
        flat = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
        d2 = ((flat[:, None, :] - self._colors[None, :, :]) ** 2).sum(-1)
        return np.argmin(d2, axis=1).reshape(np.shape(rgb)[:-1])

    def pixel_features(self, view: RenderedView) -> np.ndarray:
        return self._concepts[self.palette_index(view.rgb)]

    def features_at(self, view, rows, cols) -> np.ndarray:
        return self._concepts[self.palette_index(view.rgb[rows, cols])]

    def image_embed(self, view: RenderedView) -> np.ndarray:
        counts = np.bincount(self.palette_index(view.rgb).ravel(), minlength=len(self._concepts))
        return normalize(counts @ self._concepts)


def mock_provider(seed: int = 0, palette=None, dim: int = 256, traits=None) -> MockProvider:
    return MockProvider(seed, palette, dim, traits)


# -------------------------------------------------------- directory provider

def write_feature_map(path, fmap: np.ndarray) -> None:
    h, w, c = fmap.shape
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<III", h, w, c)
                           + np.ascontiguousarray(fmap, dtype="<f4").tobytes())


def read_feature_map(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad feature-map magic {data[:4]!r}")
    h, w, c = struct.unpack_from("<III", data, 4)
    if len(data) != 16 + 4 * h * w * c:
        raise ValueError(f"{path}: feature-map payload size mismatch")
    return np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64).reshape(h, w, c)


def write_vector(path, vec: np.ndarray) -> None:
    vec = np.asarray(vec).ravel()
    Path(path).write_bytes(VECTOR_MAGIC + struct.pack("<I", len(vec)) + vec.astype("<f4").tobytes())


def read_vector(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != VECTOR_MAGIC:
        raise ValueError(f"{path}: bad vector magic {data[:4]!r}")
    (c,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + 4 * c:
        raise ValueError(f"{path}: vector payload size mismatch")
    return np.frombuffer(data, dtype="<f4", offset=8).astype(np.float64)


class DirectoryProvider:
    """Reads embeddings precomputed by an external encoder.

    Layout: ``<view_id>.hfm1`` pixel features, ``<view_id>.hev1`` image
    vectors and ``texts.json`` mapping each text to an ``.hev1`` file.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        index = self.directory / "texts.json"
        self.texts = json.loads(index.read_text()) if index.exists() else {}
        self.dim = None

    def _check_dim(self, c: int, what: str):
        if self.dim is None:
            self.dim = c
        elif c != self.dim:
            raise ValueError(f"{what}: dimension {c} differs from session dimension {self.dim}")

    def text_embed(self, text: str) -> np.ndarray:
        if text not in self.texts:
            raise KeyError(f"no precomputed embedding for text {text!r} in {self.directory}")
        vec = read_vector(self.directory / self.texts[text])
        self._check_dim(len(vec), text)
        return normalize(vec)

    def image_embed(self, view: RenderedView) -> np.ndarray:
        path = self.directory / f"{view.view_id}.hev1"
        if not path.exists():
            raise FileNotFoundError(f"no image embedding for view {view.view_id}: {path}")
        vec = read_vector(path)
        self._check_dim(len(vec), view.view_id)
        return normalize(vec)

    def pixel_features(self, view: RenderedView) -> np.ndarray:
        path = self.directory / f"{view.view_id}.hfm1"
        if not path.exists():
            raise FileNotFoundError(f"no pixel features for view {view.view_id}: {path}")
        fmap = read_feature_map(path)
        self._check_dim(fmap.shape[2], view.view_id)
        return normalize(fmap)


def export_provider(provider: EmbeddingProvider, views: Sequence[RenderedView],
                    texts: Sequence[str], directory) -> None:
    """Materialize ``provider`` outputs in the :class:`DirectoryProvider` layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for v in views:
        write_feature_map(directory / f"{v.view_id}.hfm1", provider.pixel_features(v))
        write_vector(directory / f"{v.view_id}.hev1", provider.image_embed(v))
    index = {}
    for i, t in enumerate(texts):
        name = f"text{i:04d}.hev1"
        write_vector(directory / name, provider.text_embed(t))
        index[t] = name
    (directory / "texts.json").write_text(json.dumps(index, indent=1, sort_keys=True))
