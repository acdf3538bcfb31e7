"""Caption/image ingestion, vocabulary, batching, and a synthetic captioned-shapes dataset.

Everything here is deterministic given (inputs, seed). Images are float32
arrays of shape (H, W, 3) in [-1, 1]; captions are integer token sequences
padded with PAD_ID after their true length.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

PAD_ID = 0
UNK_ID = 1
EOS_ID = 2
SPECIAL_TOKENS = ("<pad>", "<unk>", "<eos>")

DEFAULT_MAX_LEN = 18

_WORD_RE = re.compile(r"[a-z0-9]+")


def _words(caption: str) -> list[str]:
    """Lowercase and strip punctuation, keeping alphanumeric words."""
    return _WORD_RE.findall(caption.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Word -> id mapping with fixed special ids (pad=0, unk=1, eos=2)."""

    token_to_id: dict
    id_to_token: tuple

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def lookup(self, word: str) -> int:
        return self.token_to_id.get(word, UNK_ID)

    def to_dict(self) -> dict:
        return dict(self.token_to_id)

    @classmethod
    def from_dict(cls, token_to_id: dict) -> "Vocabulary":
        id_to_token = [None] * len(token_to_id)
        for tok, idx in token_to_id.items():
            id_to_token[idx] = tok
        return cls(token_to_id=dict(token_to_id), id_to_token=tuple(id_to_token))


def build_vocab(captions: list, min_freq: int = 1) -> Vocabulary:
    """Build a vocabulary from raw caption strings.

    Words with frequency below ``min_freq`` are left out (they map to unk).
    Ordering is (frequency desc, word asc) after the special tokens, so the
    result is deterministic for a given corpus.
    """
    if not captions:
        raise ValueError("empty caption corpus")
    counts = Counter()
    for cap in captions:
        counts.update(_words(cap))
    if not counts:
        raise ValueError("caption corpus contains no recognizable tokens")
    kept = [w for w, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda w: (-counts[w], w))
    id_to_token = list(SPECIAL_TOKENS) + kept
    token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
    return Vocabulary(token_to_id=token_to_id, id_to_token=tuple(id_to_token))


@dataclass
class TokenSequence:
    """Integer-encoded caption. ``ids`` is padded to a fixed width; positions
    at or beyond ``length`` hold PAD_ID."""

    ids: np.ndarray
    length: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.length < 1:
            raise ValueError("token sequence must contain at least one token")
        if np.any(self.ids[self.length:] != PAD_ID):
            raise ValueError("positions beyond length must be padding")


def tokenize(caption: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    """Encode a caption: unknown words map to unk, eos appended if it fits,
    output truncated to ``max_len`` and padded to exactly ``max_len``."""
    words = _words(caption)
    if not words:
        raise ValueError(f"caption has no recognizable tokens: {caption!r}")
    ids = [vocab.lookup(w) for w in words][:max_len]
    if len(ids) < max_len:
        ids.append(EOS_ID)
    length = len(ids)
    ids = ids + [PAD_ID] * (max_len - length)
    return TokenSequence(ids=np.asarray(ids, dtype=np.int64), length=length)


@dataclass
class CaptionedImage:
    """One dataset item: an image plus >=1 caption (tokenized and raw)."""

    image: np.ndarray
    captions: list
    texts: list
    attributes: list = field(default_factory=list)


@dataclass
class CaptionedImageDataset:
    items: list
    vocab: Vocabulary
    metadata: dict

    def __post_init__(self):
        if not self.items:
            raise ValueError("dataset must contain at least one item")
        res = self.items[0].image.shape
        for i, item in enumerate(self.items):
            if not item.captions:
                raise ValueError(f"item {i} has no captions")
            if item.image.shape != res:
                raise ValueError(f"item {i} resolution {item.image.shape} != {res}")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def resolution(self) -> int:
        return self.items[0].image.shape[0]

    def all_texts(self) -> list:
        return [t for item in self.items for t in item.texts]


# ---------------------------------------------------------------------------
# synthetic captioned-shapes dataset
# ---------------------------------------------------------------------------

TOY_COLORS = {
    "red": (1.0, 0.0, 0.0),
    "yellow": (1.0, 1.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "blue": (0.0, 0.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}
TOY_SHAPES = ("circle", "square", "triangle")
TOY_SIZES = ("small", "large")
TOY_RELATIONS = ("left of", "above")
TOY_BACKGROUND = 0.86  # gray level in [0, 1]

VALID_RESOLUTIONS = (32, 64, 128, 256)


def _shape_mask(shape: str, res: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        # upward-pointing: apex at cy - r, base at cy + r
        half_width = r * (dy + r) / (2.0 * r)
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= half_width)
    raise ValueError(f"unknown shape {shape!r}")


def _radius(size: str, res: int) -> float:
    return max(3.0, 0.10 * res) if size == "small" else 0.17 * res


def _render(res: int, specs: list) -> np.ndarray:
    img = np.full((res, res, 3), TOY_BACKGROUND, dtype=np.float64)
    for spec in specs:
        mask = _shape_mask(spec["shape"], res, spec["cx"], spec["cy"], spec["r"])
        img[mask] = TOY_COLORS[spec["color"]]
    return (img * 2.0 - 1.0).astype(np.float32)


def _toy_captions(specs: list, relation: str) -> list:
    if len(specs) == 1:
        s = specs[0]
        return [
            f"a {s['size']} {s['color']} {s['shape']}",
            f"there is a {s['size']} {s['color']} {s['shape']}",
            f"the {s['color']} {s['shape']} is {s['size']}",
        ]
    a, b = specs
    return [
        f"a {a['size']} {a['color']} {a['shape']} {relation} a {b['size']} {b['color']} {b['shape']}",
        f"there is a {a['size']} {a['color']} {a['shape']} {relation} a {b['size']} {b['color']} {b['shape']}",
        f"the {a['color']} {a['shape']} is {relation} the {b['color']} {b['shape']}",
    ]


def synthesize_toy_dataset(n_items: int, resolution: int, seed: int,
                           max_len: int = DEFAULT_MAX_LEN) -> CaptionedImageDataset:
    """Deterministic captioned-shapes dataset: 1-2 colored shapes on a plain
    background, with three paraphrase captions per image whose attributes are
    exactly recoverable from the pixels (see ``recover_attributes``)."""
    if n_items <= 0:
        raise ValueError("n_items must be positive")
    if resolution not in VALID_RESOLUTIONS:
        raise ValueError(f"resolution must be one of {VALID_RESOLUTIONS}")
    rng = np.random.default_rng(seed)
    color_names = list(TOY_COLORS)
    raw_items = []
    for _ in range(n_items):
        two = bool(rng.integers(0, 2))
        relation = TOY_RELATIONS[int(rng.integers(0, len(TOY_RELATIONS)))]
        specs = []
        n_shapes = 2 if two else 1
        colors = rng.choice(len(color_names), size=n_shapes, replace=False)
        for k in range(n_shapes):
            size = TOY_SIZES[int(rng.integers(0, 2))]
            r = _radius(size, resolution)
            lo, hi = r + 1.0, resolution - r - 2.0
            if n_shapes == 2:
                half = resolution / 2.0
                if relation == "left of":
                    x_lo, x_hi = (lo, half - r - 1.0) if k == 0 else (half + r + 1.0, hi)
                    y_lo, y_hi = lo, hi
                else:
                    x_lo, x_hi = lo, hi
                    y_lo, y_hi = (lo, half - r - 1.0) if k == 0 else (half + r + 1.0, hi)
            else:
                x_lo, x_hi, y_lo, y_hi = lo, hi, lo, hi
            specs.append({
                "shape": TOY_SHAPES[int(rng.integers(0, len(TOY_SHAPES)))],
                "color": color_names[int(colors[k])],
                "size": size,
                "r": r,
                "cx": float(rng.uniform(x_lo, x_hi)),
                "cy": float(rng.uniform(y_lo, y_hi)),
            })
        raw_items.append((specs, relation))

    all_texts = []
    for specs, relation in raw_items:
        all_texts.extend(_toy_captions(specs, relation))
    vocab = build_vocab(all_texts, min_freq=1)

    items = []
    for specs, relation in raw_items:
        texts = _toy_captions(specs, relation)
        items.append(CaptionedImage(
            image=_render(resolution, specs),
            captions=[tokenize(t, vocab, max_len) for t in texts],
            texts=texts,
            attributes=[{k: s[k] for k in ("shape", "color", "size")} for s in specs],
        ))
    meta = {"source": "toy", "resolution": resolution, "seed": seed, "max_len": max_len}
    return CaptionedImageDataset(items=items, vocab=vocab, metadata=meta)


# ---------------------------------------------------------------------------
# pixel oracle: recover grammar attributes from a rendered image
# ---------------------------------------------------------------------------

def recover_attributes(image: np.ndarray, background: float = TOY_BACKGROUND) -> list:
    """Recover (color, shape) of every shape in a toy image from pixels alone.

    Colors come from the dominant hue of each connected component; shapes from
    bounding-box fill ratio (square ~1, circle ~pi/4) and vertical mass
    (triangles are bottom-heavy). Returns a list of dicts sorted by centroid.
    """
    rgb = (np.asarray(image, dtype=np.float64) + 1.0) / 2.0
    bg = np.array([background] * 3)
    fg = np.max(np.abs(rgb - bg), axis=-1) > 0.2
    labels, n = ndimage.label(fg)
    found = []
    for lab in range(1, n + 1):
        mask = labels == lab
        area = int(mask.sum())
        if area < 4:
            continue
        mean_rgb = rgb[mask].mean(axis=0)
        color = min(TOY_COLORS, key=lambda c: np.sum((mean_rgb - np.array(TOY_COLORS[c])) ** 2))
        ys, xs = np.nonzero(mask)
        bbox_area = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        fill = area / bbox_area
        # vertical centroid within the bbox: ~2/3 for a solid triangle,
        # 1/2 for circles and squares
        height = ys.max() - ys.min()
        rel_cy = (ys.mean() - ys.min()) / height if height > 0 else 0.5
        if fill > 0.92:
            shape = "square"
        elif rel_cy > 0.59:
            shape = "triangle"
        else:
            shape = "circle"
        found.append({"color": color, "shape": shape, "cx": float(xs.mean()), "cy": float(ys.mean())})
    found.sort(key=lambda d: (d["cy"], d["cx"]))
    return found


def dominant_color(image: np.ndarray, background: float = TOY_BACKGROUND) -> str:
    """Name of the dominant non-background hue (largest foreground component)."""
    comps = recover_attributes(image, background)
    if not comps:
        raise ValueError("image has no foreground shapes")
    return comps[0]["color"]


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------

def export_manifest(dataset: CaptionedImageDataset, out_dir) -> Path:
    """Write the dataset as PNG images plus a line-delimited JSON manifest."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for i, item in enumerate(dataset.items):
            rel = f"images/item_{i:05d}.png"
            arr = np.clip((item.image + 1.0) / 2.0 * 255.0, 0, 255).round().astype(np.uint8)
            Image.fromarray(arr).save(out_dir / rel)
            fh.write(json.dumps({"image": rel, "captions": item.texts}) + "\n")
    return manifest


def load_dataset(manifest_path, resolution: int, vocab: Vocabulary = None,
                 min_freq: int = 1, max_len: int = DEFAULT_MAX_LEN) -> CaptionedImageDataset:
    """Load a manifest (one JSON record per line: image path + captions).

    Images are resized to ``resolution`` and rescaled to [-1, 1]. If no vocab
    is supplied one is built from the manifest's captions.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    records = []
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"malformed manifest record at line {lineno}: {exc}") from exc
            if not isinstance(rec, dict) or "image" not in rec or "captions" not in rec:
                raise ValueError(f"manifest record at line {lineno} must have 'image' and 'captions'")
            if not rec["captions"]:
                raise ValueError(f"manifest record at line {lineno} has no captions")
            records.append((lineno, rec))
    if not records:
        raise ValueError(f"manifest is empty: {manifest_path}")

    if vocab is None:
        vocab = build_vocab([c for _, r in records for c in r["captions"]], min_freq=min_freq)

    items = []
    for lineno, rec in records:
        img_path = root / rec["image"]
        if not img_path.exists():
            raise FileNotFoundError(f"missing image file {img_path} (manifest line {lineno})")
        with Image.open(img_path) as im:
            im = im.convert("RGB")
            if im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0 * 2.0 - 1.0
        items.append(CaptionedImage(
            image=arr,
            captions=[tokenize(c, vocab, max_len) for c in rec["captions"]],
            texts=list(rec["captions"]),
        ))
    meta = {"source": str(manifest_path), "resolution": resolution, "max_len": max_len}
    return CaptionedImageDataset(items=items, vocab=vocab, metadata=meta)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """One optimizer-step worth of data. Token arrays are (N, max_len) with
    per-row true lengths; the G and D sides differ only under the dual policy."""

    images: np.ndarray
    tokens_g: np.ndarray
    lengths_g: np.ndarray
    tokens_d: np.ndarray
    lengths_d: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]


def make_batches(dataset: CaptionedImageDataset, batch_size: int, seed: int,
                 caption_policy: str = "single") -> list:
    """Shuffle the dataset into full batches (ragged tail dropped).

    caption_policy 'single' feeds the same caption to both encoder sides;
    'dual' draws two distinct captions per item, one per side.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 (in-batch negatives need N >= 2)")
    if caption_policy not in ("single", "dual"):
        raise ValueError(f"unknown caption_policy {caption_policy!r}")
    if caption_policy == "dual":
        for i, item in enumerate(dataset.items):
            if len(item.captions) < 2:
                raise ValueError(f"dual caption policy requires >=2 captions, item {i} has {len(item.captions)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset.items))
    batches = []
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        images, tg, lg, td, ld = [], [], [], [], []
        for i in idx:
            item = dataset.items[int(i)]
            if caption_policy == "single":
                c = int(rng.integers(0, len(item.captions)))
                cap_g = cap_d = item.captions[c]
            else:
                c1, c2 = rng.choice(len(item.captions), size=2, replace=False)
                cap_g, cap_d = item.captions[int(c1)], item.captions[int(c2)]
            images.append(item.image)
            tg.append(cap_g.ids)
            lg.append(cap_g.length)
            td.append(cap_d.ids)
            ld.append(cap_d.length)
        batches.append(Batch(
            images=np.stack(images),
            tokens_g=np.stack(tg), lengths_g=np.asarray(lg, dtype=np.int64),
            tokens_d=np.stack(td), lengths_d=np.asarray(ld, dtype=np.int64),
        ))
    return batches
