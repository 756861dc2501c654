"""Procedural hierarchical face-attack dataset, manifests and the sample store.

Every image is ``identity base + per-node signatures + method variant +
noise``. Each taxonomy node owns a patch-periodic colour tile (visible in
patch statistics) plus a flavour texture named after the attack it stands
in for: moire for replay, blocky occlusion for cutouts, low-frequency warp
for face-swap and so on. Generation is a pure function of
``(taxonomy, config, seed)``; each record draws from its own seeded stream.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ManifestError
from .taxonomy import AttackTaxonomy

SPLITS = ("train", "val", "test", "unassigned")
MANIFEST_SCHEMA = "hiptune-manifest"
MANIFEST_VERSION = 1
TENSOR_MAGIC = b"HPTT"


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    identity_id: int
    is_live: bool
    path: tuple[int, int, int] | None = None
    method_id: int | None = None

    def __post_init__(self):
        if self.is_live != (self.path is None) or self.is_live != (self.method_id is None):
            raise ManifestError("live samples carry neither path nor method; fake samples carry both")


@dataclass(frozen=True)
class ManifestRecord:
    file: str
    identity_id: int
    is_live: bool
    l1: int
    l2: int | None
    l3: int | None
    method_id: int | None
    split: str = "unassigned"

    @property
    def path(self) -> tuple[int, int, int] | None:
        if self.is_live:
            return None
        return (self.l1, self.l2, self.l3)

    def to_json(self) -> dict:
        return {
            "file": self.file,
            "identity_id": self.identity_id,
            "is_live": self.is_live,
            "l1": self.l1,
            "l2": self.l2,
            "l3": self.l3,
            "method_id": self.method_id,
            "split": self.split,
        }


@dataclass(frozen=True)
class Manifest:
    records: tuple[ManifestRecord, ...] = ()
    taxonomy_digest: str | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def validate(self, taxonomy: AttackTaxonomy) -> None:
        live = taxonomy.live_id
        for i, r in enumerate(self.records):
            if r.split not in SPLITS:
                raise ManifestError(f"bad split tag {r.split!r}", i)
            try:
                if r.is_live:
                    if r.l1 != live or r.l2 is not None or r.l3 is not None or r.method_id is not None:
                        raise ManifestError("live record must reference only the live node", i)
                else:
                    taxonomy.check_path((r.l1, r.l2, r.l3))
                    if r.method_id is None or taxonomy.method_node(r.method_id) != r.l3:
                        raise ManifestError(f"method {r.method_id} does not belong to node {r.l3}", i)
            except ManifestError:
                raise
            except Exception as exc:
                raise ManifestError(str(exc), i) from None

    def with_splits(self, assignment: dict[int, str]) -> "Manifest":
        """Copy with split tags replaced; indices missing from ``assignment`` become unassigned."""
        return replace(
            self,
            records=tuple(replace(r, split=assignment.get(i, "unassigned")) for i, r in enumerate(self.records)),
        )

    def indices(self, split: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == split]


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    header = {"schema": MANIFEST_SCHEMA, "version": MANIFEST_VERSION, "taxonomy": manifest.taxonomy_digest}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in manifest.records:
            fh.write(json.dumps(r.to_json()) + "\n")


def load_manifest(path, taxonomy: AttackTaxonomy | None = None) -> Manifest:
    """Read a manifest; validates node ids when a taxonomy is given."""
    path = Path(path)
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        return Manifest()
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"unreadable header: {exc}") from None
    if header.get("schema") != MANIFEST_SCHEMA:
        raise ManifestError(f"not a manifest file (schema={header.get('schema')!r})")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {header.get('version')!r}")
    records = []
    for i, line in enumerate(lines[1:]):
        try:
            d = json.loads(line)
            records.append(
                ManifestRecord(
                    file=str(d["file"]),
                    identity_id=int(d["identity_id"]),
                    is_live=bool(d["is_live"]),
                    l1=int(d["l1"]),
                    l2=None if d["l2"] is None else int(d["l2"]),
                    l3=None if d["l3"] is None else int(d["l3"]),
                    method_id=None if d["method_id"] is None else int(d["method_id"]),
                    split=str(d.get("split", "unassigned")),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed record: {exc}", i) from None
    manifest = Manifest(tuple(records), header.get("taxonomy"))
    if taxonomy is not None:
        manifest.validate(taxonomy)
    return manifest


# -- tensor files -----------------------------------------------------------


def write_tensor(path, array: np.ndarray) -> None:
    """Magic, uint32 ndim, uint32 dims, then row-major little-endian float32."""
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TENSOR_MAGIC:
        raise ManifestError(f"{path}: not a tensor file")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{ndim}I", blob, 8)
    offset = 8 + 4 * ndim
    data = np.frombuffer(blob, dtype="<f4", offset=offset)
    if data.size != int(np.prod(shape)):
        raise ManifestError(f"{path}: payload size does not match header {shape}")
    return data.reshape(shape).astype(np.float32)


def write_png(path, image: np.ndarray) -> None:
    """8-bit lossless preview; values are min-max scaled per image."""
    from PIL import Image

    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    Image.fromarray(np.round(scaled.transpose(1, 2, 0) * 255).astype(np.uint8)).save(path, format="PNG")


@dataclass
class SampleStore:
    """Images aligned with manifest records, as an (N, C, H, W) float32 array."""

    images: np.ndarray

    def __len__(self):
        return len(self.images)

    def save(self, root, manifest: Manifest, png: bool = False) -> None:
        root = Path(root)
        for rec, img in zip(manifest.records, self.images):
            target = root / rec.file
            target.parent.mkdir(parents=True, exist_ok=True)
            write_tensor(target, img)
            if png:
                write_png(target.with_suffix(".png"), img)

    @classmethod
    def load(cls, root, manifest: Manifest) -> "SampleStore":
        root = Path(root)
        if not manifest.records:
            return cls(np.zeros((0, 3, 1, 1), dtype=np.float32))
        return cls(np.stack([read_tensor(root / r.file) for r in manifest.records]))


# -- generator ---------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    n_identities: int = 10
    frames_per_method: int = 3
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    tile_period: int = 4
    tile_amplitude: float = 0.12
    flavor_amplitude: float = 0.10
    method_amplitude: float = 0.04
    noise: float = 0.05
    frame_jitter: float = 0.02

    def validate(self) -> None:
        if self.n_identities < 2:
            raise ConfigError(f"n_identities must be >= 2, got {self.n_identities}")
        if self.frames_per_method < 1:
            raise ConfigError(f"frames_per_method must be >= 1, got {self.frames_per_method}")
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.image_size % self.tile_period:
            raise ConfigError(f"image_size {self.image_size} not divisible by tile_period {self.tile_period}")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def _grid(size: int):
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return ys / size, xs / size


def _identity_base(seed: int, identity: int, cfg: GeneratorConfig) -> np.ndarray:
    """Smooth per-identity pattern with zero channel-wise mean, offset to 0.5."""
    rng = _rng(seed, 1, identity)
    y, x = _grid(cfg.image_size)
    img = np.zeros((cfg.channels, cfg.image_size, cfg.image_size))
    for c in range(cfg.channels):
        for _ in range(3):
            fy, fx = rng.integers(1, 3, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            img[c] += rng.uniform(0.05, 0.12) * np.sin(2 * np.pi * (fy * y + fx * x) + phase)
        # a soft face-like blob centred with per-identity offset
        cy, cx = 0.5 + rng.uniform(-0.08, 0.08, size=2)
        img[c] += rng.uniform(0.1, 0.2) * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / 0.08)
        img[c] -= img[c].mean()
    return img + 0.5


def _node_tile(seed: int, node_id: int, cfg: GeneratorConfig) -> np.ndarray:
    rng = _rng(seed, 2, node_id)
    tile = rng.standard_normal((cfg.channels, cfg.tile_period, cfg.tile_period))
    tile /= np.sqrt((tile**2).mean())
    reps = cfg.image_size // cfg.tile_period
    return np.tile(tile, (1, reps, reps))


def _method_tile(seed: int, method_id: int, cfg: GeneratorConfig) -> np.ndarray:
    return _node_tile(seed + 7919, 1000 + method_id, cfg)


def _box_blur(img: np.ndarray, k: int = 3) -> np.ndarray:
    pad = k // 2
    p = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(k):
        for dx in range(k):
            out += p[:, dy : dy + img.shape[1], dx : dx + img.shape[2]]
    return out / (k * k)


# Flavour textures. Each takes (base image, variant rng, variant index) and
# returns an additive perturbation with unit-ish scale.
def _fl_print(base, rng, v):
    tint = np.array([0.6, 0.3, -0.4])[: base.shape[0], None, None]
    return tint * (1 + 0.2 * v) - 0.8 * (base - _box_blur(base))


def _fl_replay(base, rng, v):
    y, x = _grid(base.shape[1])
    f = 5 + 2 * v + rng.uniform(0, 0.5)
    moire = np.sin(2 * np.pi * f * x) * np.sin(2 * np.pi * (f + 1) * y)
    return np.broadcast_to(moire, base.shape) * np.array([0.8, 1.0, 1.2])[: base.shape[0], None, None]


def _fl_cutouts(base, rng, v):
    out = np.zeros_like(base)
    s = base.shape[1]
    n_holes = 1 + v % 3
    for _ in range(n_holes):
        h, w = rng.integers(s // 8, s // 4 + 1, size=2)
        y0, x0 = rng.integers(0, s - h), rng.integers(0, s - w)
        out[:, y0 : y0 + h, x0 : x0 + w] = 0.5 - base[:, y0 : y0 + h, x0 : x0 + w] - 0.5 * (v % 2)
    return 2.0 * out


def _fl_transparent(base, rng, v):
    y, x = _grid(base.shape[1])
    glare = np.exp(-((y - 0.3 - 0.05 * v) ** 2 + (x - 0.6) ** 2) / 0.02)
    return np.broadcast_to(1.5 * glare, base.shape) - 0.3 * (base - 0.5)


def _fl_plaster(base, rng, v):
    gray = base.mean(axis=0, keepdims=True)
    return 1.5 * (np.broadcast_to(gray, base.shape) - base) + 0.3


def _fl_resin(base, rng, v):
    y, x = _grid(base.shape[1])
    stripes = np.maximum(np.sin(2 * np.pi * (3 + v) * (x + y)), 0) ** 4
    return np.broadcast_to(1.2 * stripes, base.shape)


def _fl_attribute(base, rng, v):
    out = np.zeros_like(base)
    s = base.shape[1]
    y0 = s // 2 + rng.integers(-2, 3)
    out[:, y0 : y0 + s // 4, s // 4 : 3 * s // 4] = np.array([1.0, -0.5, 0.5])[: base.shape[0], None, None] * (1 + 0.3 * v)
    return out


def _fl_faceswap(base, rng, v):
    s = base.shape[1]
    y, x = _grid(s)
    phase = rng.uniform(0, 2 * np.pi)
    dy = np.round(1.5 * np.sin(2 * np.pi * (y + x) + phase)).astype(int)
    dx = np.round(1.5 * np.cos(2 * np.pi * (y - x) + phase + 0.4 * v)).astype(int)
    yi = np.clip(np.arange(s)[:, None] + dy, 0, s - 1)
    xi = np.clip(np.arange(s)[None, :] + dx, 0, s - 1)
    warped = base[:, yi, xi]
    return 3.0 * (warped - base)


def _fl_video(base, rng, v):
    shift = 1 + v % 3
    ghost = np.roll(base, shift, axis=2)
    return 2.0 * (ghost - base) + 0.2


def _fl_pixel(base, rng, v):
    return np.sign(rng.standard_normal(base.shape))


def _fl_semantic(base, rng, v):
    y, x = _grid(base.shape[1])
    w = rng.standard_normal((base.shape[0], 2))
    return w[:, 0, None, None] * np.sin(np.pi * y) + w[:, 1, None, None] * np.cos(np.pi * x)


def _fl_idconsistent(base, rng, v):
    return 4.0 * (_box_blur(base, 3) - base) + 0.2 * (1 + v)


def _fl_style(base, rng, v):
    levels = 3 + v
    return 2.0 * (np.round(base * levels) / levels - base)


def _fl_prompt(base, rng, v):
    y, x = _grid(base.shape[1])
    grad = (x - 0.5) * (1 + 0.3 * v)
    return np.stack([grad, -grad, 0.5 * y][: base.shape[0]])


FLAVORS: dict[str, Callable] = {
    "print": _fl_print,
    "replay": _fl_replay,
    "cutouts": _fl_cutouts,
    "transparent": _fl_transparent,
    "plaster": _fl_plaster,
    "resin": _fl_resin,
    "attribute-edit": _fl_attribute,
    "face-swap": _fl_faceswap,
    "video-driven": _fl_video,
    "pixel-level": _fl_pixel,
    "semantic-level": _fl_semantic,
    "ID-consistent": _fl_idconsistent,
    "style-transfer": _fl_style,
    "prompt-based": _fl_prompt,
}


def render_sample(
    taxonomy: AttackTaxonomy,
    cfg: GeneratorConfig,
    seed: int,
    identity: int,
    method_id: int | None,
    frame: int,
) -> np.ndarray:
    base = _identity_base(seed, identity, cfg)
    img = base.copy()
    if method_id is not None:
        path = taxonomy.path_of_method(method_id)
        for nid in path:
            img += cfg.tile_amplitude * _node_tile(seed, nid, cfg)
        l3 = taxonomy[path[2]]
        variant = l3.method_ids.index(method_id)
        flavor = FLAVORS.get(l3.name)
        if flavor is not None:
            # method-level flavour randomness is shared across identities and frames
            img += cfg.flavor_amplitude * flavor(base, _rng(seed, 3, method_id), variant)
        img += cfg.method_amplitude * _method_tile(seed, method_id, cfg)
    rng = _rng(seed, 4, identity, 0 if method_id is None else method_id + 1, frame)
    img += cfg.frame_jitter * rng.uniform(-1, 1)
    img += cfg.noise * rng.standard_normal(img.shape)
    return img.astype(np.float32)


def generate_dataset(
    taxonomy: AttackTaxonomy,
    n_identities: int = 10,
    frames_per_method: int = 3,
    image_size: int = 32,
    seed: int = 0,
    config: GeneratorConfig | None = None,
) -> tuple[Manifest, SampleStore]:
    """Render ``n_identities * frames * (1 + n_methods)`` samples.

    Every identity gets live frames and frames for every leaf method.
    """
    cfg = config or GeneratorConfig()
    cfg = replace(cfg, n_identities=n_identities, frames_per_method=frames_per_method, image_size=image_size)
    cfg.validate()
    records = []
    images = []
    live = taxonomy.live_id
    for ident in range(cfg.n_identities):
        for method in (None, *taxonomy.method_ids):
            for frame in range(cfg.frames_per_method):
                idx = len(records)
                if method is None:
                    l1, l2, l3 = live, None, None
                else:
                    l1, l2, l3 = taxonomy.path_of_method(method)
                records.append(
                    ManifestRecord(
                        file=f"samples/{idx:06d}.bin",
                        identity_id=ident,
                        is_live=method is None,
                        l1=l1,
                        l2=l2,
                        l3=l3,
                        method_id=method,
                    )
                )
                images.append(render_sample(taxonomy, cfg, seed, ident, method, frame))
    store = SampleStore(np.stack(images) if images else np.zeros((0, cfg.channels, image_size, image_size), np.float32))
    return Manifest(tuple(records), taxonomy.digest()), store


def sample_at(manifest: Manifest, store: SampleStore, index: int) -> Sample:
    r = manifest.records[index]
    return Sample(store.images[index], r.identity_id, r.is_live, r.path, r.method_id)


def labels_array(manifest: Manifest, indices: Sequence[int] | None = None) -> np.ndarray:
    """(N, 4) int array of (l1, l2, l3, method) with -1 for live."""
    idx = range(len(manifest)) if indices is None else indices
    rows = []
    for i in idx:
        r = manifest.records[i]
        if r.is_live:
            rows.append((r.l1, -1, -1, -1))
        else:
            rows.append((r.l1, r.l2, r.l3, r.method_id))
    return np.asarray(rows, dtype=np.int64).reshape(-1, 4)


def group_by(records: Iterable[ManifestRecord], key) -> dict:
    out: dict = {}
    for i, r in enumerate(records):
        out.setdefault(key(r), []).append(i)
    return out
