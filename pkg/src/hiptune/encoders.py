"""Frozen dual encoder standing in for a pretrained CLIP.

The vision tower is a small pre-LN ViT that accepts extra prompt tokens
after the image tokens. The text tower consumes continuous context vectors
followed by a learned class-tag embedding (``live`` / ``fake``) and pools at
that final position. Both towers project into a shared embedding of size
``text_dim`` where cosine similarity is taken.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, InvariantViolation, NumericalDomainError, ShapeError
from .sampling import balanced_batches

LIVE_TAG = 0
FAKE_TAG = 1
CLASS_TAGS = {"live": LIVE_TAG, "fake": FAKE_TAG}


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    visual_dim: int = 64
    text_dim: int = 32
    n_layers: int = 4
    n_heads: int = 4
    temperature: float = 0.07
    channels: int = 3
    max_text_len: int = 64
    template_length: int = 4

    def __post_init__(self):
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.visual_dim % self.n_heads or self.text_dim % self.n_heads:
            raise ConfigError("embedding dims must be divisible by n_heads")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_size**2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BaselineConfig:
    context_length: int = 16
    class_specific: bool = False

    def __post_init__(self):
        if self.context_length < 1:
            raise ConfigError("context_length must be >= 1")


@dataclass
class TokenSequence:
    """Token matrix (optionally batched: ``(B, n, dim)``) with named spans."""

    tokens: torch.Tensor
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        n = self.tokens.shape[-2]
        edges = sorted(self.spans.values())
        pos = 0
        for lo, hi in edges:
            if lo != pos or hi < lo:
                raise ShapeError("token spans", "contiguous partition", self.spans)
            pos = hi
        if edges and pos != n:
            raise ShapeError("token spans", f"cover {n} tokens", self.spans)

    def __len__(self):
        return self.tokens.shape[-2]

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def span(self, name: str) -> torch.Tensor:
        lo, hi = self.spans[name]
        return self.tokens[..., lo:hi, :]

    @property
    def image_tokens(self) -> torch.Tensor:
        return self.span("image")


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.ln2(x))


class VisionEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.visual_dim
        self.patch = nn.Conv2d(cfg.channels, d, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(0.02 * torch.randn(1, 1, d))
        self.pos_embed = nn.Parameter(0.02 * torch.randn(1, cfg.n_patches + 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_layers))
        self.ln_post = nn.LayerNorm(d)
        self.proj = nn.Linear(d, cfg.text_dim, bias=False)

    def patch_embed(self, images: torch.Tensor) -> TokenSequence:
        cfg = self.cfg
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        single = images.dim() == 3
        if single:
            images = images.unsqueeze(0)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError("image", expected, tuple(images.shape[-3:]))
        x = self.patch(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        if single:
            x = x[0]
        return TokenSequence(x, {"cls": (0, 1), "image": (1, cfg.n_patches + 1)})

    def encode(self, seq: TokenSequence, prompt_depth: int = 1) -> torch.Tensor:
        """Class-token feature in the joint space.

        ``prompt_depth > 1`` re-inserts the input prompt tokens in front of
        each of the first ``prompt_depth`` blocks.
        """
        x = seq.tokens
        single = x.dim() == 2
        if single:
            x = x.unsqueeze(0)
        if x.shape[-1] != self.cfg.visual_dim:
            raise ShapeError("token dim", self.cfg.visual_dim, x.shape[-1])
        prompt = seq.spans.get("prompt")
        for depth, block in enumerate(self.blocks):
            if prompt is not None and 0 < depth < prompt_depth:
                lo, hi = prompt
                x = torch.cat([x[:, :lo], seq.tokens.reshape(x.shape[0], -1, x.shape[-1])[:, lo:hi], x[:, hi:]], dim=1)
            x = block(x)
        f = self.proj(self.ln_post(x[:, 0]))
        return f[0] if single else f


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.text_dim
        self.class_embed = nn.Parameter(0.02 * torch.randn(len(CLASS_TAGS), d))
        self.pos_embed = nn.Parameter(0.01 * torch.randn(cfg.max_text_len + 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_layers))
        self.ln_final = nn.LayerNorm(d)
        self.proj = nn.Linear(d, d, bias=False)

    def forward(self, context: torch.Tensor, class_tag) -> torch.Tensor:
        single = context.dim() == 2
        if single:
            context = context.unsqueeze(0)
        b, n_ctx, d = context.shape
        if n_ctx < 1:
            raise ShapeError("text context length", ">= 1", n_ctx)
        if n_ctx > self.cfg.max_text_len:
            raise ShapeError("text context length", f"<= {self.cfg.max_text_len}", n_ctx)
        if d != self.cfg.text_dim:
            raise ShapeError("text context dim", self.cfg.text_dim, d)
        tag = torch.as_tensor(class_tag, dtype=torch.long).reshape(-1)
        cls = self.class_embed[tag].unsqueeze(1).expand(b, 1, d)
        x = torch.cat([context, cls], dim=1) + self.pos_embed[: n_ctx + 1]
        for block in self.blocks:
            x = block(x)
        w = self.proj(self.ln_final(x[:, -1]))
        return w[0] if single else w


def class_probabilities(f: torch.Tensor, weights: torch.Tensor, temperature: float) -> torch.Tensor:
    """Softmax over cosine similarities divided by the temperature.

    ``f`` is ``(d,)`` or ``(B, d)``; ``weights`` is ``(K, d)`` shared by the
    batch or ``(B, K, d)`` per sample.
    """
    if temperature <= 0:
        raise NumericalDomainError("temperature must be positive")
    fn = f.norm(dim=-1, keepdim=True)
    wn = weights.norm(dim=-1, keepdim=True)
    if bool((fn == 0).any()) or bool((wn == 0).any()):
        raise NumericalDomainError("cosine similarity undefined for a zero-norm vector")
    f = f / fn
    weights = weights / wn
    if weights.dim() == 2:
        cos = f @ weights.T
    else:
        cos = torch.einsum("bd,bkd->bk", f if f.dim() == 2 else f.unsqueeze(0), weights)
    return torch.softmax(cos / temperature, dim=-1)


class DualEncoder(nn.Module):
    """Vision + text towers plus the fixed template context used zero-shot."""

    def __init__(self, cfg: EncoderConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.vision = VisionEncoder(self.cfg)
            self.text = TextEncoder(self.cfg)
            # "This is a photo of" as learned embeddings; frozen after pretraining
            self.template = nn.Parameter(0.02 * torch.randn(self.cfg.template_length, self.cfg.text_dim))
        self.frozen = False

    def freeze(self) -> "DualEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    def require_frozen(self) -> None:
        if not self.frozen or any(p.requires_grad for p in self.parameters()):
            raise InvariantViolation("encoder must be frozen before prompt training")

    def patch_embed(self, images: torch.Tensor) -> TokenSequence:
        return self.vision.patch_embed(images)

    def encode_image(self, seq: TokenSequence, prompt_depth: int = 1) -> torch.Tensor:
        return self.vision.encode(seq, prompt_depth)

    def encode_text(self, context: torch.Tensor, class_tag) -> torch.Tensor:
        if isinstance(class_tag, str):
            class_tag = CLASS_TAGS[class_tag]
        return self.text(context, class_tag)

    def template_weights(self) -> torch.Tensor:
        ctx = self.template.unsqueeze(0).expand(2, -1, -1)
        return self.text(ctx, torch.tensor([LIVE_TAG, FAKE_TAG]))

    def zero_shot_probabilities(self, images: torch.Tensor) -> torch.Tensor:
        f = self.encode_image(self.patch_embed(images))
        return class_probabilities(f, self.template_weights(), self.cfg.temperature)

    def checksum(self) -> str:
        return parameter_checksum(self)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def pretrain_encoders(
    encoder: DualEncoder,
    images: torch.Tensor,
    is_fake: torch.Tensor,
    identities: torch.Tensor | None = None,
    epochs: int = 5,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> list[float]:
    """Stand-in for large-scale pretraining: fit live/fake with the template, then freeze."""
    if encoder.frozen:
        raise InvariantViolation("encoder already frozen")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    encoder.train()
    trace = []
    for _ in range(epochs):
        total, seen = 0.0, 0
        for idx in balanced_batches(is_fake, identities, batch_size, gen):
            probs = encoder.zero_shot_probabilities(images[idx])
            loss = F.nll_loss(torch.log(probs.clamp_min(1e-12)), is_fake[idx].long())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        trace.append(total / max(seen, 1))
    encoder.freeze()
    return trace


class CoOpBaseline(nn.Module):
    """Flat learnable text contexts on top of the frozen encoder.

    Unified mode shares one ``M x text_dim`` context between both classes;
    specific mode learns one per class.
    """

    def __init__(self, encoder: DualEncoder, cfg: BaselineConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or BaselineConfig()
        self.encoder = encoder
        n = len(CLASS_TAGS) if self.cfg.class_specific else 1
        gen = torch.Generator().manual_seed(seed)
        ctx = 0.02 * torch.randn(n, self.cfg.context_length, encoder.cfg.text_dim, generator=gen)
        self.context = nn.Parameter(ctx.to(encoder.template.dtype))

    def trainable_parameters(self):
        return [self.context]

    def text_weights(self) -> torch.Tensor:
        ctx = self.context.expand(len(CLASS_TAGS), -1, -1)
        return self.encoder.text(ctx, torch.tensor([LIVE_TAG, FAKE_TAG]))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        f = self.encoder.encode_image(self.encoder.patch_embed(images))
        return class_probabilities(f, self.text_weights(), self.encoder.cfg.temperature)

