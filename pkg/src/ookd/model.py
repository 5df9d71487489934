"""Per-frame query-based VIS model: conv backbone, attention decoder, dynamic mask head."""
from __future__ import annotations

import dataclasses
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError

CHECKPOINT_SCHEMA = 1
MASK_CHANNELS = 8
DYN_HIDDEN = 8


@dataclass
class ModelConfig:
    num_queries: int = 16
    hidden_dim: int = 64
    num_classes: int = 8  # object classes; the no-object slot is appended
    decoder_layers: int = 2
    num_heads: int = 4
    backbone_channels: tuple[int, int, int] = (32, 48, 64)
    image_size: tuple[int, int] = (64, 64)
    embed_hidden: int = 64  # width of the single hidden layer of the contrastive head
    ffn_dim: int = 128

    def validate(self) -> None:
        if self.hidden_dim % self.num_heads:
            raise ValidationError("hidden_dim must be divisible by num_heads", "model.hidden_dim")
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ValidationError("image size must be a multiple of 8", "model.image_size")
        if self.num_queries < 1:
            raise ValidationError("need at least one query", "model.num_queries")

    @property
    def num_logits(self) -> int:
        return self.num_classes + 1


def _conv(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(8, cout), nn.ReLU(inplace=True))


class Backbone(nn.Module):
    """Three strided stages; returns the stride-4 map (masks) and the stride-8 map (attention)."""

    def __init__(self, channels, hidden_dim):
        super().__init__()
        c1, c2, c3 = channels
        self.stage1 = nn.Sequential(_conv(3, c1, 2), _conv(c1, c1, 1))
        self.stage2 = nn.Sequential(_conv(c1, c2, 2), _conv(c2, c2, 1))
        self.stage3 = nn.Sequential(_conv(c2, c3, 2), _conv(c3, c3, 1))
        self.proj = nn.Conv2d(c3, hidden_dim, 1)
        self.mask_branch = nn.Sequential(nn.Conv2d(c2 + hidden_dim, 32, 3, 1, 1), nn.ReLU(inplace=True),
                                         nn.Conv2d(32, MASK_CHANNELS, 1))

    def forward(self, x):
        s4 = self.stage2(self.stage1(x))
        s8 = self.proj(self.stage3(s4))
        up = F.interpolate(s8, size=s4.shape[-2:], mode="bilinear", align_corners=False)
        mask_feats = self.mask_branch(torch.cat([s4, up], dim=1))
        return s8, mask_feats


def sine_position(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, (h*w, dim)."""
    quarter = dim // 4
    freq = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float32) / quarter))
    ys = (torch.arange(h, dtype=torch.float32) + 0.5) / h * 2 * np.pi
    xs = (torch.arange(w, dtype=torch.float32) + 0.5) / w * 2 * np.pi
    py = ys[:, None] * freq[None]
    px = xs[:, None] * freq[None]
    pe_y = torch.cat([py.sin(), py.cos()], dim=1)[:, None, :].expand(h, w, 2 * quarter)
    pe_x = torch.cat([px.sin(), px.cos()], dim=1)[None, :, :].expand(h, w, 2 * quarter)
    return torch.cat([pe_y, pe_x], dim=-1).reshape(h * w, 4 * quarter)


def coord_grid(h: int, w: int) -> torch.Tensor:
    ys = torch.linspace(-1, 1, h)
    xs = torch.linspace(-1, 1, w)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy])  # (2, h, w)


class MLP(nn.Module):
    def __init__(self, din, dhidden, dout, layers=2):
        super().__init__()
        dims = [din] + [dhidden] * (layers - 1) + [dout]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class PredictionHeads(nn.Module):
    """Class, box, dynamic-mask and contrastive-embedding heads on top of query features.

    Shared by the frame model and the offline aggregator so both produce
    outputs (and embeddings) in the same form.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C = cfg.hidden_dim
        self.class_head = nn.Linear(C, cfg.num_logits)
        self.box_head = MLP(C, C, 4, 3)
        cin = MASK_CHANNELS + 2
        self.dyn_sizes = [cin * DYN_HIDDEN, DYN_HIDDEN, DYN_HIDDEN, 1]
        self.mask_params = nn.Linear(C, sum(self.dyn_sizes))
        self.embed_head = MLP(C, cfg.embed_hidden, C, 2)

    def classify(self, q):
        return self.class_head(q)

    def boxes(self, q):
        b = self.box_head(q).sigmoid()
        return b.clamp(min=1e-4, max=1.0)

    def masks(self, q, mask_feats):
        """q: (B, N, C); mask_feats: (B, K, h, w) -> (B, N, h, w) logits."""
        B, N, _ = q.shape
        _, K, h, w = mask_feats.shape
        coords = coord_grid(h, w).to(mask_feats)[None].expand(B, -1, -1, -1)
        x = torch.cat([mask_feats, coords], dim=1).flatten(2)  # (B, K+2, hw)
        w1, b1, w2, b2 = torch.split(self.mask_params(q), self.dyn_sizes, dim=-1)
        w1 = w1.reshape(B, N, DYN_HIDDEN, K + 2)
        hdn = F.relu(torch.einsum("bnok,bkp->bnop", w1, x) + b1[..., None])
        out = torch.einsum("bno,bnop->bnp", w2, hdn) + b2
        return out.reshape(B, N, h, w)

    def embed(self, q):
        return F.normalize(self.embed_head(q), dim=-1, eps=1e-12)


class VISModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C = cfg.hidden_dim
        self.backbone = Backbone(cfg.backbone_channels, C)
        h, w = cfg.image_size[0] // 8, cfg.image_size[1] // 8
        self.register_buffer("pos", sine_position(h, w, C), persistent=False)
        self.query_embed = nn.Embedding(cfg.num_queries, C)
        self.query_pos = nn.Embedding(cfg.num_queries, C)
        layer = nn.TransformerDecoderLayer(C, cfg.num_heads, cfg.ffn_dim, dropout=0.0, batch_first=True)
        self.decoder = nn.TransformerDecoder(layer, cfg.decoder_layers)
        self.heads = PredictionHeads(cfg)

    @staticmethod
    def preprocess(frames) -> torch.Tensor:
        """uint8 (..., H, W, 3) -> float (..., 3, H, W) in [-1, 1]."""
        x = torch.as_tensor(np.asarray(frames))
        x = x.float().div(127.5).sub(1.0)
        return x.movedim(-1, -3)

    def encode(self, images: torch.Tensor):
        if images.shape[-2:] != tuple(self.cfg.image_size):
            raise ValidationError(f"frame size {tuple(images.shape[-2:])} != {self.cfg.image_size}", "frame")
        s8, mask_feats = self.backbone(images)
        memory = s8.flatten(2).transpose(1, 2)  # (B, hw, C)
        return memory, mask_feats

    def decode(self, memory):
        B = memory.shape[0]
        tgt = self.query_embed.weight[None].expand(B, -1, -1)
        qpos = self.query_pos.weight[None]
        # positional information enters through queries and memory additively
        return self.decoder(tgt + qpos, memory + self.pos[None])

    def extract_frame_queries(self, images: torch.Tensor):
        memory, mask_feats = self.encode(images)
        return self.decode(memory), mask_feats

    def predict_heads(self, features, mask_feats):
        return self.heads.classify(features), self.heads.boxes(features), self.heads.masks(features, mask_feats)

    def contrastive_embed(self, features):
        return self.heads.embed(features)

    def forward(self, images: torch.Tensor) -> dict:
        feats, mask_feats = self.extract_frame_queries(images)
        logits, boxes, masks = self.predict_heads(feats, mask_feats)
        return {
            "features": feats,
            "class_logits": logits,
            "boxes": boxes,
            "mask_logits": masks,
            "embeddings": self.contrastive_embed(feats),
            "mask_feats": mask_feats,
        }


def num_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def config_from_dict(cls, d: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in d.items():
        if k not in names:
            raise ValidationError(f"unknown field {k!r}", cls.__name__)
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def save_checkpoint(path, modules: dict, model_config: ModelConfig, kind: str, extra: dict | None = None) -> None:
    payload = {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": kind,
        "model_config": dataclasses.asdict(model_config),
        "state": {name: m.state_dict() for name, m in modules.items()},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expect_kind: str | None = None, expect_config: ModelConfig | None = None) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValidationError(f"unsupported checkpoint schema {payload.get('schema_version')}", str(path))
    if expect_kind is not None and payload["kind"] != expect_kind:
        raise ValidationError(f"expected a {expect_kind!r} checkpoint, found {payload['kind']!r}", str(path))
    cfg = config_from_dict(ModelConfig, payload["model_config"])
    if expect_config is not None and cfg != expect_config:
        raise ValidationError(f"checkpoint config {cfg} incompatible with {expect_config}", str(path))
    payload["model_config"] = cfg
    return payload


def load_frame_model(path) -> VISModel:
    payload = load_checkpoint(path)
    model = VISModel(payload["model_config"])
    model.load_state_dict(payload["state"]["model"])
    return model
