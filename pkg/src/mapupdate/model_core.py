"""Forward network: CNN image encoder, prior-map encoder over historical
instances, configurable map/image fusion, hierarchical-query decoder with
point/style heads, and the instance-association affinity head.

All geometry inside the network is normalized to [0, 1] by the tile extent;
metric coordinates appear only at the predict() boundary.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError, ConfigError
from .map_model import STYLES, VectorMapTile

ARCH_VERSION = 1
FUSION_VARIANTS = ("none", "decoder_query_ca", "bev_feature_ca")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 768
    in_channels: int = 3
    pixels_per_meter: float = 25.0
    backbone_widths: tuple[int, int, int] = (64, 128, 256)
    channels: int = 256              # feature width everywhere past the backbone
    num_instances: int = 50          # instance queries
    points_per_instance: int = 50    # point queries per instance
    num_styles: int = len(STYLES)
    decoder_layers: int = 6
    pme_layers: int = 3
    attn_heads: int = 8
    ffn_ratio: int = 4
    fusion: str = "bev_feature_ca"
    affinity_dim: int = 64
    pos_frequencies: int = 8

    def __post_init__(self):
        if self.fusion not in FUSION_VARIANTS:
            raise ConfigError(f"fusion must be one of {FUSION_VARIANTS}, got {self.fusion!r}")
        if self.channels % self.attn_heads != 0:
            raise ConfigError("channels must be divisible by attn_heads")
        if len(self.backbone_widths) not in (2, 3):
            raise ConfigError("backbone_widths must have two or three stages "
                              "(stride 4 or 8)")
        if self.image_size % self.feature_stride != 0:
            raise ConfigError(f"image_size must be divisible by stride {self.feature_stride}")
        if min(self.image_size, self.channels, self.num_instances,
               self.points_per_instance, self.decoder_layers, self.pme_layers,
               self.affinity_dim, self.pos_frequencies) <= 0:
            raise ConfigError("model dimensions must be positive")
        if self.pixels_per_meter <= 0:
            raise ConfigError("pixels_per_meter must be positive")
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))

    @property
    def feature_stride(self) -> int:
        return 2 ** len(self.backbone_widths)

    @property
    def feature_size(self) -> int:
        return self.image_size // self.feature_stride

    @property
    def extent_m(self) -> float:
        return self.image_size / self.pixels_per_meter

    def fingerprint(self) -> str:
        payload = {"arch_version": ARCH_VERSION, "config": asdict(self)}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class Prediction:
    """Per-sample forward output in tile-local metric coordinates."""

    points: np.ndarray        # (N, N_p, 2) meters
    style_logits: np.ndarray  # (N, num_styles)
    confidence: np.ndarray    # (N,) max sigmoid style probability
    affinity: np.ndarray      # (N, M+1) raw association scores, last col = no-match

    @property
    def style_probs(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.style_logits))

    @property
    def affinity_softmax(self) -> np.ndarray:
        z = self.affinity - self.affinity.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def sine_point_encoding(points: torch.Tensor, n_frequencies: int) -> torch.Tensor:
    """Sin/cos features of normalized 2-D points.

    points: (..., 2) in [0, 1]; output (..., 4 * n_frequencies) laid out as
    [sin(pi f x), cos(pi f x), sin(pi f y), cos(pi f y)] over octave
    frequencies f = 1, 2, 4, ...
    """
    freqs = points.new_tensor([2.0 ** k for k in range(n_frequencies)]) * math.pi
    ang = points[..., :, None] * freqs  # (..., 2, F)
    enc = torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)  # (..., 2, 2F)
    return enc.flatten(-2)


def _grid_pos_embed(size: int, channels: int) -> torch.Tensor:
    """Fixed 2-D sine embedding for a square feature grid, (size*size, C)."""
    half = channels // 2
    coords = (torch.arange(size, dtype=torch.float32) + 0.5) / size
    freqs = torch.exp(torch.arange(half // 2, dtype=torch.float32)
                      * (-math.log(200.0) / max(half // 2 - 1, 1)))
    def axis_embed(x):
        ang = 2 * math.pi * x[:, None] / freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)  # (size, half)
    ey = axis_embed(coords)
    ex = axis_embed(coords)
    rows = ey[:, None, :].expand(size, size, half)
    cols = ex[None, :, :].expand(size, size, half)
    pe = torch.cat([rows, cols], dim=2).reshape(size * size, 2 * half)
    if pe.shape[1] < channels:  # odd channel padding
        pe = torch.cat([pe, pe.new_zeros(pe.shape[0], channels - pe.shape[1])], dim=1)
    return pe


def _mlp(dims: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for a, b in zip(dims[:-1], dims[1:]):
        layers.append(nn.Linear(a, b))
        layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers[:-1])


class ConvBackbone(nn.Module):
    """Small CNN: one downsampling block per width, total stride 2^len."""

    def __init__(self, in_channels: int, widths: tuple[int, ...], out_channels: int):
        super().__init__()
        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                nn.GroupNorm(8, cout), nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False),
                nn.GroupNorm(8, cout), nn.ReLU(inplace=True))
        stages = []
        cin = in_channels
        for width in widths:
            stages.append(block(cin, width))
            cin = width
        self.stages = nn.Sequential(*stages)
        self.proj = nn.Conv2d(cin, out_channels, 1)

    def forward(self, x):
        return self.proj(self.stages(x))


class SelfAttentionBlock(nn.Module):
    def __init__(self, channels: int, heads: int, ffn_dim: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(channels)
        self.ffn = nn.Sequential(nn.Linear(channels, ffn_dim), nn.ReLU(inplace=True),
                                 nn.Linear(ffn_dim, channels))
        self.norm2 = nn.LayerNorm(channels)

    def forward(self, x, key_padding_mask=None):
        a, _ = self.attn(x, x, x, key_padding_mask=key_padding_mask, need_weights=False)
        x = self.norm1(x + a)
        return self.norm2(x + self.ffn(x))


class PriorMapEncoder(nn.Module):
    """Embed historical instances: sin/cos positional + style embeddings,
    refined by self-attention over the instances of a tile."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        enc_dim = cfg.points_per_instance * 4 * cfg.pos_frequencies
        self.n_frequencies = cfg.pos_frequencies
        self.point_proj = nn.Sequential(nn.Linear(enc_dim, cfg.channels),
                                        nn.ReLU(inplace=True),
                                        nn.Linear(cfg.channels, cfg.channels))
        self.style_embed = nn.Embedding(cfg.num_styles, cfg.channels)
        self.layers = nn.ModuleList(
            SelfAttentionBlock(cfg.channels, cfg.attn_heads, cfg.channels * cfg.ffn_ratio)
            for _ in range(cfg.pme_layers))
        self.channels = cfg.channels

    def forward(self, points: torch.Tensor, styles: torch.Tensor) -> torch.Tensor:
        """points: (M, N_p, 2) normalized to [0, 1]; styles: (M,) long.
        Returns (M, channels); M may be zero."""
        if points.shape[0] == 0:
            return points.new_zeros((0, self.channels))
        enc = sine_point_encoding(points, self.n_frequencies).flatten(1)
        x = self.point_proj(enc) + self.style_embed(styles)
        x = x.unsqueeze(0)
        for layer in self.layers:
            x = layer(x)
        return x.squeeze(0)


class BevFeatureFusion(nn.Module):
    """BEV cells attend (as queries) to map embeddings; residual on the grid."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.norm = nn.LayerNorm(channels)

    def forward(self, bev_seq: torch.Tensor, bev_pe: torch.Tensor,
                map_emb: torch.Tensor) -> torch.Tensor:
        q = (bev_seq + bev_pe).unsqueeze(0)
        kv = map_emb.unsqueeze(0)
        a, _ = self.attn(q, kv, kv, need_weights=False)
        return self.norm(bev_seq + a.squeeze(0))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, h = cfg.channels, cfg.attn_heads
        ffn_dim = c * cfg.ffn_ratio
        self.self_attn = nn.MultiheadAttention(c, h, batch_first=True)
        self.norm_self = nn.LayerNorm(c)
        self.map_attn = None
        if cfg.fusion == "decoder_query_ca":
            self.map_attn = nn.MultiheadAttention(c, h, batch_first=True)
            self.norm_map = nn.LayerNorm(c)
        self.bev_attn = nn.MultiheadAttention(c, h, batch_first=True)
        self.norm_bev = nn.LayerNorm(c)
        self.ffn = nn.Sequential(nn.Linear(c, ffn_dim), nn.ReLU(inplace=True),
                                 nn.Linear(ffn_dim, c))
        self.norm_ffn = nn.LayerNorm(c)

    def forward(self, queries, bev_seq, bev_pe, map_emb_list):
        a, _ = self.self_attn(queries, queries, queries, need_weights=False)
        queries = self.norm_self(queries + a)
        if self.map_attn is not None and map_emb_list is not None:
            delta = torch.zeros_like(queries)
            for b, em in enumerate(map_emb_list):
                if em.shape[0] == 0:
                    continue  # no prior instances: cross-attention degrades to identity
                out, _ = self.map_attn(queries[b:b + 1], em.unsqueeze(0), em.unsqueeze(0),
                                       need_weights=False)
                delta[b] = out.squeeze(0)
            queries = self.norm_map(queries + delta)
        kv = bev_seq + bev_pe.unsqueeze(0)
        a, _ = self.bev_attn(queries, kv, bev_seq, need_weights=False)
        queries = self.norm_bev(queries + a)
        return self.norm_ffn(queries + self.ffn(queries))


class AffinityHead(nn.Module):
    """Score predicted-instance x historical-instance association.

    Both sides project into a shared space; the elementwise interaction of
    each pair feeds a classifier. The appended no-match column is a learned
    constant logit, so pair scores calibrate against a fixed reference and
    rows without a counterpart fall to "none" rather than to an arbitrary
    column.
    """

    def __init__(self, channels: int, affinity_dim: int):
        super().__init__()
        self.pred_proj = _mlp([channels, affinity_dim, affinity_dim])
        self.hist_proj = _mlp([channels, affinity_dim, affinity_dim])
        self.no_match_logit = nn.Parameter(torch.zeros(1))
        self.classifier = nn.Sequential(nn.Linear(affinity_dim, affinity_dim),
                                        nn.ReLU(inplace=True),
                                        nn.Linear(affinity_dim, 1))

    def forward(self, inst_feat: torch.Tensor, map_emb: torch.Tensor) -> torch.Tensor:
        f = self.pred_proj(inst_feat)                       # (N, d)
        none_col = self.no_match_logit.expand(f.shape[0], 1)
        if map_emb.shape[0] == 0:
            return none_col
        g = self.hist_proj(map_emb)                         # (M, d)
        pair = f.unsqueeze(1) * g.unsqueeze(0)              # (N, M, d)
        scores = self.classifier(pair).squeeze(-1)
        return torch.cat([scores, none_col], dim=1)


class MapUpdateNet(nn.Module):
    """End-to-end network producing point sets, style logits, and the
    association matrix against the historical tile."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.channels
        self.backbone = ConvBackbone(config.in_channels, config.backbone_widths, c)
        self.pme = PriorMapEncoder(config)
        self.bev_fusion = (BevFeatureFusion(c, config.attn_heads)
                           if config.fusion == "bev_feature_ca" else None)
        self.decoder_layers = nn.ModuleList(DecoderLayer(config)
                                            for _ in range(config.decoder_layers))
        self.instance_embed = nn.Parameter(torch.randn(config.num_instances, c) * 0.02)
        self.point_embed = nn.Parameter(torch.randn(config.points_per_instance, c) * 0.02)
        self.point_head = nn.Sequential(nn.Linear(c, c), nn.ReLU(inplace=True),
                                        nn.Linear(c, 2))
        self.style_head = nn.Sequential(nn.Linear(c, c), nn.ReLU(inplace=True),
                                        nn.Linear(c, config.num_styles))
        self.affinity_head = AffinityHead(c, config.affinity_dim)
        self.register_buffer("bev_pe", _grid_pos_embed(config.feature_size, c),
                             persistent=False)

    # -- spec operations -----------------------------------------------------

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """(B, C_in, H, W) float in [0, 1] -> (B, channels, H/stride, W/stride)."""
        s = self.config.image_size
        if images.shape[-2:] != (s, s) or images.shape[1] != self.config.in_channels:
            raise ConfigError(f"expected image batch (B, {self.config.in_channels}, {s}, {s}), "
                              f"got {tuple(images.shape)}")
        return self.backbone(images)

    def pme_encode(self, points: torch.Tensor, styles: torch.Tensor) -> torch.Tensor:
        return self.pme(points, styles)

    def fuse(self, bev_seq: torch.Tensor, map_emb: torch.Tensor) -> torch.Tensor:
        """Apply the configured fusion to one sample's (HW, C) BEV sequence.
        Pass-through when the variant is not bev_feature_ca or M == 0."""
        if self.bev_fusion is None or map_emb.shape[0] == 0:
            return bev_seq
        return self.bev_fusion(bev_seq, self.bev_pe, map_emb)

    def decode(self, bev_seq_batch: torch.Tensor, map_emb_list,
               all_layers: bool = False):
        """(B, HW, C) fused BEV -> (B, N * N_p, C) query features.

        With ``all_layers`` the per-layer outputs are returned as a list
        (deep supervision); otherwise only the final layer.
        """
        b = bev_seq_batch.shape[0]
        queries = (self.instance_embed.unsqueeze(1)
                   + self.point_embed.unsqueeze(0)).flatten(0, 1)
        queries = queries.unsqueeze(0).expand(b, -1, -1)
        outputs = []
        for layer in self.decoder_layers:
            queries = layer(queries, bev_seq_batch, self.bev_pe, map_emb_list)
            if all_layers:
                outputs.append(queries)
        return outputs if all_layers else queries

    def icp_affinity(self, inst_feat: torch.Tensor, map_emb: torch.Tensor) -> torch.Tensor:
        return self.affinity_head(inst_feat, map_emb)

    # -- full forward ----------------------------------------------------------

    def _apply_heads(self, queries: torch.Tensor, map_embs) -> dict:
        cfg = self.config
        b, c = queries.shape[0], queries.shape[2]
        points = torch.sigmoid(self.point_head(queries)).view(
            b, cfg.num_instances, cfg.points_per_instance, 2)
        inst_feat = queries.view(b, cfg.num_instances, cfg.points_per_instance, c).mean(dim=2)
        style_logits = self.style_head(inst_feat)
        affinity = [self.affinity_head(inst_feat[i], map_embs[i]) for i in range(b)]
        return {"points_norm": points, "style_logits": style_logits,
                "inst_feat": inst_feat, "affinity": affinity}

    def forward(self, images: torch.Tensor, hist_points: list[torch.Tensor],
                hist_styles: list[torch.Tensor], all_layers: bool = False) -> dict:
        """images (B, C_in, H, W); per-sample historical points (M_b, N_p, 2)
        normalized to [0, 1] and styles (M_b,). Returns normalized point sets,
        style logits, per-instance features, and per-sample affinity; with
        ``all_layers`` an ``aux`` list holds the earlier decoder layers' head
        outputs for deep supervision."""
        cfg = self.config
        feats = self.encode_image(images)
        b = feats.shape[0]
        bev_seq = feats.flatten(2).transpose(1, 2)  # (B, HW, C)
        map_embs = [self.pme(p, s) for p, s in zip(hist_points, hist_styles)]
        if self.bev_fusion is not None:
            bev_seq = torch.stack([self.fuse(bev_seq[i], map_embs[i]) for i in range(b)])
        dq_list = map_embs if cfg.fusion == "decoder_query_ca" else None
        if all_layers:
            layer_queries = self.decode(bev_seq, dq_list, all_layers=True)
            out = self._apply_heads(layer_queries[-1], map_embs)
            out["aux"] = [self._apply_heads(q, map_embs) for q in layer_queries[:-1]]
        else:
            out = self._apply_heads(self.decode(bev_seq, dq_list), map_embs)
        out["map_embs"] = map_embs
        return out


# ---------------------------------------------------------------------------
# Tile <-> tensor conversion and inference-time prediction
# ---------------------------------------------------------------------------

def tile_to_tensors(tile: VectorMapTile, cfg: ModelConfig,
                    device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Historical tile -> (points (M, N_p, 2) in [0, 1], style indices (M,))."""
    if tile.width_px != cfg.image_size or tile.height_px != cfg.image_size:
        raise ConfigError(f"tile raster {tile.width_px}x{tile.height_px} does not match "
                          f"model image_size {cfg.image_size}")
    norm = tile.normalized(cfg.points_per_instance)
    ex, ey = norm.extent
    if norm.instances:
        pts = np.stack([inst.points for inst in norm.instances]).astype(np.float32)
        pts[:, :, 0] /= ex
        pts[:, :, 1] /= ey
        styles = np.array([STYLES.index(inst.style) for inst in norm.instances],
                          dtype=np.int64)
    else:
        pts = np.zeros((0, cfg.points_per_instance, 2), dtype=np.float32)
        styles = np.zeros((0,), dtype=np.int64)
    return (torch.from_numpy(pts).to(device) if device else torch.from_numpy(pts),
            torch.from_numpy(styles).to(device) if device else torch.from_numpy(styles))


def image_to_tensor(image: np.ndarray, device=None) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    t = torch.from_numpy(np.array(image, copy=True)).float().permute(2, 0, 1) / 255.0
    return t.to(device) if device else t


def output_to_predictions(output: dict, extent: tuple[float, float]) -> list[Prediction]:
    ex, ey = extent
    preds = []
    points = output["points_norm"].detach().cpu().numpy().astype(np.float64)
    logits = output["style_logits"].detach().cpu().numpy().astype(np.float64)
    for i in range(points.shape[0]):
        pts = points[i].copy()
        pts[:, :, 0] *= ex
        pts[:, :, 1] *= ey
        probs = 1.0 / (1.0 + np.exp(-logits[i]))
        aff = output["affinity"][i].detach().cpu().numpy().astype(np.float64)
        preds.append(Prediction(points=pts, style_logits=logits[i],
                                confidence=probs.max(axis=1), affinity=aff))
    return preds


def predict(model: MapUpdateNet, image: np.ndarray,
            historical: VectorMapTile) -> Prediction:
    """Single-sample eval-mode forward returning metric-coordinate outputs."""
    model.eval()
    pts, styles = tile_to_tensors(historical, model.config)
    with torch.inference_mode():
        out = model(image_to_tensor(image).unsqueeze(0), [pts], [styles])
    return output_to_predictions(out, historical.extent)[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: MapUpdateNet, path, meta: dict | None = None) -> None:
    payload = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "fingerprint": model.config.fingerprint(),
        "state_dict": {k: v.cpu() for k, v in model.state_dict().items()},
        "meta": dict(meta or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_config: ModelConfig | None = None
                    ) -> tuple[MapUpdateNet, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unknown checkpoint format in {path}")
    raw = dict(payload["config"])
    raw["backbone_widths"] = tuple(raw["backbone_widths"])
    config = ModelConfig(**raw)
    if config.fingerprint() != payload["fingerprint"]:
        raise CheckpointError("checkpoint fingerprint does not match its stored config")
    if expected_config is not None and expected_config.fingerprint() != payload["fingerprint"]:
        raise CheckpointError("checkpoint fingerprint does not match the requested config")
    model = MapUpdateNet(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["meta"]
