"""Promptable streaming video-segmentation network.

Pipeline per frame: a small hierarchical conv encoder produces features at
strides 4/8/16; stride-16 features cross-attend over the memory bank
(past frames' spatial features and object pointers); the decoder upsamples
back through transposed convolutions, combining with the stride-8 and
stride-4 encoder skips either through the fusion block (residual + low-rank
branch) or by plain addition; per-class logits come from a dynamic head
parameterized by the box-prompt embeddings.

The network is deliberately small: it exists to exercise the fusion,
memory, loss and augmentation machinery end to end on 32x32 synthetic
videos, not to compete on real footage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import VideoSample
from .errors import ConfigurationError, DimensionError, ValidationError
from .fusion import FeatureMap, FusionBlock
from .memory import BankConfig, MemoryBank, MemoryEntry, MemoryKind

PYRAMID_STRIDES = (4, 8, 16)


@dataclass(frozen=True)
class ModelConfig:
    input_size: Tuple[int, int] = (32, 32)
    channels: Tuple[int, int, int] = (16, 32, 64)  # widths at strides 4, 8, 16
    num_classes: int = 6  # anatomy classes; one background channel is added
    lora_rank: int = 4
    lora_alpha: float = 1.0
    attention_heads: int = 2
    pointer_dim: Optional[int] = None  # defaults to the stride-16 width
    fusion_enabled: bool = True
    lora_s4: bool = True
    lora_s8: bool = True
    prompt_interval: int = 10
    embed_dim: int = 32
    prediction_capacity: int = 6

    def __post_init__(self):
        h, w = self.input_size
        if h % 16 != 0 or w % 16 != 0:
            raise ConfigurationError(f"input size must be divisible by 16, got {self.input_size}")
        if any(c < 1 for c in self.channels):
            raise ConfigurationError(f"channel widths must be positive, got {self.channels}")
        if self.num_classes < 1:
            raise ConfigurationError(f"need at least one class, got {self.num_classes}")
        if self.prompt_interval < 1:
            raise ConfigurationError(f"prompt interval must be >= 1, got {self.prompt_interval}")
        if self.lora_rank >= min(self.channels[0], self.channels[1]):
            raise ConfigurationError(
                f"lora rank {self.lora_rank} must be smaller than the fusion-site widths "
                f"{self.channels[:2]}"
            )
        if self.channels[2] % self.attention_heads != 0:
            raise ConfigurationError(
                f"stride-16 width {self.channels[2]} must divide evenly into "
                f"{self.attention_heads} attention heads"
            )
        if self.pointer_dim is not None and self.pointer_dim != self.channels[2]:
            raise ConfigurationError(
                "object-pointer dimension must equal the stride-16 channel width "
                f"({self.channels[2]}), got {self.pointer_dim}"
            )

    @property
    def num_channels(self) -> int:
        return self.num_classes + 1

    @property
    def resolved_pointer_dim(self) -> int:
        return self.pointer_dim if self.pointer_dim is not None else self.channels[2]


@dataclass
class EncoderFeatures:
    s4: FeatureMap
    s8: FeatureMap
    s16: FeatureMap


@dataclass(frozen=True)
class BoxPrompt:
    """A normalized bounding box for one anatomy class."""

    class_id: int
    box: Tuple[float, float, float, float]  # x_min, y_min, x_max, y_max in [0, 1]

    def __post_init__(self):
        if self.class_id < 1:
            raise ValidationError(f"class_id must be >= 1, got {self.class_id}")
        x0, y0, x1, y1 = self.box
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValidationError(f"degenerate or out-of-range box {self.box}")


@dataclass
class MaskPrediction:
    """Per-class logits for one frame; probabilities are the per-pixel softmax."""

    logits: torch.Tensor  # (num_classes+1, H, W)

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=0)

    def label_map(self) -> np.ndarray:
        return self.probs.argmax(dim=0).cpu().numpy().astype(np.uint8)


class ImageEncoder(nn.Module):
    """Strided conv pyramid producing features at strides 4, 8 and 16."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c4, c8, c16 = config.channels
        self.config = config
        self.stem = nn.Sequential(
            nn.Conv2d(3, c4 // 2, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(c4 // 2, c4, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c4, c4, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c4, c4, 3, padding=1),
            nn.GroupNorm(4, c4),
            nn.ReLU(),
        )
        self.down8 = nn.Sequential(
            nn.Conv2d(c4, c8, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c8, c8, 3, padding=1),
            nn.GroupNorm(4, c8),
            nn.ReLU(),
        )
        self.down16 = nn.Sequential(
            nn.Conv2d(c8, c16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c16, c16, 3, padding=1),
            nn.GroupNorm(4, c16),
        )

    def forward(self, frames: torch.Tensor) -> EncoderFeatures:
        if frames.dim() != 4 or frames.shape[1] != 3:
            raise DimensionError(f"expected (batch, 3, H, W) input, got {tuple(frames.shape)}")
        if tuple(frames.shape[2:]) != tuple(self.config.input_size):
            raise DimensionError(
                f"frame size {tuple(frames.shape[2:])} does not match configured "
                f"input size {tuple(self.config.input_size)}"
            )
        s4 = self.stem(frames)
        s8 = self.down8(s4)
        s16 = self.down16(s8)
        return EncoderFeatures(
            s4=FeatureMap(s4, 4), s8=FeatureMap(s8, 8), s16=FeatureMap(s16, 16)
        )


class PromptEncoder(nn.Module):
    """Box prompts to per-class embedding vectors.

    Each class embedding has two parts: a learned content vector (class
    identity mixed with an encoding of the box corners, or a learned
    no-prompt vector) and a 5-value geometry tail carrying the normalized
    corners plus a prompted flag. The tail lets the decoder interact with
    the box spatially, playing the role positional encodings play in
    full-scale promptable segmenters. Row 0 is the background classifier
    seed and is never prompted.
    """

    GEOMETRY_DIMS = 5  # x_min, y_min, x_max, y_max, prompted flag

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        e = config.embed_dim
        self.class_table = nn.Embedding(config.num_channels, e)
        self.box_mlp = nn.Sequential(nn.Linear(4, e), nn.Tanh(), nn.Linear(e, e))
        self.no_prompt = nn.Parameter(torch.zeros(e))

    def forward(self, prompts: Sequence[BoxPrompt]) -> torch.Tensor:
        ids = [p.class_id for p in prompts]
        if len(ids) != len(set(ids)):
            raise ValidationError(f"duplicate class_id in prompt list: {sorted(ids)}")
        if any(i > self.config.num_classes for i in ids):
            raise ValidationError(
                f"prompt class ids {sorted(ids)} exceed configured {self.config.num_classes} classes"
            )
        by_class = {p.class_id: p for p in prompts}
        device = self.class_table.weight.device
        dtype = self.class_table.weight.dtype
        zero_geom = torch.zeros(self.GEOMETRY_DIMS, device=device, dtype=dtype)
        embeddings = [torch.cat([self.class_table.weight[0], zero_geom])]
        for c in range(1, self.config.num_classes + 1):
            base = self.class_table.weight[c]
            if c in by_class:
                corners = torch.tensor(by_class[c].box, device=device, dtype=dtype)
                geom = torch.cat([corners, torch.ones(1, device=device, dtype=dtype)])
                embeddings.append(torch.cat([base + self.box_mlp(corners), geom]))
            else:
                embeddings.append(torch.cat([base + self.no_prompt, zero_geom]))
        return torch.stack(embeddings, dim=0)


class MemoryAttention(nn.Module):
    """Cross-attention of current stride-16 features over stored memory entries.

    Keys and values come from each entry's flattened spatial features plus its
    object pointer, tagged with a learned context-position embedding and a
    spatial/pointer type embedding. An empty context is the identity map.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.channels[2]
        self.heads = config.attention_heads
        self.head_dim = c // self.heads
        self.q_proj = nn.Linear(c, c)
        self.k_proj = nn.Linear(c, c)
        self.v_proj = nn.Linear(c, c)
        self.out_proj = nn.Linear(c, c)
        self.max_context = 2 + config.prediction_capacity
        self.pos_embed = nn.Embedding(self.max_context, c)
        self.type_embed = nn.Embedding(2, c)  # 0 spatial token, 1 pointer token
        self.channels = c

    def _context_tokens(self, context: Sequence[MemoryEntry], dtype, device) -> torch.Tensor:
        tokens = []
        for i, entry in enumerate(context):
            feats = entry.spatial_features.data
            if feats.shape[1] != self.channels:
                raise ConfigurationError(
                    f"memory entry at frame {entry.frame_index} has {feats.shape[1]} channels, "
                    f"attention expects {self.channels}"
                )
            if entry.object_pointer.shape[0] != self.channels:
                raise ConfigurationError(
                    f"object pointer dimension {entry.object_pointer.shape[0]} does not match "
                    f"attention width {self.channels}"
                )
            pos = self.pos_embed.weight[min(i, self.max_context - 1)]
            spatial = feats.flatten(2).permute(0, 2, 1).reshape(-1, self.channels)
            tokens.append(spatial + pos + self.type_embed.weight[0])
            tokens.append(entry.object_pointer.unsqueeze(0) + pos + self.type_embed.weight[1])
        return torch.cat(tokens, dim=0).to(dtype=dtype, device=device)

    def forward(
        self,
        s16: FeatureMap,
        context: Sequence[MemoryEntry],
        return_weights: bool = False,
    ):
        if not context:
            return (s16, None) if return_weights else s16
        b, c, h, w = s16.shape
        x = s16.data
        queries = x.flatten(2).permute(0, 2, 1)  # (B, Q, C)
        kv = self._context_tokens(context, x.dtype, x.device)  # (K, C)
        k = self.k_proj(kv)
        v = self.v_proj(kv)
        q = self.q_proj(queries)

        nq, nk = q.shape[1], k.shape[0]
        q = q.view(b, nq, self.heads, self.head_dim).permute(0, 2, 1, 3)
        k = k.view(nk, self.heads, self.head_dim).permute(1, 0, 2)
        v = v.view(nk, self.heads, self.head_dim).permute(1, 0, 2)
        scores = torch.einsum("bhqd,hkd->bhqk", q, k) / (self.head_dim**0.5)
        weights = torch.softmax(scores, dim=-1)
        attended = torch.einsum("bhqk,hkd->bhqd", weights, v)
        attended = attended.permute(0, 2, 1, 3).reshape(b, nq, c)
        out = x + self.out_proj(attended).permute(0, 2, 1).view(b, c, h, w)
        fmap = FeatureMap(out, 16)
        return (fmap, weights) if return_weights else fmap


class MemoryEncoder(nn.Module):
    """Fuse attended features with the predicted mask into a memory entry."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.channels[2]
        self.net = nn.Sequential(
            nn.Conv2d(c + config.num_channels, c, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1),
        )

    def forward(self, attended: FeatureMap, probs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        pooled_probs = F.adaptive_avg_pool2d(probs, attended.data.shape[2:])
        feats = self.net(torch.cat([attended.data, pooled_probs], dim=1))
        pointer = feats.mean(dim=(0, 2, 3))
        return feats, pointer


class MaskDecoder(nn.Module):
    """Transposed-conv upsampling with fusion (or plain-add) skips and a dynamic class head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c4, c8, c16 = config.channels
        self.config = config
        self.up16to8 = nn.ConvTranspose2d(c16, c8, kernel_size=2, stride=2)
        self.up8to4 = nn.ConvTranspose2d(c8, c4, kernel_size=2, stride=2)
        self.fuse8 = FusionBlock(
            c8, rank=config.lora_rank, alpha=config.lora_alpha, lora_enabled=config.lora_s8
        )
        self.fuse4 = FusionBlock(
            c4, rank=config.lora_rank, alpha=config.lora_alpha, lora_enabled=config.lora_s4
        )
        self.refine = nn.Conv2d(c4, c4, 3, padding=1)
        self.up4to1 = nn.Sequential(
            nn.ConvTranspose2d(c4, c4, kernel_size=2, stride=2),
            nn.ReLU(),
            nn.Conv2d(c4, c4, 3, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(c4, c4, kernel_size=2, stride=2),
        )
        self.head_proj = nn.Linear(config.embed_dim, c4 + 1)
        # Soft box prior: prompted classes get an inside-the-box logit boost
        # and an outside suppression, rasterized from the embedding's
        # geometry tail against normalized pixel-center coordinates.
        self.box_gain_in = nn.Parameter(torch.tensor(2.0))
        self.box_gain_out = nn.Parameter(torch.tensor(-2.0))
        self.box_sharpness = 40.0

    def _box_prior(self, geometry: torch.Tensor, height: int, width: int) -> torch.Tensor:
        """(num_channels, 5) geometry tail -> (num_channels, H, W) additive logit prior."""
        device, dtype = geometry.device, geometry.dtype
        xs = (torch.arange(width, device=device, dtype=dtype) + 0.5) / width
        ys = (torch.arange(height, device=device, dtype=dtype) + 0.5) / height
        x0, y0, x1, y1, flag = geometry.unbind(dim=1)
        k = self.box_sharpness
        inside_x = torch.sigmoid(k * (xs[None, :] - x0[:, None])) * torch.sigmoid(
            k * (x1[:, None] - xs[None, :])
        )  # (C, W)
        inside_y = torch.sigmoid(k * (ys[None, :] - y0[:, None])) * torch.sigmoid(
            k * (y1[:, None] - ys[None, :])
        )  # (C, H)
        inside = inside_y[:, :, None] * inside_x[:, None, :]  # (C, H, W)
        prior = self.box_gain_in * inside + self.box_gain_out * (1.0 - inside)
        return flag[:, None, None] * prior

    def forward(
        self,
        attended: FeatureMap,
        feats: EncoderFeatures,
        prompt_emb: torch.Tensor,
        fusion_enabled: Optional[bool] = None,
    ) -> torch.Tensor:
        fusion = self.config.fusion_enabled if fusion_enabled is None else fusion_enabled
        x8u = self.up16to8(attended.data)
        if fusion:
            x8 = self.fuse8(feats.s8, FeatureMap(x8u, 8)).value.data
        else:
            x8 = feats.s8.data + x8u
        x4u = self.up8to4(x8)
        if fusion:
            x4 = self.fuse4(feats.s4, FeatureMap(x4u, 4)).value.data
        else:
            x4 = feats.s4.data + x4u
        full = self.up4to1(torch.relu(self.refine(x4)))  # (B, c4, H, W)
        content = prompt_emb[:, : self.config.embed_dim]
        geometry = prompt_emb[:, self.config.embed_dim :]
        wb = self.head_proj(content)  # (num_channels, c4+1)
        weight, bias = wb[:, :-1], wb[:, -1]
        logits = torch.einsum("bkhw,ck->bchw", full, weight) + bias[None, :, None, None]
        logits = logits + self._box_prior(geometry, full.shape[2], full.shape[3])[None]
        return logits


def frame_to_tensor(frame: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) uint8 image to a (1, 3, H, W) float tensor in [0, 1]."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise DimensionError(f"expected an (H, W, 3) RGB frame, got shape {frame.shape}")
    arr = torch.from_numpy(np.ascontiguousarray(frame).copy()).to(dtype) / 255.0
    return arr.permute(2, 0, 1).unsqueeze(0)


def label_to_onehot(label: np.ndarray, num_channels: int, dtype=torch.float32) -> torch.Tensor:
    """(H, W) class indices to a (1, num_channels, H, W) one-hot tensor."""
    t = torch.from_numpy(np.ascontiguousarray(label).copy()).long()
    return F.one_hot(t, num_channels).permute(2, 0, 1).unsqueeze(0).to(dtype)


def boxes_from_label(label: np.ndarray, num_classes: int = 6) -> List[BoxPrompt]:
    """Normalized bounding rectangles of every class present in a label map."""
    h, w = label.shape
    prompts = []
    for c in range(1, num_classes + 1):
        ys, xs = np.nonzero(label == c)
        if ys.size == 0:
            continue
        box = (
            float(xs.min()) / w,
            float(ys.min()) / h,
            float(xs.max() + 1) / w,
            float(ys.max() + 1) / h,
        )
        prompts.append(BoxPrompt(class_id=c, box=box))
    return prompts


def schedule_from_labels(
    labels: Sequence[np.ndarray], interval: int, num_classes: int = 6
) -> Dict[int, List[BoxPrompt]]:
    """Ground-truth-derived box prompts at every ``interval``-th frame index."""
    if interval < 1:
        raise ConfigurationError(f"prompt interval must be >= 1, got {interval}")
    schedule = {}
    for t in range(0, len(labels), interval):
        prompts = boxes_from_label(labels[t], num_classes)
        if prompts:
            schedule[t] = prompts
    return schedule


class SegModel(nn.Module):
    """Full promptable streaming segmenter."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = ImageEncoder(config)
        self.prompt_encoder = PromptEncoder(config)
        self.attention = MemoryAttention(config)
        self.memory_encoder = MemoryEncoder(config)
        self.decoder = MaskDecoder(config)

    def new_bank(self, record_trace: bool = False) -> MemoryBank:
        return MemoryBank(
            BankConfig(
                prediction_capacity=self.config.prediction_capacity,
                pointer_dim=self.config.resolved_pointer_dim,
            ),
            record_trace=record_trace,
        )

    def fusion_modules(self) -> List[FusionBlock]:
        return [self.decoder.fuse8, self.decoder.fuse4]

    def encode_image(self, frames: torch.Tensor) -> EncoderFeatures:
        return self.encoder(frames)

    def encode_prompt(self, prompts: Sequence[BoxPrompt]) -> torch.Tensor:
        return self.prompt_encoder(prompts)

    def memory_attend(self, s16: FeatureMap, context, return_weights: bool = False):
        return self.attention(s16, context, return_weights=return_weights)

    def decode_masks(
        self,
        attended: FeatureMap,
        feats: EncoderFeatures,
        prompt_emb: torch.Tensor,
        fusion_enabled: Optional[bool] = None,
    ) -> torch.Tensor:
        return self.decoder(attended, feats, prompt_emb, fusion_enabled=fusion_enabled)

    def _as_batch(self, frame) -> torch.Tensor:
        if isinstance(frame, np.ndarray):
            return frame_to_tensor(frame, dtype=next(self.parameters()).dtype)
        if frame.dim() == 3:
            return frame.unsqueeze(0)
        return frame

    def forward_frame(
        self,
        frame,
        prompts: Sequence[BoxPrompt],
        frame_index: int,
        bank: MemoryBank,
    ) -> MaskPrediction:
        """Segment one frame, then append its memory entry to the bank."""
        x = self._as_batch(frame)
        feats = self.encode_image(x)
        prompt_emb = self.encode_prompt(prompts)
        context = bank.gather_context(frame_index)
        attended = self.memory_attend(feats.s16, context)
        logits = self.decode_masks(attended, feats, prompt_emb)
        probs = torch.softmax(logits, dim=1)
        mem_feats, pointer = self.memory_encoder(attended, probs)
        kind = MemoryKind.PROMPT if prompts else MemoryKind.PREDICTION
        bank.insert(
            MemoryEntry(
                frame_index=frame_index,
                kind=kind,
                spatial_features=FeatureMap(mem_feats, 16),
                object_pointer=pointer,
            )
        )
        return MaskPrediction(logits[0])

    def forward_video(
        self,
        video: VideoSample,
        schedule: Dict[int, List[BoxPrompt]],
        record_trace: bool = False,
    ) -> List[MaskPrediction]:
        """Stream a whole video with a fresh memory bank."""
        n = video.num_frames
        bad = [t for t in schedule if t < 0 or t >= n]
        if bad:
            raise ValidationError(
                f"prompt schedule references frames {sorted(bad)} outside the video length {n}"
            )
        bank = self.new_bank(record_trace=record_trace)
        predictions = []
        for t in range(n):
            predictions.append(self.forward_frame(video.frames[t], schedule.get(t, []), t, bank))
        return predictions
