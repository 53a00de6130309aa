"""State encoder: a short observation history to one fixed embedding.

The environment is observed through single velocity-free rasters, so the
current frame alone underdetermines the state. The encoder tokenizes the
current and the P most recent frames with a small strided-convolution
stack, adds sinusoidal positions, runs a causal attention stack, and
projects the flattened tokens down to a compact embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass
class EncoderConfig:
    d_model: int = 64        # reference-scale value: 512
    n_layers: int = 2        # reference-scale value: 4
    n_heads: int = 2         # reference-scale value: 4
    d_ff: int = 128          # reference-scale value: 2048
    d_state: int = 32
    context_len: int = 5     # P: frames of history in addition to the current one
    conv_channels: tuple = (8, 16, 32)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if len(self.conv_channels) != 3:
            raise ValueError("conv_channels must list three widths")


class ObsHistory:
    """Exactly P+1 frames, oldest first. Short prefixes repeat the oldest frame."""

    def __init__(self, frames, context_len):
        frames = list(frames)
        if not frames:
            raise ValueError("history needs at least one frame")
        want = context_len + 1
        if len(frames) < want:
            frames = [frames[0]] * (want - len(frames)) + frames
        elif len(frames) > want:
            frames = frames[-want:]
        shapes = {f.shape for f in frames}
        if len(shapes) != 1:
            raise ValueError("history frames must share one shape")
        self.frames = frames
        self.context_len = context_len

    def stacked(self):
        return np.stack(self.frames, axis=0)  # (P+1, C, H, W)

    def __len__(self):
        return len(self.frames)


class StateEncoder(nn.Module):
    """tokenize: raster -> d_model vector; encode: history -> d_state embedding."""

    def __init__(self, config: EncoderConfig, raster_px=32, rng=None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.raster_px = raster_px
        c = config
        c1, c2, c3 = c.conv_channels
        self.conv1 = nn.Conv2d(1, c1, 3, rng, stride=2, padding=1, dtype=dtype)
        self.conv2 = nn.Conv2d(c1, c2, 3, rng, stride=2, padding=1, dtype=dtype)
        self.conv3 = nn.Conv2d(c2, c3, 3, rng, stride=2, padding=1, dtype=dtype)
        side = raster_px
        for _ in range(3):
            side = (side + 1) // 2
        self._flat_dim = c3 * side * side
        self.tok_proj = nn.Dense(self._flat_dim, c.d_model, rng, dtype=dtype)
        self.blocks = [
            nn.TransformerBlock(c.d_model, c.n_heads, c.d_ff, rng, dtype=dtype)
            for _ in range(c.n_layers)
        ]
        seq = c.context_len + 1
        self.head1 = nn.Dense(seq * c.d_model, 2 * c.d_state, rng, dtype=dtype)
        self.head2 = nn.Dense(2 * c.d_state, c.d_state, rng, dtype=dtype)
        self.out_norm = nn.LayerNorm(c.d_state, dtype=dtype)
        self._pos = nn.sinusoidal_embedding(np.arange(seq), c.d_model, dtype=dtype)

    # ---- ops -----------------------------------------------------------

    def tokenize(self, obs) -> Tensor:
        """One raster (C,H,W) or a batch (N,C,H,W) to d_model token(s)."""
        x = obs if isinstance(obs, Tensor) else Tensor(np.asarray(obs, dtype=self.conv1.w.dtype))
        single = x.ndim == 3
        if single:
            x = ad.reshape(x, (1,) + x.shape)
        if x.shape[1] != 1 or x.shape[2] != self.raster_px or x.shape[3] != self.raster_px:
            raise ad.ShapeMismatch(
                f"expected rasters (N,1,{self.raster_px},{self.raster_px}), got {x.shape}"
            )
        h = ad.silu(self.conv1(x))
        h = ad.silu(self.conv2(h))
        h = ad.silu(self.conv3(h))
        h = ad.reshape(h, (h.shape[0], self._flat_dim))
        tok = self.tok_proj(h)
        return tok[0] if single else tok

    def encode_tokens(self, tokens: Tensor) -> Tensor:
        """Token sequence(s) (N, P+1, d_model) -> embeddings (N, d_state)."""
        x = tokens + Tensor(self._pos)
        for block in self.blocks:
            x = block(x)
        flat = ad.reshape(x, (x.shape[0], x.shape[1] * x.shape[2]))
        h = ad.silu(self.head1(flat))
        return self.out_norm(self.head2(h))

    def encode(self, history: ObsHistory) -> Tensor:
        """One observation history to a d_state embedding."""
        if len(history.frames) != self.config.context_len + 1:
            raise ValueError(
                f"history must have {self.config.context_len + 1} frames, got {len(history.frames)}"
            )
        tokens = self.tokenize(Tensor(history.stacked().astype(self.conv1.w.dtype)))
        emb = self.encode_tokens(ad.reshape(tokens, (1,) + tokens.shape))
        return emb[0]

    def encode_batch(self, histories) -> Tensor:
        """Batch of ObsHistory to (N, d_state), one tokenizer pass for all frames."""
        seq = self.config.context_len + 1
        stacked = np.concatenate([h.stacked() for h in histories], axis=0)
        tokens = self.tokenize(Tensor(stacked.astype(self.conv1.w.dtype)))
        tokens = ad.reshape(tokens, (len(histories), seq, self.config.d_model))
        return self.encode_tokens(tokens)
