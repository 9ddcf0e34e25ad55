"""The question-generation network and its variant wiring.

Image path: raw features (or a small conv stack over 3x32x32 synthetic
images) -> FC -> batch norm -> i in R^{B x 300}. Text path: embedded
guiding context (category, or answer;category) through a pre-norm
transformer encoder -> S. Fusion appends i to S as one extra sequence
position, X = [S; i]. The decoder runs causal self-attention over
[i; start; q_0..q_18] (image prepended as a leading memory-style position),
cross-attends into X, and predicts q_0..q_19. A two-layer head can
reconstruct the raw image features from mean-pooled X.

Variants: image-only (no text encoder), image-cat (category context),
image-ans-cat (answer;category context), text-only (no image path).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import rng
from .data import CATEGORY_NAMES
from .errors import ConfigError, DataError, ShapeError
from .tensor import (
    Tensor,
    avg_pool2d,
    batch_stats_norm,
    concat,
    conv2d,
    dropout as drop_op,
    embedding,
    layer_norm,
)
from .text import ANSWER_LEN, PAD, QUESTION_LEN, START, UNK, Vocabulary, make_pad_mask

VARIANTS = ("image-only", "image-cat", "image-ans-cat", "text-only")

# Synthetic images run through the built-in conv stack: 3x32x32 -> 64 features.
CONV_IMAGE_SHAPE = (3, 32, 32)
CONV_INPUT_WIDTH = 3 * 32 * 32
CONV_FEATURE_WIDTH = 64


@dataclass
class ModelConfig:
    vocab_size: int
    variant: str = "image-ans-cat"
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 300
    d_ff: int = 300
    question_len: int = QUESTION_LEN
    answer_len: int = ANSWER_LEN
    feature_width: int = 512  # F; forced to 64 when image_source == "conv"
    image_source: str = "vector"  # "vector" (precomputed) | "conv" (raw 3x32x32)
    reconstruct_image: bool = True
    lambda_recon: float = 1.0
    dropout: float = 0.0
    freeze_embeddings: bool = False
    positional_encoding: bool = True
    bn_momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.image_source not in ("vector", "conv"):
            raise ConfigError(f"image_source must be vector|conv, got {self.image_source!r}")
        if self.image_source == "conv":
            self.feature_width = CONV_FEATURE_WIDTH
        if self.variant == "text-only":
            self.reconstruct_image = False  # nothing to reconstruct without an image path
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def uses_image(self) -> bool:
        return self.variant != "text-only"

    @property
    def uses_text(self) -> bool:
        return self.variant != "image-only"

    @property
    def context_len(self) -> int:
        if self.variant == "image-cat":
            return 1
        if self.variant in ("image-ans-cat", "text-only"):
            return self.answer_len + 1
        return 0

    def to_json_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json_dict(cls, blob: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(blob) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**blob)


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos position table, (max_len, d_model)."""
    positions = np.arange(max_len, dtype=np.float64)[:, None]
    dims = np.arange(d_model, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, (2.0 * (dims // 2)) / d_model)
    table = np.where(dims % 2 == 0, np.sin(angles), np.cos(angles))
    return table


# ---- parameter-holding submodules ----


class _Linear:
    def __init__(self, model: "VqgModel", prefix: str, d_in: int, d_out: int):
        self.w = model._param(f"{prefix}.w", (d_in, d_out), "xavier")
        self.b = model._param(f"{prefix}.b", (d_out,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class _LayerNorm:
    def __init__(self, model: "VqgModel", prefix: str, d: int, eps: float):
        self.gain = model._param(f"{prefix}.gain", (d,), "ones")
        self.bias = model._param(f"{prefix}.bias", (d,), "zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, eps=self.eps)


class _MultiHeadAttention:
    def __init__(self, model: "VqgModel", prefix: str, d_model: int, n_heads: int):
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = _Linear(model, f"{prefix}.wq", d_model, d_model)
        self.wk = _Linear(model, f"{prefix}.wk", d_model, d_model)
        self.wv = _Linear(model, f"{prefix}.wv", d_model, d_model)
        self.wo = _Linear(model, f"{prefix}.wo", d_model, d_model)

    def __call__(self, q_in: Tensor, kv_in: Tensor, mask: np.ndarray) -> Tensor:
        """mask: boolean (B, Tq, Tk) or (B, 1, Tk); True = may attend."""
        b, tq, d = q_in.shape
        tk = kv_in.shape[1]
        h, dh = self.n_heads, self.d_head

        def split(x: Tensor, t: int) -> Tensor:  # (B, T, D) -> (B, h, T, dh)
            return x.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        q = split(self.wq(q_in), tq)
        k = split(self.wk(kv_in), tk)
        v = split(self.wv(kv_in), tk)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))  # (B, h, Tq, Tk)
        if mask.ndim != 3:
            raise ShapeError(f"attention mask must be 3D, got {mask.shape}")
        blocked = ~np.ascontiguousarray(mask)[:, None, :, :]  # broadcast over heads
        weights = scores.masked_fill(blocked, -1e9).softmax()
        out = weights @ v  # (B, h, Tq, dh)
        return self.wo(out.transpose(0, 2, 1, 3).reshape(b, tq, d))


class _FeedForward:
    def __init__(self, model: "VqgModel", prefix: str, d_model: int, d_ff: int):
        self.l1 = _Linear(model, f"{prefix}.l1", d_model, d_ff)
        self.l2 = _Linear(model, f"{prefix}.l2", d_ff, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(self.l1(x).relu())


class _EncoderLayer:
    """Pre-norm: residual around attention and feed-forward."""

    def __init__(self, model: "VqgModel", prefix: str, cfg: ModelConfig):
        self.ln1 = _LayerNorm(model, f"{prefix}.ln1", cfg.d_model, cfg.eps)
        self.attn = _MultiHeadAttention(model, f"{prefix}.attn", cfg.d_model, cfg.n_heads)
        self.ln2 = _LayerNorm(model, f"{prefix}.ln2", cfg.d_model, cfg.eps)
        self.ff = _FeedForward(model, f"{prefix}.ff", cfg.d_model, cfg.d_ff)

    def __call__(self, x: Tensor, mask: np.ndarray, model: "VqgModel") -> Tensor:
        normed = self.ln1(x)
        x = x + model._drop(self.attn(normed, normed, mask))
        x = x + model._drop(self.ff(self.ln2(x)))
        return x


class _DecoderLayer:
    def __init__(self, model: "VqgModel", prefix: str, cfg: ModelConfig):
        self.ln1 = _LayerNorm(model, f"{prefix}.ln1", cfg.d_model, cfg.eps)
        self.self_attn = _MultiHeadAttention(model, f"{prefix}.self", cfg.d_model, cfg.n_heads)
        self.ln2 = _LayerNorm(model, f"{prefix}.ln2", cfg.d_model, cfg.eps)
        self.cross_attn = _MultiHeadAttention(model, f"{prefix}.cross", cfg.d_model, cfg.n_heads)
        self.ln3 = _LayerNorm(model, f"{prefix}.ln3", cfg.d_model, cfg.eps)
        self.ff = _FeedForward(model, f"{prefix}.ff", cfg.d_model, cfg.d_ff)

    def __call__(
        self,
        x: Tensor,
        self_mask: np.ndarray,
        memory: Tensor,
        memory_mask: np.ndarray,
        model: "VqgModel",
    ) -> Tensor:
        normed = self.ln1(x)
        x = x + model._drop(self.self_attn(normed, normed, self_mask))
        x = x + model._drop(self.cross_attn(self.ln2(x), memory, memory_mask))
        x = x + model._drop(self.ff(self.ln3(x)))
        return x


class _BatchNorm1d:
    """Population-variance batch norm over (B, D) with running statistics."""

    def __init__(self, model: "VqgModel", prefix: str, d: int, eps: float, momentum: float):
        self.gain = model._param(f"{prefix}.gain", (d,), "ones")
        self.bias = model._param(f"{prefix}.bias", (d,), "zeros")
        self.eps = eps
        self.momentum = momentum
        self.mean_key = f"{prefix}.running_mean"
        self.var_key = f"{prefix}.running_var"
        model._buffers[self.mean_key] = np.zeros(d)
        model._buffers[self.var_key] = np.ones(d)
        self._model = model

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        buffers = self._model._buffers
        if train:
            normed, batch_mean, batch_var = batch_stats_norm(x, eps=self.eps)
            m = self.momentum
            buffers[self.mean_key] = (1.0 - m) * buffers[self.mean_key] + m * batch_mean
            buffers[self.var_key] = (1.0 - m) * buffers[self.var_key] + m * batch_var
        else:
            mean = Tensor(buffers[self.mean_key])
            var = Tensor(buffers[self.var_key])
            normed = (x - mean) * ((var + self.eps) ** -0.5)
        return normed * self.gain + self.bias


class _ConvStack:
    """3x32x32 -> 64 features: conv5(3->8), pool2, conv3(8->4), pool4."""

    def __init__(self, model: "VqgModel", prefix: str):
        self.w1 = model._param(f"{prefix}.c1.w", (8, 3, 5, 5), "xavier_conv")
        self.b1 = model._param(f"{prefix}.c1.b", (8,), "zeros")
        self.w2 = model._param(f"{prefix}.c2.w", (4, 8, 3, 3), "xavier_conv")
        self.b2 = model._param(f"{prefix}.c2.b", (4,), "zeros")

    def __call__(self, images: Tensor) -> Tensor:
        x = conv2d(images, self.w1, self.b1, stride=1, padding=2).relu()
        x = avg_pool2d(x, 2)  # (B, 8, 16, 16)
        x = conv2d(x, self.w2, self.b2, stride=1, padding=1).relu()
        x = avg_pool2d(x, 4)  # (B, 4, 4, 4)
        return x.reshape(x.shape[0], CONV_FEATURE_WIDTH)


@dataclass
class ForwardResult:
    logits: Tensor  # (B, question_len, V)
    recon: Tensor | None  # (B, F) reconstructed features, when enabled
    recon_target: Tensor | None  # (B, F) detached feature target


class VqgModel:
    """Parameters, buffers, and the forward paths for one variant."""

    def __init__(
        self,
        config: ModelConfig,
        vocab: Vocabulary,
        seed: int,
        pretrained_embeddings: np.ndarray | None = None,
    ):
        if config.vocab_size != len(vocab):
            raise ConfigError(
                f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}"
            )
        self.config = config
        self.vocab = vocab
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._drop_gen: np.random.Generator | None = None
        cfg = config

        self.embed = self._param(
            "embed.table", (cfg.vocab_size, cfg.d_model), "embedding", pretrained_embeddings
        )
        if cfg.freeze_embeddings:
            self.embed.requires_grad = False
        self.pe = sinusoidal_positions(max(cfg.question_len, cfg.context_len) + 2, cfg.d_model)

        if cfg.uses_text:
            self.encoder_layers = [
                _EncoderLayer(self, f"encoder.{i}", cfg) for i in range(cfg.n_layers)
            ]
            self.encoder_norm = _LayerNorm(self, "encoder.norm", cfg.d_model, cfg.eps)
        else:
            self.encoder_layers = []
            self.encoder_norm = None

        self.decoder_layers = [
            _DecoderLayer(self, f"decoder.{i}", cfg) for i in range(cfg.n_layers)
        ]
        self.decoder_norm = _LayerNorm(self, "decoder.norm", cfg.d_model, cfg.eps)
        self.out_proj = _Linear(self, "out_proj", cfg.d_model, cfg.vocab_size)

        if cfg.uses_image:
            self.conv = _ConvStack(self, "conv") if cfg.image_source == "conv" else None
            self.image_fc = _Linear(self, "image_head.fc", cfg.feature_width, cfg.d_model)
            self.image_bn = _BatchNorm1d(
                self, "image_head.bn", cfg.d_model, cfg.eps, cfg.bn_momentum
            )
            if cfg.reconstruct_image:
                self.recon_l1 = _Linear(self, "recon.l1", cfg.d_model, cfg.d_model)
                self.recon_l2 = _Linear(self, "recon.l2", cfg.d_model, cfg.feature_width)

        self._cat_token_ids = np.asarray([vocab.id_for(n) for n in CATEGORY_NAMES])

    # ---- parameter plumbing ----

    def _param(
        self, name: str, shape: tuple[int, ...], init: str, preset: np.ndarray | None = None
    ) -> Tensor:
        """Create one named leaf parameter.

        Each parameter draws from its own stream keyed by (seed, name hash),
        so adding or removing other modules never shifts anyone's init.
        """
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        gen = rng.generator(self.seed, rng.ROLE_INIT, zlib.crc32(name.encode("utf-8")))
        if preset is not None:
            data = np.asarray(preset, dtype=np.float64)
            if data.shape != shape:
                raise ShapeError(f"preset for {name} has shape {data.shape}, expected {shape}")
        elif init == "xavier":
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = gen.uniform(-limit, limit, size=shape)
        elif init == "xavier_conv":
            receptive = shape[2] * shape[3]
            limit = np.sqrt(6.0 / (shape[1] * receptive + shape[0] * receptive))
            data = gen.uniform(-limit, limit, size=shape)
        elif init == "embedding":
            data = gen.normal(0.0, 0.02, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ConfigError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self._params.items() if p.requires_grad]

    def buffers(self) -> dict[str, np.ndarray]:
        return self._buffers

    def param_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def _drop(self, x: Tensor) -> Tensor:
        if self._drop_gen is None or self.config.dropout == 0.0:
            return x
        return drop_op(x, self.config.dropout, self._drop_gen)

    def set_dropout_stream(self, gen: np.random.Generator | None) -> None:
        """Arm (or disarm) dropout for subsequent forward calls."""
        self._drop_gen = gen

    # ---- forward paths ----

    def _embed_positions(self, ids: np.ndarray) -> Tensor:
        x = embedding(self.embed, ids) * np.sqrt(float(self.config.d_model))
        if self.config.positional_encoding:
            x = x + Tensor(self.pe[: ids.shape[1]])
        return x

    def encode_image(self, features: np.ndarray, train: bool) -> tuple[Tensor, Tensor]:
        """(B, W) raw features -> (i (B, d_model), f (B, F) before the head)."""
        if not self.config.uses_image:
            raise ConfigError("text-only model has no image path")
        features = np.asarray(features, dtype=np.float64)
        if self.config.image_source == "conv":
            if features.ndim != 2 or features.shape[1] != CONV_INPUT_WIDTH:
                raise ShapeError(
                    f"conv image source expects (B, {CONV_INPUT_WIDTH}), got {features.shape}"
                )
            images = Tensor(features).reshape(features.shape[0], *CONV_IMAGE_SHAPE)
            f = self.conv(images)
        else:
            if features.ndim != 2 or features.shape[1] != self.config.feature_width:
                raise ShapeError(
                    f"expected (B, {self.config.feature_width}) features, got {features.shape}"
                )
            f = Tensor(features)
        i = self.image_bn(self.image_fc(f), train=train)
        return i, f

    def build_context(
        self, answer_ids: np.ndarray | None, category_ids: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Guiding token ids + pad mask for the current variant."""
        if not self.config.uses_text:
            raise DataError("image-only variant has no text context")
        category_ids = np.asarray(category_ids)
        cat_tokens = self._cat_token_ids[category_ids]  # (B,)
        if np.any(cat_tokens == UNK):
            missing = sorted(
                {CATEGORY_NAMES[c] for c in np.asarray(category_ids)[cat_tokens == UNK]}
            )
            raise DataError(f"category names missing from vocabulary: {missing}")
        if self.config.variant == "image-cat":
            ids = cat_tokens[:, None]
        else:  # image-ans-cat, text-only: [answer tokens; category]
            if answer_ids is None:
                raise DataError(f"variant {self.config.variant} needs answer ids")
            answer_ids = np.asarray(answer_ids)
            if answer_ids.ndim != 2 or answer_ids.shape[1] != self.config.answer_len:
                raise ShapeError(
                    f"answer ids must be (B, {self.config.answer_len}), got {answer_ids.shape}"
                )
            ids = np.concatenate([answer_ids, cat_tokens[:, None]], axis=1)
        return ids.astype(np.int64), make_pad_mask(ids)

    def encode_text(self, context_ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Guiding context -> S (B, T, d_model); pads never attended to."""
        x = self._embed_positions(context_ids)
        for layer in self.encoder_layers:
            x = layer(x, mask, self)
        return self.encoder_norm(x)

    def fuse(self, s: Tensor | None, i: Tensor | None, text_mask: np.ndarray | None):
        """X = [S; i] with the image appended as one extra position."""
        if i is not None and s is not None:
            x = concat([s, i.reshape(i.shape[0], 1, self.config.d_model)], axis=1)
            mask = np.concatenate(
                [text_mask, np.ones((text_mask.shape[0], 1, 1), dtype=bool)], axis=2
            )
        elif i is not None:
            x = i.reshape(i.shape[0], 1, self.config.d_model)
            mask = np.ones((i.shape[0], 1, 1), dtype=bool)
        elif s is not None:
            x, mask = s, text_mask
        else:
            raise DataError("fuse needs an image feature, a text encoding, or both")
        return x, mask

    def decode(
        self,
        x: Tensor,
        src_mask: np.ndarray,
        question_ids: np.ndarray,
        i: Tensor | None,
    ) -> Tensor:
        """Teacher-forced logits (B, question_len, V).

        Decoder input is [start; q_0..q_{L-2}]; when an image feature is
        given it is prepended as a leading position that every step may
        attend to but that emits no logit.
        """
        question_ids = np.asarray(question_ids)
        b, qlen = question_ids.shape
        if qlen != self.config.question_len:
            raise ShapeError(f"expected question length {self.config.question_len}, got {qlen}")
        dec_in = np.concatenate(
            [np.full((b, 1), START, dtype=np.int64), question_ids[:, :-1]], axis=1
        )
        seq = self._embed_positions(dec_in)
        offset = 0
        if i is not None:
            seq = concat([i.reshape(b, 1, self.config.d_model), seq], axis=1)
            offset = 1
        length = qlen + offset

        causal = np.tril(np.ones((length, length), dtype=bool))
        keys_real = np.ones((b, length), dtype=bool)
        keys_real[:, offset:] = dec_in != PAD
        self_mask = causal[None, :, :] & keys_real[:, None, :]

        for layer in self.decoder_layers:
            seq = layer(seq, self_mask, x, src_mask, self)
        seq = self.decoder_norm(seq)
        out = seq.narrow(1, offset, qlen) if offset else seq
        return self.out_proj(out)

    def reconstruct(self, x: Tensor, src_mask: np.ndarray) -> Tensor:
        """Masked mean-pool over X, then the two-layer head -> (B, F)."""
        if not self.config.reconstruct_image:
            raise ConfigError("reconstruction head is disabled in this configuration")
        weights = src_mask[:, 0, :, None].astype(np.float64)  # (B, T, 1)
        total = (x * Tensor(weights)).sum(axis=1)  # (B, D)
        count = Tensor(weights.sum(axis=1))  # (B, 1)
        pooled = total / count
        return self.recon_l2(self.recon_l1(pooled).relu())

    def forward(
        self,
        features: np.ndarray | None,
        answer_ids: np.ndarray | None,
        category_ids: np.ndarray | None,
        question_ids: np.ndarray,
        train: bool,
    ) -> ForwardResult:
        """Variant-dispatched full forward pass producing logits (+recon)."""
        cfg = self.config
        i = f = None
        if cfg.uses_image:
            if features is None:
                raise DataError(f"variant {cfg.variant} needs image features")
            i, f = self.encode_image(features, train=train)
        s = text_mask = None
        if cfg.uses_text:
            ctx_ids, text_mask = self.build_context(
                answer_ids if cfg.variant != "image-cat" else None, category_ids
            )
            s = self.encode_text(ctx_ids, text_mask)
        x, src_mask = self.fuse(s, i, text_mask)
        logits = self.decode(x, src_mask, question_ids, i)
        recon = target = None
        if cfg.reconstruct_image:
            recon = self.reconstruct(x, src_mask)
            target = f.detach()
        return ForwardResult(logits=logits, recon=recon, recon_target=target)
