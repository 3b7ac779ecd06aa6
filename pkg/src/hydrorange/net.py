"""Dual-branch range regressor.

One convolution branch reads the log-mel maps, the other the whitened
cross-correlation maps.  The two stacks have identical layer shapes and,
when sharing is on, the central 2x2 window of every 3x3 kernel is a single
tensor read by both branches; the five edge taps stay branch-private.  Each
block wraps its two convolutions in a residual connection scaled by a
learnable per-block factor, followed by 2x2 max pooling and dropout.
Branch outputs are concatenated on the channel axis, projected per frame to
the trunk width, passed through conformer blocks (half-step feed-forwards,
multi-head self-attention over frames, depthwise temporal convolution),
mean-pooled over frames, and regressed to a single range value by a small
MLP head.

Weights live in a flat key -> tensor store; checkpoints serialize the
config plus every tensor little-endian float32 and round-trip bit-exactly.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, NumericError

CHECKPOINT_MAGIC = b"ACAN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters plus the input shapes they were built for."""

    in_channels: int = 3      # log-mel branch input maps
    in_pairs: int = 3         # correlation branch input maps
    frames: int = 74
    mel_bins: int = 64
    lag_bins: int = 64
    conv_blocks: int = 3
    base_filters: int = 12
    dropout_p: float = 0.2
    conformer_blocks: int = 2
    model_dim: int = 64
    attn_heads: int = 4
    ff_expansion: int = 4
    conv_kernel_temporal: int = 7
    head_hidden: int = 128
    residual_scale_init: float = 0.5
    share_centers: bool = True
    with_gcc_branch: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.attn_heads:
            raise DataError("model_dim must be divisible by attn_heads")
        if self.conv_kernel_temporal % 2 == 0 or self.conv_kernel_temporal < 1:
            raise DataError("temporal kernel must be odd and positive")
        if self.conv_blocks < 0 or self.conformer_blocks < 0:
            raise DataError("block counts cannot be negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise DataError("dropout_p must lie in [0, 1)")
        if self.with_gcc_branch and self.mel_bins != self.lag_bins:
            raise DataError(
                "branch fusion needs equal feature widths; "
                f"got mel_bins={self.mel_bins}, lag_bins={self.lag_bins}"
            )
        t, f = self.frames, self.mel_bins
        for _ in range(self.conv_blocks):
            t, f = t // 2, f // 2
            if t < 1 or f < 1:
                raise DataError(
                    f"{self.conv_blocks} pooling stages exhaust input {self.frames}x{self.mel_bins}"
                )

    def pooled_dims(self) -> tuple[int, int]:
        t, f = self.frames, self.mel_bins
        for _ in range(self.conv_blocks):
            t, f = t // 2, f // 2
        return t, f

    def branch_names(self) -> tuple[str, ...]:
        return ("mel", "gcc") if self.with_gcc_branch else ("mel",)

    def frame_feature_dim(self) -> int:
        t, f = self.pooled_dims()
        if self.conv_blocks >= 1:
            return len(self.branch_names()) * self.base_filters * f
        per = self.in_channels * self.mel_bins
        if self.with_gcc_branch:
            per += self.in_pairs * self.lag_bins
        return per

    def head_input_dim(self) -> int:
        return self.model_dim if self.conformer_blocks >= 1 else self.frame_feature_dim()

    def sharing_active(self) -> bool:
        # a lone branch has nothing to share with
        return self.share_centers and self.with_gcc_branch and self.conv_blocks >= 1


class ParamStore:
    """Allocates and initializes tensors; iteration order is creation order."""

    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}

    def _register(self, key: str, data: np.ndarray) -> Tensor:
        if key in self.params:
            raise DataError(f"duplicate parameter key {key}")
        t = Tensor(np.ascontiguousarray(data, dtype=self.dtype), requires_grad=True)
        self.params[key] = t
        return t

    def uniform(self, key: str, shape: tuple, fan_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        return self._register(key, self.rng.uniform(-bound, bound, size=shape))

    def constant(self, key: str, shape: tuple, value: float) -> Tensor:
        return self._register(key, np.full(shape, value, dtype=np.float64))

    def buffer(self, key: str, shape: tuple, value: float) -> np.ndarray:
        arr = np.full(shape, value, dtype=self.dtype)
        self.state[key] = arr
        return arr


class CountingStore(ParamStore):
    """Stand-in allocator used by param_count: records sizes, no data."""

    def __init__(self):
        self.total = 0
        self.keys: list[str] = []

    def _count(self, key, shape):
        self.keys.append(key)
        self.total += int(np.prod(shape, dtype=np.int64)) if shape else 1

    def uniform(self, key, shape, fan_in):
        self._count(key, shape)
        return None

    def constant(self, key, shape, value):
        self._count(key, shape)
        return None

    def buffer(self, key, shape, value):
        return None


class Conv3x3:
    """3x3 same-pad convolution whose central 2x2 window may be shared."""

    def __init__(self, store, prefix, cin, cout, shared: bool, center: Tensor | None):
        fan_in = cin * 9
        self.center = center
        if shared:
            self.edges = store.uniform(f"{prefix}/edges", (cout, cin, 5), fan_in)
            self.w = None
        else:
            self.w = store.uniform(f"{prefix}/w", (cout, cin, 3, 3), fan_in)
            self.edges = None
        self.b = store.uniform(f"{prefix}/b", (cout,), fan_in)

    def kernel_tensor(self) -> Tensor:
        if self.center is not None:
            return ad.assemble_kernel33(self.edges, self.center)
        return self.w

    def kernel(self) -> np.ndarray:
        return self.kernel_tensor().data

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.kernel_tensor(), self.b)


class Conv1x1:
    def __init__(self, store, prefix, cin, cout):
        self.w = store.uniform(f"{prefix}/w", (cout, cin, 1, 1), cin)
        self.b = store.uniform(f"{prefix}/b", (cout,), cin)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b)


class BatchNorm2d:
    def __init__(self, store, prefix, c):
        self.gamma = store.constant(f"{prefix}/gamma", (c,), 1.0)
        self.beta = store.constant(f"{prefix}/beta", (c,), 0.0)
        self.running_mean = store.buffer(f"{prefix}/running_mean", (c,), 0.0)
        self.running_var = store.buffer(f"{prefix}/running_var", (c,), 1.0)
        self.prefix = prefix

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ad.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, train
        )


class LayerNorm:
    def __init__(self, store, prefix, d):
        self.gamma = store.constant(f"{prefix}/gamma", (d,), 1.0)
        self.beta = store.constant(f"{prefix}/beta", (d,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gamma, self.beta)


class Linear:
    def __init__(self, store, prefix, d_in, d_out):
        self.w = store.uniform(f"{prefix}/w", (d_in, d_out), d_in)
        self.b = store.uniform(f"{prefix}/b", (d_out,), d_in)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)


class ConvBlock:
    """conv -> norm -> act -> conv -> norm, residual scaled by a learnable
    factor, then 2x2 max pooling (dropout is applied by the caller)."""

    def __init__(self, store, prefix, filters, shared, centers, scale_init):
        self.conv1 = Conv3x3(store, f"{prefix}/conv1", filters, filters, shared, centers[0])
        self.bn1 = BatchNorm2d(store, f"{prefix}/bn1", filters)
        self.conv2 = Conv3x3(store, f"{prefix}/conv2", filters, filters, shared, centers[1])
        self.bn2 = BatchNorm2d(store, f"{prefix}/bn2", filters)
        self.res_scale = store.constant(f"{prefix}/res_scale", (1,), scale_init)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        f = self.bn1(self.conv1(x), train)
        f = ad.silu(f)
        f = self.bn2(self.conv2(f), train)
        y = ad.add(x, ad.mul(f, self.res_scale))
        return ad.maxpool2x2(y)


class BranchStack:
    def __init__(self, store, prefix, cfg: NetConfig, cin, centers):
        self.proj = Conv1x1(store, f"{prefix}/proj", cin, cfg.base_filters) if cfg.conv_blocks else None
        shared = cfg.sharing_active()
        self.blocks = [
            ConvBlock(store, f"{prefix}/block{i}", cfg.base_filters, shared, centers[i], cfg.residual_scale_init)
            for i in range(cfg.conv_blocks)
        ]
        self.p = cfg.dropout_p

    def __call__(self, x: Tensor, train: bool, rng) -> Tensor:
        h = self.proj(x) if self.proj is not None else x
        for block in self.blocks:
            h = block(h, train)
            if train and self.p > 0:
                h = ad.dropout(h, self.p, rng)
        return h


class SelfAttention:
    def __init__(self, store, prefix, d, heads):
        self.qkv = Linear(store, f"{prefix}/qkv", d, 3 * d)
        self.out = Linear(store, f"{prefix}/out", d, d)
        self.heads = heads
        self.d = d

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x)
        q = ad.narrow(qkv, 2, 0, d)
        k = ad.narrow(qkv, 2, d, d)
        v = ad.narrow(qkv, 2, 2 * d, d)
        q = ad.transpose(ad.reshape(q, (b, t, h, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (b, t, h, dh)), (0, 2, 3, 1))
        v = ad.transpose(ad.reshape(v, (b, t, h, dh)), (0, 2, 1, 3))
        scores = ad.softmax_lastaxis(ad.scale(ad.matmul(q, k), 1.0 / math.sqrt(dh)))
        ctx = ad.matmul(scores, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.out(ctx)


class FeedForward:
    def __init__(self, store, prefix, d, expansion):
        self.fc1 = Linear(store, f"{prefix}/fc1", d, d * expansion)
        self.fc2 = Linear(store, f"{prefix}/fc2", d * expansion, d)

    def __call__(self, x: Tensor, p, train, rng) -> Tensor:
        h = ad.silu(self.fc1(x))
        if train and p > 0:
            h = ad.dropout(h, p, rng)
        return self.fc2(h)


class ConformerBlock:
    """Half-step FF, self-attention over frames, gated depthwise temporal
    convolution, second half-step FF, final normalization."""

    def __init__(self, store, prefix, cfg: NetConfig):
        d = cfg.model_dim
        self.ln_ff1 = LayerNorm(store, f"{prefix}/ln_ff1", d)
        self.ff1 = FeedForward(store, f"{prefix}/ff1", d, cfg.ff_expansion)
        self.ln_att = LayerNorm(store, f"{prefix}/ln_att", d)
        self.attn = SelfAttention(store, f"{prefix}/attn", d, cfg.attn_heads)
        self.ln_conv = LayerNorm(store, f"{prefix}/ln_conv", d)
        self.pw1 = Linear(store, f"{prefix}/pw1", d, 2 * d)
        self.dw_w = store.uniform(f"{prefix}/dw/w", (cfg.conv_kernel_temporal, d), cfg.conv_kernel_temporal)
        self.dw_b = store.uniform(f"{prefix}/dw/b", (d,), cfg.conv_kernel_temporal)
        self.ln_mid = LayerNorm(store, f"{prefix}/ln_mid", d)
        self.pw2 = Linear(store, f"{prefix}/pw2", d, d)
        self.ln_ff2 = LayerNorm(store, f"{prefix}/ln_ff2", d)
        self.ff2 = FeedForward(store, f"{prefix}/ff2", d, cfg.ff_expansion)
        self.ln_final = LayerNorm(store, f"{prefix}/ln_final", d)
        self.p = cfg.dropout_p

    def _conv_module(self, x: Tensor, train, rng) -> Tensor:
        h = ad.glu_lastaxis(self.pw1(x))
        h = ad.depthwise_conv1d(h, self.dw_w, self.dw_b)
        h = ad.silu(self.ln_mid(h))
        h = self.pw2(h)
        if train and self.p > 0:
            h = ad.dropout(h, self.p, rng)
        return h

    def __call__(self, x: Tensor, train, rng) -> Tensor:
        x = ad.add(x, ad.scale(self.ff1(self.ln_ff1(x), self.p, train, rng), 0.5))
        x = ad.add(x, self.attn(self.ln_att(x)))
        x = ad.add(x, self._conv_module(self.ln_conv(x), train, rng))
        x = ad.add(x, ad.scale(self.ff2(self.ln_ff2(x), self.p, train, rng), 0.5))
        return self.ln_final(x)


class Model:
    """The assembled network; parameters live in a flat key -> Tensor store."""

    def __init__(self, cfg: NetConfig, store: ParamStore):
        self.cfg = cfg
        centers_by_block = []
        for i in range(cfg.conv_blocks):
            pair = []
            for j in (1, 2):
                if cfg.sharing_active():
                    fan_in = cfg.base_filters * 9
                    pair.append(
                        store.uniform(
                            f"shared/block{i}/conv{j}/center",
                            (cfg.base_filters, cfg.base_filters, 2, 2),
                            fan_in,
                        )
                    )
                else:
                    pair.append(None)
            centers_by_block.append(tuple(pair))

        self.mel_branch = BranchStack(store, "mel", cfg, cfg.in_channels, centers_by_block)
        self.gcc_branch = (
            BranchStack(store, "gcc", cfg, cfg.in_pairs, centers_by_block)
            if cfg.with_gcc_branch
            else None
        )
        if cfg.conformer_blocks >= 1:
            self.trunk_proj = Linear(store, "trunk/proj", cfg.frame_feature_dim(), cfg.model_dim)
            self.conformers = [
                ConformerBlock(store, f"trunk/conformer{i}", cfg) for i in range(cfg.conformer_blocks)
            ]
        else:
            self.trunk_proj = None
            self.conformers = []
        self.head_fc1 = Linear(store, "head/fc1", cfg.head_input_dim(), cfg.head_hidden)
        self.head_fc2 = Linear(store, "head/fc2", cfg.head_hidden, 1)

        self.params: dict[str, Tensor] = getattr(store, "params", {})
        self.state: dict[str, np.ndarray] = getattr(store, "state", {})
        self._last_out: Tensor | None = None

    # -- forward / backward -------------------------------------------------

    def _check_input(self, lm: np.ndarray, gc: np.ndarray):
        c = self.cfg
        want_lm = (c.in_channels, c.frames, c.mel_bins)
        if lm.ndim != 4 or lm.shape[1:] != want_lm:
            raise DataError(f"log-mel batch shape {lm.shape} does not match model input {want_lm}")
        if c.with_gcc_branch:
            want_gc = (c.in_pairs, c.frames, c.lag_bins)
            if gc is None or gc.ndim != 4 or gc.shape[1:] != want_gc:
                shape = None if gc is None else gc.shape
                raise DataError(f"correlation batch shape {shape} does not match model input {want_gc}")
            if gc.shape[0] != lm.shape[0]:
                raise DataError("branch batches disagree on batch size")

    @staticmethod
    def _finite(arr: np.ndarray, where: str):
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite activations in {where}")

    def forward_graph(self, lm, gc, train=False, rng=None, capture=None) -> Tensor:
        self._check_input(lm, gc)
        if train and self.cfg.dropout_p > 0 and rng is None:
            raise DataError("training forward needs an rng for dropout")
        dtype = self.head_fc1.w.data.dtype
        xa = Tensor(np.ascontiguousarray(lm, dtype=dtype))
        ha = self.mel_branch(xa, train, rng)
        self._finite(ha.data, "mel branch")
        parts = [ha]
        if self.gcc_branch is not None:
            xb = Tensor(np.ascontiguousarray(gc, dtype=dtype))
            hb = self.gcc_branch(xb, train, rng)
            self._finite(hb.data, "gcc branch")
            parts.append(hb)
        if capture is not None:
            capture["mel"] = parts[0].data
            if len(parts) > 1:
                capture["gcc"] = parts[1].data
        merged = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        b, ch, t, f = merged.shape
        z = ad.reshape(ad.transpose(merged, (0, 2, 1, 3)), (b, t, ch * f))
        if self.trunk_proj is not None:
            z = self.trunk_proj(z)
            for block in self.conformers:
                z = block(z, train, rng)
            self._finite(z.data, "conformer trunk")
        pooled = ad.mean_axis(z, 1)
        h = ad.silu(self.head_fc1(pooled))
        out = ad.reshape(self.head_fc2(h), (b,))
        self._finite(out.data, "head output")
        self._last_out = out
        return out

    def forward(self, lm, gc, train=False, rng=None, capture=None) -> np.ndarray:
        """Predictions in km, one per segment.  Training mode keeps the tape
        so ``backward`` can run; evaluation mode builds no graph."""
        if train:
            return self.forward_graph(lm, gc, True, rng, capture).data
        with ad.no_grad():
            out = self.forward_graph(lm, gc, False, None, capture)
        self._last_out = None
        return out.data

    def backward(self, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Backpropagate d(loss)/d(predictions); returns gradients per key.
        Shared center tensors accumulate both branches' contributions."""
        if self._last_out is None:
            raise DataError("backward called without a stored training forward pass")
        self._last_out.backward(np.asarray(grad_out))
        self._last_out = None
        return {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- persistence ----------------------------------------------------------

    def clone_weights(self) -> dict:
        return {
            "params": {k: p.data.copy() for k, p in self.params.items()},
            "state": {k: v.copy() for k, v in self.state.items()},
        }

    def load_weights(self, snapshot: dict):
        for k, p in self.params.items():
            np.copyto(p.data, snapshot["params"][k])
        for k, v in self.state.items():
            np.copyto(v, snapshot["state"][k])


def build_model(cfg: NetConfig, dtype=np.float32) -> Model:
    """Deterministic under cfg.seed: the same config yields identical bytes."""
    store = ParamStore(np.random.default_rng(cfg.seed), dtype)
    return Model(cfg, store)


def param_count(cfg: NetConfig) -> int:
    """Learnable scalar count; each shared center tensor counts once."""
    store = CountingStore()
    Model(cfg, store)
    return store.total


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config JSON, then key/rank/dims/f32 data

def config_to_json(cfg: NetConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)


def config_from_json(text: str) -> NetConfig:
    return NetConfig(**json.loads(text))


def save_checkpoint(model: Model, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        blob = config_to_json(model.cfg).encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        entries = [(k, p.data) for k, p in model.params.items()]
        entries += [(f"state/{k}", v) for k, v in model.state.items()]
        fh.write(struct.pack("<I", len(entries)))
        for key, arr in entries:
            kb = key.encode()
            fh.write(struct.pack("<H", len(kb)))
            fh.write(kb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> Model:
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        cfg = config_from_json(fh.read(cfg_len).decode())
        model = build_model(cfg, dtype=np.float32)
        (n_entries,) = struct.unpack("<I", fh.read(4))
        seen = set()
        for _ in range(n_entries):
            (klen,) = struct.unpack("<H", fh.read(2))
            key = fh.read(klen).decode()
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(dims)
            if key.startswith("state/"):
                target = model.state.get(key[len("state/"):])
            else:
                target = model.params.get(key)
                target = None if target is None else target.data
            if target is None:
                raise DataError(f"{path}: unknown tensor key {key}")
            if target.shape != data.shape:
                raise DataError(f"{path}: shape mismatch for {key}")
            np.copyto(target, data)
            seen.add(key)
        expected = set(model.params) | {f"state/{k}" for k in model.state}
        if seen != expected:
            raise DataError(f"{path}: checkpoint is missing tensors")
    return model


def clone_model(model: Model) -> Model:
    """Independent copy with identical weights and running statistics."""
    twin = build_model(model.cfg, dtype=model.head_fc1.w.data.dtype)
    twin.load_weights(model.clone_weights())
    return twin


def model_dtype(model: Model):
    return model.head_fc1.w.data.dtype


def deep_copy_config(cfg: NetConfig, **overrides) -> NetConfig:
    fields = asdict(cfg)
    fields.update(overrides)
    return NetConfig(**fields)


__all__ = [
    "NetConfig",
    "Model",
    "build_model",
    "param_count",
    "save_checkpoint",
    "load_checkpoint",
    "clone_model",
    "config_to_json",
    "config_from_json",
    "deep_copy_config",
]
