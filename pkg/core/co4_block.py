"""Latent-query attention blocks with triadic Q/K/V modulation, and the
matched standard Transformer baseline.

Shapes: latents are (B, L_q, E), tokens (B, N, E).  Unbatched 2-D inputs are
accepted by every layer and come back unbatched.
"""

import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from core.errors import ContractError, DimensionError, ParameterError
from core.modulation import (ModulationKind, note_transfer_kinks, transfer_values,
                             transfer_with_partials)
from core.tensor import (Parameter, Tensor, broadcast_batch, custom_op, dropout, gather_rows,
                         is_grad_enabled, layer_norm, mac_scope, matmul, mean, permute,
                         record_elementwise, relu, reshape, slice_axis, softmax_rows, transpose)


@dataclass
class Co4BlockConfig:
    embed_dim: int = 256
    latents: int = 8
    heads: int = 1
    layers: int = 1
    modulation: ModulationKind = ModulationKind.COOPERATION
    dropout_p: float = 0.1
    use_positional: bool = True
    num_classes: int = 10

    def __post_init__(self):
        self.modulation = ModulationKind.parse(self.modulation)

    def validate(self) -> "Co4BlockConfig":
        for name in ("embed_dim", "latents", "heads", "layers", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.embed_dim % self.heads != 0:
            raise ParameterError(f"heads ({self.heads}) must divide embed_dim ({self.embed_dim})")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ParameterError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        return self

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["modulation"] = self.modulation.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Co4BlockConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown block config keys: {sorted(unknown)}")
        return cls(**data).validate()


# --- triadic modulation ---

@dataclass
class TriadicOutput:
    q_m: Tensor     # (..., L_q, E_h)
    k_m: Tensor     # (..., N, E_h)
    v_m: Tensor     # (..., N, E_h)


@dataclass
class _TriadicCache:
    """Partials of the three transfer steps, saved by the forward pass."""
    kind: ModulationKind
    tokens: int
    latents: int
    dq: Optional[Tuple[np.ndarray, np.ndarray]] = None    # (..., L, E) wrt query, pooled context
    dk: Optional[Tuple[np.ndarray, np.ndarray]] = None    # (..., L, N, E) wrt key, its context
    dv: Optional[Tuple[np.ndarray, np.ndarray]] = None    # (..., L, N, E) wrt value, its context


def triadic_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray, kind: ModulationKind,
                    keep_partials: bool = False
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, _TriadicCache]:
    """Two-stage modulation on plain arrays.

    Perceptual stage: each latent l modulates every key with context
    (Q[l] + V[n]) / 2, and each query is modulated by the mean over tokens of
    (K[n] + V[n]) / 2.  Wakeful stage: values are modulated by the stage-one
    outputs, (Q_m[l] + K_m[l, n]) / 2.  Per-latent keys and values are then
    averaged over latents.

    ``keep_partials`` stores the transfer derivatives for triadic_backward.
    """
    kind = ModulationKind.parse(kind)
    if k.shape != v.shape or q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]:
        raise DimensionError("triadic_modulate", q.shape, k.shape, v.shape)
    latents, tokens, width = q.shape[-2], k.shape[-2], q.shape[-1]
    cache = _TriadicCache(kind, tokens, latents)
    k_row = k[..., None, :, :]
    v_row = v[..., None, :, :]

    def step(r, c):
        note_transfer_kinks(kind, r, c)
        if not keep_partials:
            return transfer_values(kind, r, c), None
        out, d_r, d_c = transfer_with_partials(kind, r, c)
        return out, (d_r, d_c)

    c_k = q[..., :, None, :] + v_row
    c_k *= 0.5
    k_l, cache.dk = step(k_row, c_k)
    del c_k

    c_q = np.broadcast_to(0.5 * (k + v).mean(axis=-2, keepdims=True), q.shape)
    q_m, cache.dq = step(q, c_q)

    c_v = q_m[..., :, None, :] + k_l
    c_v *= 0.5
    v_l, cache.dv = step(v_row, c_v)
    del c_v

    lead = int(np.prod(q.shape[:-2])) if q.ndim > 2 else 1
    # Each step touches every (latent, token, feature) triple once; the query
    # step does so while pooling its context over the tokens.
    record_elementwise("modulation", 3 * lead * latents * tokens * width)
    return q_m, k_l.mean(axis=-3), v_l.mean(axis=-3), cache


def triadic_backward(cache: _TriadicCache, g_qm: np.ndarray, g_km: np.ndarray,
                     g_vm: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if cache.dk is None:
        raise ContractError("triadic_backward needs a forward pass run with keep_partials=True")
    latents, tokens = cache.latents, cache.tokens
    (dq_r, dq_c), (dk_r, dk_c), (dv_r, dv_c) = cache.dq, cache.dk, cache.dv

    g_vl = g_vm[..., None, :, :] / latents
    g_v = (g_vl * dv_r).sum(axis=-3)
    g_cv = g_vl * dv_c
    del g_vl

    g_qm = g_qm + 0.5 * g_cv.sum(axis=-2)
    g_kl = g_cv
    g_kl *= 0.5
    g_kl += g_km[..., None, :, :] / latents
    g_k = (g_kl * dk_r).sum(axis=-3)
    g_ck = g_kl
    g_ck *= dk_c
    g_q = 0.5 * g_ck.sum(axis=-2)
    g_v += 0.5 * g_ck.sum(axis=-3)

    g_q += g_qm * dq_r
    g_cq = (g_qm * dq_c).sum(axis=-2, keepdims=True) / (2.0 * tokens)
    return g_q, g_k + g_cq, g_v + g_cq


def triadic_modulate(Q: Tensor, K: Tensor, V: Tensor,
                     kind: ModulationKind = ModulationKind.COOPERATION) -> TriadicOutput:
    """Mutually modulate latent queries (L_q x E_h) with keys and values (N x E_h)."""
    tracked = is_grad_enabled() and any(t.requires_grad for t in (Q, K, V))
    q_m, k_m, v_m, cache = triadic_forward(Q.value, K.value, V.value, kind, keep_partials=tracked)
    latents, tokens = q_m.shape[-2], k_m.shape[-2]
    packed = np.concatenate([q_m, k_m, v_m], axis=-2)

    def backward_fn(g):
        g_q, g_k, g_v = triadic_backward(cache, g[..., :latents, :],
                                         g[..., latents:latents + tokens, :],
                                         g[..., latents + tokens:, :])
        return g_q, g_k, g_v

    joint = custom_op(packed, (Q, K, V), backward_fn, f"triadic_{cache.kind.value}")
    return TriadicOutput(
        q_m=slice_axis(joint, 0, latents),
        k_m=slice_axis(joint, latents, latents + tokens),
        v_m=slice_axis(joint, latents + tokens, latents + 2 * tokens),
    )


def attention_map(Q_m: Tensor, K_m: Tensor) -> Tensor:
    """Softmax over tokens of scaled query/key scores; shape (..., L_q, N)."""
    if Q_m.shape[-1] != K_m.shape[-1]:
        raise DimensionError("attention", Q_m.shape, K_m.shape)
    with mac_scope("attention"):
        scores = matmul(Q_m, transpose(K_m)) * (1.0 / math.sqrt(Q_m.shape[-1]))
    return softmax_rows(scores)


def attention(Q_m: Tensor, K_m: Tensor, V_m: Tensor) -> Tensor:
    if K_m.shape != V_m.shape:
        raise DimensionError("attention", K_m.shape, V_m.shape)
    weights = attention_map(Q_m, K_m)
    with mac_scope("attention"):
        return matmul(weights, V_m)


# --- modules ---

class Module:
    training = True

    def _children(self) -> Iterator[Tuple[str, Any]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield f"{name}.{i}", child

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        named = []
        for name, value in self._children():
            path = f"{prefix}{name}"
            if isinstance(value, Parameter):
                named.append((path, value))
            else:
                named.extend(value.named_parameters(path + "."))
        return named

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """x @ W + b with Glorot-uniform W and zero b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        limit = math.sqrt(6.0 / (in_dim + out_dim))
        self.weight = Parameter(rng.uniform(-limit, limit, (in_dim, out_dim)), "weight")
        self.bias = Parameter(np.zeros(out_dim), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError("linear", x.shape, self.weight.shape)
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(width), "gain")
        self.bias = Parameter(np.zeros(width), "bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


def _as_batched(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 2:
        return reshape(x, [1] + x.shape), True
    if x.ndim != 3:
        raise DimensionError("block input", x.shape)
    return x, False


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, T, E) -> (B, H, T, E/H) using contiguous feature blocks."""
    batch, length, width = x.shape
    return permute(reshape(x, [batch, length, heads, width // heads]), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    batch, heads, length, head_dim = x.shape
    return reshape(permute(x, (0, 2, 1, 3)), [batch, length, heads * head_dim])


class _AttentionLayer(Module):
    """Shared parameter layout: separate Q, K, V maps and a single norm1."""

    def __init__(self, cfg: Co4BlockConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        width = cfg.embed_dim
        self.q_proj = Linear(width, width, rng)
        self.k_proj = Linear(width, width, rng)
        self.v_proj = Linear(width, width, rng)
        self.norm1 = LayerNorm(width)

    def _project(self, queries: Tensor, context: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        heads = self.cfg.heads
        with mac_scope("projection_q"):
            q = self.q_proj(queries)
        with mac_scope("projection_kv"):
            k = self.k_proj(context)
            v = self.v_proj(context)
        return split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)


class Co4Layer(_AttentionLayer):
    """Latents attend to tokens after triadic modulation; no feedforward sub-block."""

    def __call__(self, latents: Tensor, tokens: Tensor) -> Tensor:
        latents, unbatched = _as_batched(latents)
        tokens, _ = _as_batched(tokens)
        if latents.shape[0] != tokens.shape[0]:
            raise DimensionError("co4_layer", latents.shape, tokens.shape)
        q, k, v = self._project(latents, tokens)
        modulated = triadic_modulate(q, k, v, self.cfg.modulation)
        attended = merge_heads(attention(modulated.q_m, modulated.k_m, modulated.v_m))
        out = self.norm1(latents + attended)
        return reshape(out, out.shape[1:]) if unbatched else out


class StandardLayer(_AttentionLayer):
    """Self-attention over the tokens with the same residual and norm1."""

    def __call__(self, x: Tensor) -> Tensor:
        x, unbatched = _as_batched(x)
        q, k, v = self._project(x, x)
        attended = merge_heads(attention(q, k, v))
        out = self.norm1(x + attended)
        return reshape(out, out.shape[1:]) if unbatched else out


class LatentBank(Module):
    """Learned queries, independent of the input tokens."""

    def __init__(self, count: int, width: int, rng: np.random.Generator):
        self.latents = Parameter(rng.normal(0.0, 0.02, (count, width)), "latents")

    def expand(self, batch: int) -> Tensor:
        return broadcast_batch(self.latents, batch)


class _Embedding(Module):
    def __init__(self, cfg: Co4BlockConfig, num_tokens: int, rng: np.random.Generator, seed: int):
        self.cfg = cfg
        self.num_tokens = num_tokens
        if cfg.use_positional:
            self.positional = Parameter(rng.normal(0.0, 0.02, (num_tokens, cfg.embed_dim)), "positional")
        self.dropout_rng = np.random.default_rng([seed, 1])

    def _finish(self, x: Tensor) -> Tensor:
        x = dropout(x, self.cfg.dropout_p, self.dropout_rng, self.training)
        if self.cfg.use_positional:
            x = x + broadcast_batch(self.positional, x.shape[0])
        return x


class PatchEmbedding(_Embedding):
    """Flattened patches -> linear -> ReLU -> dropout (+ positional)."""

    def __init__(self, cfg: Co4BlockConfig, patch_dim: int, num_patches: int,
                 rng: np.random.Generator, seed: int = 0):
        self.proj = Linear(patch_dim, cfg.embed_dim, rng)
        super().__init__(cfg, num_patches, rng, seed)

    def __call__(self, patches: Tensor) -> Tensor:
        patches = patches if isinstance(patches, Tensor) else Tensor(patches)
        patches, unbatched = _as_batched(patches)
        if patches.shape[1:] != [self.num_tokens, self.proj.weight.shape[0]]:
            raise DimensionError("embed_patches", patches.shape,
                                 [self.num_tokens, self.proj.weight.shape[0]])
        with mac_scope("embedding"):
            x = relu(self.proj(patches))
        x = self._finish(x)
        return reshape(x, x.shape[1:]) if unbatched else x


class TokenEmbedding(_Embedding):
    """Token ids -> learned lookup -> dropout (+ positional)."""

    def __init__(self, cfg: Co4BlockConfig, vocab_size: int, seq_len: int,
                 rng: np.random.Generator, seed: int = 0):
        self.table = Parameter(rng.normal(0.0, 0.02, (vocab_size, cfg.embed_dim)), "table")
        super().__init__(cfg, seq_len, rng, seed)

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[1] != self.num_tokens:
            raise DimensionError("embed_tokens", ids.shape, [self.num_tokens])
        return self._finish(gather_rows(self.table, ids))


class ClassifierHead(Module):
    """Mean over the pooled axis, then an affine map to logits."""

    def __init__(self, width: int, num_classes: int, rng: np.random.Generator):
        self.fc = Linear(width, num_classes, rng)

    def __call__(self, x: Tensor) -> Tensor:
        with mac_scope("head"):
            logits = self.fc(mean(x, axis=-2, keepdims=True))
        return reshape(logits, logits.shape[:-2] + logits.shape[-1:])


# --- full models ---

class _Classifier(Module):
    arch = ""

    def __init__(self, cfg: Co4BlockConfig, *, patch_dim: Optional[int] = None,
                 vocab_size: Optional[int] = None, num_tokens: int, seed: int = 0):
        cfg.validate()
        if (patch_dim is None) == (vocab_size is None):
            raise ParameterError("give exactly one of patch_dim or vocab_size")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        if patch_dim is not None:
            self.embed = PatchEmbedding(cfg, patch_dim, num_tokens, rng, seed)
        else:
            self.embed = TokenEmbedding(cfg, vocab_size, num_tokens, rng, seed)
        self._build(rng)
        self.head = ClassifierHead(cfg.embed_dim, cfg.num_classes, rng)

    def _build(self, rng: np.random.Generator) -> None:
        raise NotImplementedError


class Co4Model(_Classifier):
    arch = "co4"

    def _build(self, rng: np.random.Generator) -> None:
        self.latent_bank = LatentBank(self.cfg.latents, self.cfg.embed_dim, rng)
        self.layers = [Co4Layer(self.cfg, rng) for _ in range(self.cfg.layers)]

    def encode(self, x) -> Tensor:
        tokens = self.embed(x)
        latents = self.latent_bank.expand(tokens.shape[0])
        for layer in self.layers:
            latents = layer(latents, tokens)
        return latents

    def __call__(self, x) -> Tensor:
        return self.head(self.encode(x))


class StandardModel(_Classifier):
    arch = "standard"

    def _build(self, rng: np.random.Generator) -> None:
        self.layers = [StandardLayer(self.cfg, rng) for _ in range(self.cfg.layers)]

    def encode(self, x) -> Tensor:
        tokens = self.embed(x)
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens

    def __call__(self, x) -> Tensor:
        return self.head(self.encode(x))


ARCHITECTURES = {"co4": Co4Model, "standard": StandardModel}


def build_model(arch: str, cfg: Co4BlockConfig, **kwargs) -> _Classifier:
    try:
        model_cls = ARCHITECTURES[arch]
    except KeyError:
        raise ParameterError(f"unknown architecture '{arch}' (expected co4 or standard)") from None
    return model_cls(cfg, **kwargs)
