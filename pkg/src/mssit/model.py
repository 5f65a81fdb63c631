"""The MS-SiT encoder, its regression head and the U-shaped segmentation variant.

All forward functions take token tensors shaped ``(B, N, d)`` (a missing
batch axis is added) and a :class:`ModelState` holding named parameters.
Attention layers alternate plain windowed attention (even layer index)
and shifted windowed attention (odd index); a "local-MHSA block" is one
such pair.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .patching import LEVELS, PatchMaps, default_patch_maps, shift_index
from .tensor import Tensor


class InvalidStateError(RuntimeError):
    """Raised when a model state is missing or incomplete for the request."""


@dataclass
class ModelConfig:
    """Architecture hyper-parameters.

    ``depths`` counts attention layers per level when ``depth_mode`` is
    ``"layers"`` (W and SW alternating, so the default ``(2, 2, 6, 2)``
    gives 1, 1, 3 and 1 local-MHSA blocks); with ``"pairs"`` each entry
    counts W+SW pairs instead.
    """

    in_channels: int = 4
    base_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 6, 2)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    ffn_ratio: float = 4.0
    task: str = "regression"
    regression_dim: int = 1
    num_classes: int = 2
    w_s: float = 0.5
    dropout: float = 0.1
    block_dropout: float = 0.0
    depth_mode: str = "layers"
    norm_placement: str = "pre"
    decoder_depths: tuple[int, ...] = (2, 2, 2)
    ln_eps: float = 1e-5
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        self.decoder_depths = tuple(int(d) for d in self.decoder_depths)
        self.validate()

    @property
    def token_width(self) -> int:
        return 6 * self.in_channels

    @property
    def shift_fraction(self) -> Fraction:
        return Fraction(self.w_s).limit_denominator(1024)

    def dim(self, level: int) -> int:
        return self.base_dim * 2 ** (level - 1)

    def n_layers(self, level: int) -> int:
        d = self.depths[level - 1]
        return d if self.depth_mode == "layers" else 2 * d

    def n_decoder_layers(self, level: int) -> int:
        d = self.decoder_depths[3 - level]
        return d if self.depth_mode == "layers" else 2 * d

    def validate(self) -> None:
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ValueError("depths and heads need one entry per level (4)")
        if len(self.decoder_depths) != 3:
            raise ValueError("decoder_depths needs one entry per decoder level (3)")
        if self.in_channels < 1 or self.base_dim < 1:
            raise ValueError("in_channels and base_dim must be positive")
        if self.base_dim % 2:
            raise ValueError("base_dim must be even so patch partition splits the bottleneck")
        if self.depth_mode not in ("layers", "pairs"):
            raise ValueError(f"depth_mode must be 'layers' or 'pairs', got {self.depth_mode!r}")
        if self.norm_placement not in ("pre", "post"):
            raise ValueError(f"norm_placement must be 'pre' or 'post', got {self.norm_placement!r}")
        if self.task not in ("regression", "segmentation"):
            raise ValueError(f"task must be 'regression' or 'segmentation', got {self.task!r}")
        if self.task == "segmentation" and self.num_classes < 2:
            raise ValueError("segmentation needs num_classes >= 2")
        for level in LEVELS:
            if self.dim(level) % self.heads[level - 1]:
                raise ValueError(
                    f"level {level}: {self.heads[level - 1]} heads do not divide dim {self.dim(level)}"
                )
        if self.depth_mode == "layers" and self.w_s > 0:
            for level in (1, 2, 3):
                if self.depths[level - 1] % 2:
                    raise ValueError(f"level {level}: depth must be even to pair W/SW layers")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.block_dropout < 1.0:
            raise ValueError("dropout rates must be in [0, 1)")
        np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def tiny_config(**overrides) -> ModelConfig:
    """The desk-scale configuration used by the test-suite (D=8, one head)."""
    base = dict(in_channels=1, base_dim=8, depths=(2, 2, 2, 2), heads=(1, 1, 1, 1), dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class ModelState:
    """A configuration plus every learnable tensor, by name."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise InvalidStateError(f"model state has no parameter {name!r}") from None

    def parameter_count(self, prefix: str | tuple[str, ...] | None = None) -> int:
        return int(
            sum(p.data.size for n, p in self.params.items() if prefix is None or n.startswith(prefix))
        )

    def encoder_parameter_count(self) -> int:
        return self.parameter_count(ENCODER_PREFIXES)

    def copy(self) -> ModelState:
        return ModelState(
            self.config,
            {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n) for n, p in self.params.items()},
        )


ENCODER_PREFIXES = ("pos_embed", "embed_norm.", "enc")


def _layer_names(prefix: str) -> list[str]:
    return [
        f"{prefix}.norm1",
        f"{prefix}.attn.qkv",
        f"{prefix}.attn.proj",
        f"{prefix}.norm2",
        f"{prefix}.ffn.fc1",
        f"{prefix}.ffn.fc2",
    ]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Every parameter name with its shape and initialiser kind, in creation order.

    Kinds are ``"dense"`` (truncated normal), ``"zeros"`` and ``"ones"``.
    """
    spec: dict[str, tuple[tuple[int, ...], str]] = {}

    def dense(name, d_in, d_out):
        spec[f"{name}.weight"] = ((d_in, d_out), "dense")
        spec[f"{name}.bias"] = ((d_out,), "zeros")

    def norm(name, d):
        spec[f"{name}.weight"] = ((d,), "ones")
        spec[f"{name}.bias"] = ((d,), "zeros")

    def attention_layer(prefix, d):
        hidden = int(round(config.ffn_ratio * d))
        norm(f"{prefix}.norm1", d)
        dense(f"{prefix}.attn.qkv", d, 3 * d)
        dense(f"{prefix}.attn.proj", d, d)
        norm(f"{prefix}.norm2", d)
        dense(f"{prefix}.ffn.fc1", d, hidden)
        dense(f"{prefix}.ffn.fc2", hidden, d)

    spec["pos_embed"] = ((default_patch_maps().level_lengths[1], config.token_width), "zeros")
    norm("embed_norm", config.token_width)
    d_in = config.token_width
    for level in LEVELS:
        d = config.dim(level)
        dense(f"enc{level}.proj", d_in, d)
        norm(f"enc{level}.norm", d)
        for j in range(config.n_layers(level)):
            attention_layer(f"enc{level}.layer{j}", d)
        if level < 4:
            norm(f"enc{level}.merge_norm", 4 * d)
            d_in = 4 * d
        else:
            norm(f"enc{level}.final_norm", d)

    if config.task == "regression":
        dense("head", config.dim(4), config.regression_dim)
    else:
        for level in (3, 2, 1):
            d = config.dim(level)
            dense(f"dec{level}.proj", config.dim(level + 1) // 4 + d, d)
            norm(f"dec{level}.norm", d)
            for j in range(config.n_decoder_layers(level)):
                attention_layer(f"dec{level}.layer{j}", d)
        norm("seg_norm", config.dim(1))
        dense("seg_head", config.dim(1), config.num_classes)
    return spec


def init_state(config: ModelConfig, seed: int | np.random.Generator = 0) -> ModelState:
    """Fresh parameters: truncated-normal projections, zero biases and embeddings."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    params: dict[str, Tensor] = {}
    for name, (shape, kind) in parameter_shapes(config).items():
        if kind == "dense":
            arr = truncnorm.rvs(-2.0, 2.0, scale=config.init_std, size=shape, random_state=rng)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(np.ascontiguousarray(arr, dtype=dtype), requires_grad=True, name=name)
    return ModelState(config, params)


def _require_state(state) -> None:
    if state is None or not isinstance(state, ModelState) or not state.params:
        raise InvalidStateError("a populated ModelState is required")


def _batched(x, dtype) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if x.ndim == 2:
        x = T.reshape(x, (1, *x.shape))
    return x


def _linear(x, state, name) -> Tensor:
    return T.linear(x, state[f"{name}.weight"], state[f"{name}.bias"])


def _norm(x, state, name) -> Tensor:
    return T.layer_norm(x, state[f"{name}.weight"], state[f"{name}.bias"], eps=state.config.ln_eps)


def _drop(x, rate, rng):
    if rate <= 0.0 or rng is None:
        return x
    return T.dropout(x, 1.0 - rate, rng)


def embed_input(sequence, state: ModelState, rng: np.random.Generator | None = None) -> Tensor:
    """``dropout(LN(sequence + positional_embedding))``; dropout only when ``rng`` is given."""
    _require_state(state)
    x = _batched(sequence, state.config.dtype)
    pos = state["pos_embed"]
    if x.shape[-2:] != pos.shape:
        raise ValueError(f"sequence {x.shape[-2:]} does not match positional embedding {pos.shape}")
    x = T.embedding_add(x, pos)
    x = _norm(x, state, "embed_norm")
    return _drop(x, state.config.dropout, rng)


def window_mhsa(
    tokens,
    state: ModelState,
    prefix: str,
    heads: int,
    window_size: int,
    shift: int = 0,
    record: dict | None = None,
) -> Tensor:
    """Multi-head self-attention inside contiguous windows of ``window_size`` tokens.

    With ``shift > 0`` the sequence is rolled so that row ``i`` reads row
    ``i + shift`` before attention and rolled back afterwards. Parameters
    are read from ``{prefix}.qkv`` and ``{prefix}.proj``.

    If ``record`` is a dict, ``record["score_entries"]`` is incremented by
    the number of attention scores formed and ``record["attention"]`` is
    set to the ``(B, windows, heads, w, w)`` probabilities.
    """
    x = _batched(tokens, state.config.dtype)
    b, n, d = x.shape
    if n % window_size:
        raise ValueError(f"{n} tokens do not split into windows of {window_size}")
    if d % heads:
        raise ValueError(f"{heads} heads do not divide width {d}")
    n_win, dh = n // window_size, d // heads
    if shift:
        x = T.gather_rows(x, shift_index(n, shift))

    qkv = _linear(x, state, f"{prefix}.qkv")
    q, k, v = T.split_last(qkv, [d, d, d])

    def split_heads(t):
        t = T.reshape(t, (b, n_win, window_size, heads, dh))
        return T.transpose(t, (0, 1, 3, 2, 4))

    q = T.scale(split_heads(q), 1.0 / math.sqrt(dh))
    k, v = split_heads(k), split_heads(v)
    attn = T.softmax_last(T.matmul(q, T.transpose_last2(k)))
    if record is not None:
        record["score_entries"] = record.get("score_entries", 0) + attn.data.size
        record["attention"] = attn.data
    out = T.matmul(attn, v)
    out = T.reshape(T.transpose(out, (0, 1, 3, 2, 4)), (b, n, d))
    out = _linear(out, state, f"{prefix}.proj")
    if shift:
        out = T.gather_rows(out, shift_index(n, n - shift))
    return out


def _ffn(x, state, prefix) -> Tensor:
    return _linear(T.gelu(_linear(x, state, f"{prefix}.fc1")), state, f"{prefix}.fc2")


def attention_layer(
    x,
    state: ModelState,
    prefix: str,
    heads: int,
    window_size: int,
    shift: int = 0,
    rng: np.random.Generator | None = None,
    record: dict | None = None,
) -> Tensor:
    """One (S)W-MHSA + FFN pair of residual sub-layers."""
    cfg = state.config
    p = cfg.block_dropout

    def msa(t):
        return window_mhsa(t, state, f"{prefix}.attn", heads, window_size, shift, record)

    if cfg.norm_placement == "pre":
        x = T.add(x, _drop(msa(_norm(x, state, f"{prefix}.norm1")), p, rng))
        return T.add(x, _drop(_ffn(_norm(x, state, f"{prefix}.norm2"), state, f"{prefix}.ffn"), p, rng))
    x = _norm(T.add(x, _drop(msa(x), p, rng)), state, f"{prefix}.norm1")
    return _norm(T.add(x, _drop(_ffn(x, state, f"{prefix}.ffn"), p, rng)), state, f"{prefix}.norm2")


def _level_geometry(maps: PatchMaps, level: int, shifted: bool) -> tuple[int, int]:
    w = maps.window_size[level]
    return w, (maps.shift_offset[level] if shifted else 0)


def local_mhsa_block(
    tokens,
    level: int,
    state: ModelState,
    maps: PatchMaps | None = None,
    block: int = 0,
    stage: str = "enc",
    rng: np.random.Generator | None = None,
    record: dict | None = None,
) -> Tensor:
    """W-MHSA layer ``2*block`` followed by SW-MHSA layer ``2*block + 1`` of a level."""
    maps = maps or default_patch_maps(state.config.shift_fraction)
    x = _batched(tokens, state.config.dtype)
    heads = state.config.heads[level - 1]
    for j in (2 * block, 2 * block + 1):
        w, s = _level_geometry(maps, level, shifted=j % 2 == 1)
        x = attention_layer(x, state, f"{stage}{level}.layer{j}", heads, w, s, rng, record)
    return x


def _run_layers(x, state, maps, level, stage, n_layers, rng, record) -> Tensor:
    heads = state.config.heads[level - 1]
    for j in range(n_layers):
        w, s = _level_geometry(maps, level, shifted=j % 2 == 1)
        rec = record.setdefault((stage, level, j), {}) if record is not None else None
        x = attention_layer(x, state, f"{stage}{level}.layer{j}", heads, w, s, rng, rec)
    return x


def encoder_forward(
    sequence,
    state: ModelState,
    maps: PatchMaps | None = None,
    rng: np.random.Generator | None = None,
    record: dict | None = None,
) -> dict:
    """Run the four encoder levels.

    Args:
        sequence: ``(B, 20480, 6C)`` (or unbatched) level-1 token matrix.
        state: Model parameters.
        maps: Index tables; defaults to the canonical maps for ``config.w_s``.
        rng: Dropout stream; ``None`` means inference (no dropout).
        record: Optional dict collecting per-layer attention statistics,
            keyed by ``("enc", level, layer)``.

    Returns:
        ``{"pooled": (B, 8D), "pyramid": {level: (B, N_l, d_l)}}`` where the
        pyramid holds each level's output before merging.
    """
    _require_state(state)
    cfg = state.config
    maps = maps or default_patch_maps(cfg.shift_fraction)
    x = embed_input(sequence, state, rng)
    pyramid = {}
    for level in LEVELS:
        x = _norm(_linear(x, state, f"enc{level}.proj"), state, f"enc{level}.norm")
        x = _run_layers(x, state, maps, level, "enc", cfg.n_layers(level), rng, record)
        pyramid[level] = x
        if level < 4:
            b, n, d = x.shape
            x = _norm(T.reshape(x, (b, n // 4, 4 * d)), state, f"enc{level}.merge_norm")
    pooled = T.mean_rows(_norm(x, state, "enc4.final_norm"))
    return {"pooled": pooled, "pyramid": pyramid}


def regression_head(pooled, state: ModelState) -> Tensor:
    _require_state(state)
    pooled = pooled if isinstance(pooled, Tensor) else Tensor(np.asarray(pooled, dtype=state.config.dtype))
    w = state["head.weight"]
    if pooled.shape[-1] != w.shape[0]:
        raise ValueError(f"pooled width {pooled.shape[-1]} does not match head input {w.shape[0]}")
    if pooled.ndim == 1:
        pooled = T.reshape(pooled, (1, -1))
    return _linear(pooled, state, "head")


def segmentation_forward(
    sequence,
    state: ModelState,
    maps: PatchMaps | None = None,
    rng: np.random.Generator | None = None,
    record: dict | None = None,
) -> Tensor:
    """Per-vertex logits ``(B, 40962, K)`` from the U-shaped encoder-decoder.

    Each decoder level splits every coarse token into its four children
    (patch partition), concatenates the encoder output of that level,
    reduces back to the level width and applies local-MHSA layers. The
    final level-1 tokens are averaged onto the ico6 vertices they cover.
    """
    _require_state(state)
    cfg = state.config
    if cfg.task != "segmentation":
        raise InvalidStateError("segmentation_forward needs a segmentation model state")
    maps = maps or default_patch_maps(cfg.shift_fraction)
    enc = encoder_forward(sequence, state, maps, rng, record)
    x = enc["pyramid"][4]
    for level in (3, 2, 1):
        b, m, w = x.shape
        up = T.reshape(x, (b, 4 * m, w // 4))
        x = T.concat_last([up, enc["pyramid"][level]])
        x = _norm(_linear(x, state, f"dec{level}.proj"), state, f"dec{level}.norm")
        x = _run_layers(x, state, maps, level, "dec", cfg.n_decoder_layers(level), rng, record)
    x = _norm(x, state, "seg_norm")
    verts = T.sparse_matmul(maps.vertex_scatter(), x)
    return _linear(verts, state, "seg_head")


def forward(sequence, state: ModelState, maps=None, rng=None, record=None) -> Tensor:
    """Task output: ``(B, regression_dim)`` predictions or ``(B, 40962, K)`` logits."""
    _require_state(state)
    if state.config.task == "segmentation":
        return segmentation_forward(sequence, state, maps, rng, record)
    return regression_head(encoder_forward(sequence, state, maps, rng, record)["pooled"], state)


def extract_attention(sequence, state: ModelState, maps: PatchMaps | None = None) -> np.ndarray:
    """Normalised per-vertex attention map ``(40962,)`` from the last encoder layer.

    The final level-4 attention probabilities are averaged over heads and
    queries (one weight per ico2 token, summing to one), spread to the ico6
    vertices through the patches covering them, and min-max scaled to
    ``[0, 1]``. A constant map comes back as zeros.
    """
    _require_state(state)
    maps = maps or default_patch_maps(state.config.shift_fraction)
    weights = token_attention(sequence, state, maps)
    level1 = maps.level_lengths[1]
    per_patch = weights[np.arange(level1) // (level1 // maps.level_lengths[4])]
    vmap = maps.vertex_scatter() @ per_patch
    lo, hi = vmap.min(), vmap.max()
    if hi - lo <= 1e-12 * max(abs(hi), 1.0):
        return np.zeros_like(vmap)
    return (vmap - lo) / (hi - lo)


def token_attention(sequence, state: ModelState, maps: PatchMaps | None = None) -> np.ndarray:
    """Head- and query-averaged attention over the 320 level-4 tokens of one input."""
    _require_state(state)
    x = _batched(sequence, state.config.dtype)
    if x.shape[0] != 1:
        raise ValueError("attention extraction takes a single input")
    record: dict = {}
    with T.no_grad():
        encoder_forward(x, state, maps, rng=None, record=record)
    last = max(k for k in record if k[0] == "enc" and k[1] == 4)
    probs = record[last]["attention"]  # (1, 1, heads, 320, 320)
    return probs[0, 0].mean(axis=(0, 1)).astype(np.float64)
