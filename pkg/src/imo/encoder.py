"""A small pre-layernorm transformer encoder with per-layer feature masks.

The model here is deliberately desk-scale: learned token + position
embeddings, a few multi-head self-attention blocks, and a classification
head.  Between layers, hidden states can be multiplied by a sparse
filtering vector; which layers actually apply their mask is controlled
per forward pass (``introduced``), because the training schedule brings
masks in one layer at a time.

Layers are numbered 1..L with L the top (closest to the head).  For
binary tasks the top layer owns a single mask that doubles as the head's
attention query; for multi-class tasks the top-layer masks live on the
head, one per label.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .errors import ConfigError, InputError
from .heads import BinaryHead, MultiClassHead, binary_forward, multiclass_forward
from .masking import FilterLayer
from .tensor import Tensor

INIT_STD = 0.02
CHECKPOINT_FORMAT = "imo-checkpoint-v1"


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 200
    d_model: int = 48
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 96
    max_len: int = 32
    seed: int = 0

    def validate(self) -> "EncoderConfig":
        if self.vocab_size < 2:
            raise ConfigError("encoder.vocab_size", f"need at least 2 (pad + unk), got {self.vocab_size}")
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"encoder.{name}", f"must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                "encoder.n_heads",
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self


@dataclass
class ModelSettings:
    """Architectural switches that are part of a trained artifact."""
    n_labels: int = 2
    mask_variant: str = "long_tailed"
    use_masks: bool = True
    use_attention: bool = True
    attention_softmax: bool = False
    shared_e: bool = False
    feed_masked: bool = True


class Model:
    """Encoder backbone + per-layer filters + classification head."""

    def __init__(self, config: EncoderConfig, settings: ModelSettings):
        config.validate()
        if settings.n_labels < 2:
            raise ConfigError("model.n_labels", f"need at least 2 labels, got {settings.n_labels}")
        self.config = config
        self.settings = settings
        rng = np.random.default_rng(config.seed)
        d, L = config.d_model, config.n_layers

        self.params: dict[str, Tensor] = {}
        self._add("tok_emb", rng.normal(0.0, INIT_STD, size=(config.vocab_size, d)))
        self._add("pos_emb", rng.normal(0.0, INIT_STD, size=(config.max_len, d)))
        for i in range(L):
            p = f"layer{i}."
            self._add(p + "ln1_scale", np.ones(d))
            self._add(p + "ln1_shift", np.zeros(d))
            self._add(p + "wq", rng.normal(0.0, INIT_STD, size=(d, d)))
            self._add(p + "wk", rng.normal(0.0, INIT_STD, size=(d, d)))
            self._add(p + "wv", rng.normal(0.0, INIT_STD, size=(d, d)))
            self._add(p + "wo", rng.normal(0.0, INIT_STD, size=(d, d)))
            self._add(p + "ln2_scale", np.ones(d))
            self._add(p + "ln2_shift", np.zeros(d))
            self._add(p + "w1", rng.normal(0.0, INIT_STD, size=(d, config.d_ff)))
            self._add(p + "b1", np.zeros(config.d_ff))
            self._add(p + "w2", rng.normal(0.0, INIT_STD, size=(config.d_ff, d)))
            self._add(p + "b2", np.zeros(d))

        binary = settings.n_labels == 2
        self.filters: list[FilterLayer | None] = [None] * L
        if settings.use_masks:
            # Layers 1..L-1 always get a mask slot; the top slot exists only
            # for binary tasks (multi-class keeps per-label masks on the head).
            for layer in range(1, L + 1):
                if layer == L and not binary:
                    continue
                self.filters[layer - 1] = FilterLayer(
                    d, settings.mask_variant, rng, layer_index=layer)

        plain_query = settings.use_attention and not settings.use_masks
        if binary:
            self.head: BinaryHead | MultiClassHead = BinaryHead(d, rng, with_plain_query=plain_query)
        else:
            self.head = MultiClassHead(d, settings.n_labels, settings.mask_variant, rng,
                                       top_layer=L, with_masks=settings.use_masks,
                                       with_plain_query=plain_query)

    def _add(self, name: str, values: np.ndarray) -> None:
        self.params[name] = Tensor(values, requires_grad=True)

    # ---- parameter bookkeeping -------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.params.items())
        for layer in self.filters:
            if layer is not None:
                for name, t in layer.parameters():
                    out.append((f"filter{layer.layer_index}.{name}", t))
        out.extend(self.head.parameters())
        return out

    def backbone_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def head_parameters(self) -> list[tuple[str, Tensor]]:
        return self.head.parameters()

    def mask_filters(self) -> list[FilterLayer]:
        """Every FilterLayer in the model, per-layer then per-label."""
        out = [f for f in self.filters if f is not None]
        if isinstance(self.head, MultiClassHead):
            out.extend(self.head.filters)
        return out

    def filter_at(self, layer: int) -> FilterLayer | list[FilterLayer]:
        """The mask(s) trained at a given layer (1-based)."""
        L = self.config.n_layers
        if layer == L and isinstance(self.head, MultiClassHead):
            return self.head.filters
        found = self.filters[layer - 1]
        if found is None:
            raise ConfigError("trainer.schedule", f"layer {layer} has no mask to train")
        return found

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        mine = dict(self.named_parameters())
        if set(mine) != set(arrays):
            missing = set(mine) ^ set(arrays)
            raise InputError(f"parameter names do not match the model: {sorted(missing)}")
        for name, t in mine.items():
            t.data = np.array(arrays[name], dtype=np.float64)

    # ---- forward pass ----------------------------------------------------

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise InputError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
        if tokens.shape[1] == 0:
            raise InputError("empty token sequence")
        if tokens.shape[1] > self.config.max_len:
            raise InputError(
                f"sequence length {tokens.shape[1]} exceeds max_len {self.config.max_len}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise InputError(
                f"token id out of range [0, {self.config.vocab_size}): "
                f"min {tokens.min()}, max {tokens.max()}")
        return tokens

    def _block(self, i: int, x: Tensor, attn_bias: np.ndarray | None) -> Tensor:
        cfg = self.config
        p = self.params
        d, H = cfg.d_model, cfg.n_heads
        dk = d // H
        B, S = x.shape[0], x.shape[1]
        pre = f"layer{i}."

        normed = tt.layernorm(x, p[pre + "ln1_scale"], p[pre + "ln1_shift"])

        def split_heads(t):
            return tt.transpose(tt.reshape(t, (B, S, H, dk)), (0, 2, 1, 3))

        q = split_heads(tt.matmul(normed, p[pre + "wq"]))
        k = split_heads(tt.matmul(normed, p[pre + "wk"]))
        v = split_heads(tt.matmul(normed, p[pre + "wv"]))
        scores = tt.mul(tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))),
                        Tensor(1.0 / np.sqrt(dk)))
        if attn_bias is not None:
            scores = tt.add(scores, Tensor(attn_bias))
        mixed = tt.matmul(tt.softmax(scores), v)
        merged = tt.reshape(tt.transpose(mixed, (0, 2, 1, 3)), (B, S, d))
        x = tt.add(x, tt.matmul(merged, p[pre + "wo"]))

        normed2 = tt.layernorm(x, p[pre + "ln2_scale"], p[pre + "ln2_shift"])
        hidden = tt.relu(tt.add(tt.matmul(normed2, p[pre + "w1"]), p[pre + "b1"]))
        return tt.add(x, tt.add(tt.matmul(hidden, p[pre + "w2"]), p[pre + "b2"]))

    def encode(self, tokens: np.ndarray, introduced: frozenset[int] | set[int] = frozenset(),
               valid: np.ndarray | None = None) -> dict:
        """Run the backbone.  Returns per-layer raw states H and the state
        sequence actually fed forward (masked where a layer's mask is both
        present and in ``introduced``)."""
        tokens = self._check_tokens(tokens)
        B, S = tokens.shape
        if valid is not None:
            valid = np.asarray(valid, dtype=np.float64).reshape(B, S)
            attn_bias = ((1.0 - valid) * -1e9)[:, None, None, :]
            if np.all(valid == 1.0):
                attn_bias = None
        else:
            attn_bias = None

        x = tt.add(tt.embedding(self.params["tok_emb"], tokens),
                   tt.embedding(self.params["pos_emb"], np.arange(S)))
        raw, fed = [], []
        for i in range(self.config.n_layers):
            x = self._block(i, x, attn_bias)
            raw.append(x)
            layer_no = i + 1
            mask = self.filters[i]
            if mask is not None and layer_no in introduced:
                masked = mask.apply(x)
                fed.append(masked)
                if self.settings.feed_masked:
                    x = masked
            else:
                fed.append(x)
        return {"raw": raw, "fed": fed, "valid": valid}

    def forward(self, tokens: np.ndarray, introduced: frozenset[int] | set[int],
                valid: np.ndarray | None = None) -> dict:
        """Full forward pass to class probabilities."""
        enc = self.encode(tokens, introduced, valid)
        L = self.config.n_layers
        top_raw, top_fed = enc["raw"][-1], enc["fed"][-1]
        if isinstance(self.head, BinaryHead):
            mask = self.filters[L - 1]
            if mask is not None and L in introduced:
                out = binary_forward(top_fed, mask.filtering_vector(), self.head,
                                     valid=enc["valid"],
                                     use_attention=self.settings.use_attention,
                                     attention_softmax=self.settings.attention_softmax)
            else:
                out = binary_forward(top_raw, None, self.head, valid=enc["valid"],
                                     use_attention=self.settings.use_attention,
                                     attention_softmax=self.settings.attention_softmax)
        else:
            out = multiclass_forward(top_raw, self.head, valid=enc["valid"],
                                     use_attention=self.settings.use_attention,
                                     attention_softmax=self.settings.attention_softmax,
                                     shared_e=self.settings.shared_e,
                                     masks_introduced=L in introduced)
        out["encoded"] = enc
        return out


def encode(model: Model, tokens: np.ndarray, mask_depth=frozenset()) -> list[Tensor]:
    """Raw per-layer hidden states, with masks applied at ``mask_depth``
    before feeding each next layer."""
    return model.encode(tokens, introduced=set(mask_depth))["raw"]


def save_checkpoint(model: Model, path: str | Path, stage_meta: dict | None = None) -> None:
    """Write a self-describing JSON checkpoint; float64 values survive the
    round trip bit for bit (shortest-repr encoding)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "encoder": asdict(model.config),
        "settings": asdict(model.settings),
        "params": {name: t.data.tolist() for name, t in model.named_parameters()},
        "filters": [f.state() for f in model.mask_filters()],
        "stage": stage_meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"not a checkpoint file (format={payload.get('format')!r})")
    model = Model(EncoderConfig(**payload["encoder"]), ModelSettings(**payload["settings"]))
    model.load_state_arrays({k: np.array(v, dtype=np.float64) for k, v in payload["params"].items()})
    for layer, state in zip(model.mask_filters(), payload["filters"]):
        restored = FilterLayer.from_state(state)
        layer.frozen = restored.frozen
        layer.q_override = restored.q_override
    return model, payload["stage"]
