"""A tiny pre-norm decoder-only transformer with capture/patch hooks.

Layer numbering follows the hidden-state convention used by the interventions:
``h_l`` for ``l < L`` is the residual stream after block ``l``; ``h_L`` is the
final-norm output, so the logits are exactly ``W_U h_L + b``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .errors import CapacityError, ConfigurationError, InputError, ShapeError
from .tensor import Tensor

MAGIC = b"HDMI1"
_MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden_size: int = 64
    embed_size: int | None = None
    layers: int = 2
    heads: int = 4
    max_seq_len: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.embed_size is None:
            object.__setattr__(self, "embed_size", self.hidden_size)
        for name in ("vocab_size", "hidden_size", "embed_size", "layers", "heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.hidden_size % self.heads:
            raise ConfigurationError("hidden_size must be divisible by heads")
        if self.vocab_size < 4:
            raise ConfigurationError("vocab_size must reserve pad/bos/eos/mask")

    @property
    def untied_input(self) -> bool:
        return self.embed_size != self.hidden_size


@dataclass(frozen=True)
class HiddenState:
    layer: int
    position: int
    vector: np.ndarray


@dataclass(frozen=True)
class DecodeCache:
    """Per-layer attention keys/values for positions ``0 .. length-1``.

    Entries are graph tensors, so a virtual continuation that was fed a
    differentiable embedding stays differentiable through later steps.
    """
    keys: tuple[Tensor, ...]
    values: tuple[Tensor, ...]

    @property
    def length(self) -> int:
        return self.keys[0].shape[2]

    def detached(self) -> "DecodeCache":
        return DecodeCache(tuple(Tensor(k.data) for k in self.keys),
                           tuple(Tensor(v.data) for v in self.values))


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    if cfg.untied_input:
        names.append("embed_proj")
    for i in range(cfg.layers):
        names += [f"blocks.{i}.{n}" for n in (
            "ln1_g", "ln1_b", "qkv_w", "qkv_b", "out_w", "out_b",
            "ln2_g", "ln2_b", "mlp_in_w", "mlp_in_b", "mlp_out_w", "mlp_out_b")]
    return names + ["lnf_g", "lnf_b", "unembed_w", "unembed_b"]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, V, E = cfg.hidden_size, cfg.vocab_size, cfg.embed_size
    shapes = {"tok_emb": (V, E), "pos_emb": (cfg.max_seq_len, D), "embed_proj": (D, E),
              "lnf_g": (D,), "lnf_b": (D,), "unembed_w": (V, D), "unembed_b": (V,)}
    for i in range(cfg.layers):
        p = f"blocks.{i}."
        shapes.update({p + "ln1_g": (D,), p + "ln1_b": (D,), p + "qkv_w": (3 * D, D),
                       p + "qkv_b": (3 * D,), p + "out_w": (D, D), p + "out_b": (D,),
                       p + "ln2_g": (D,), p + "ln2_b": (D,), p + "mlp_in_w": (4 * D, D),
                       p + "mlp_in_b": (4 * D,), p + "mlp_out_w": (D, 4 * D),
                       p + "mlp_out_b": (D,)})
    return {n: shapes[n] for n in param_names(cfg)}


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif leaf.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            std = 0.02 if leaf != "out_w" and leaf != "mlp_out_w" else 0.02 / np.sqrt(2 * cfg.layers)
            params[name] = rng.normal(0.0, std, size=shape)
    return params


class TinyTransformer:
    """Parameters plus the forward computations over them.

    Parameters are plain float64 arrays; forward passes wrap them in fresh
    :class:`Tensor` leaves, so the model itself is never mutated by inference.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        params = init_params(cfg) if params is None else params
        shapes = param_shapes(cfg)
        if set(params) != set(shapes):
            raise ShapeError("parameter names do not match the configuration")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
            if not np.all(np.isfinite(params[name])):
                raise ShapeError(f"{name}: non-finite parameter values")
        self.params = {n: np.asarray(params[n], dtype=np.float64) for n in shapes}

    @property
    def W_U(self) -> np.ndarray:
        return self.params["unembed_w"]

    @property
    def b(self) -> np.ndarray:
        return self.params["unembed_b"]

    @property
    def E(self) -> np.ndarray:
        return self.params["tok_emb"]

    def copy(self) -> "TinyTransformer":
        return TinyTransformer(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def leaves(self) -> dict[str, Tensor]:
        return {n: Tensor(v) for n, v in self.params.items()}

    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise InputError("token sequence must be non-empty")
        if ids.shape[1] > self.cfg.max_seq_len:
            raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise InputError("token id out of range")
        return ids

    def _check_layer(self, layer: int) -> int:
        if not 1 <= layer <= self.cfg.layers:
            raise InputError(f"layer must be in [1, {self.cfg.layers}], got {layer}")
        return layer

    # -- graph building ------------------------------------------------------

    def _input(self, P, emb: Tensor, start: int) -> Tensor:
        T = emb.shape[1]
        if self.cfg.untied_input:
            emb = tc.linear(emb, P["embed_proj"])
        pos = tc.take(P["pos_emb"], slice(start, start + T))
        return emb + tc.broadcast_to(pos, emb.shape[:1] + pos.shape)

    def _split_heads(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        H = self.cfg.heads
        return tc.transpose(tc.reshape(x, (B, T, H, D // H)), (0, 2, 1, 3))

    def _block(self, P, i: int, x: Tensor, past=None):
        """One pre-norm block; ``past`` is (keys, values) of earlier positions."""
        p = f"blocks.{i}."
        B, T, D = x.shape
        H = self.cfg.heads
        dh = D // H
        h = tc.layer_norm(x, P[p + "ln1_g"], P[p + "ln1_b"])
        qkv = tc.linear(h, P[p + "qkv_w"], P[p + "qkv_b"])
        q = self._split_heads(tc.take(qkv, (slice(None), slice(None), slice(0, D))))
        k = self._split_heads(tc.take(qkv, (slice(None), slice(None), slice(D, 2 * D))))
        v = self._split_heads(tc.take(qkv, (slice(None), slice(None), slice(2 * D, 3 * D))))
        if past is not None:
            k = tc.concat([past[0], k], axis=2)
            v = tc.concat([past[1], v], axis=2)
        S = k.shape[2]
        scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        offset = S - T
        mask = np.triu(np.ones((T, S), dtype=bool), k=offset + 1)
        if mask.any():
            scores = tc.masked_fill(scores, mask, _MASK_VALUE)
        att = tc.softmax(scores)
        ctx = tc.reshape(tc.transpose(tc.matmul(att, v), (0, 2, 1, 3)), (B, T, D))
        x = x + tc.linear(ctx, P[p + "out_w"], P[p + "out_b"])
        h2 = tc.layer_norm(x, P[p + "ln2_g"], P[p + "ln2_b"])
        mlp = tc.linear(tc.gelu(tc.linear(h2, P[p + "mlp_in_w"], P[p + "mlp_in_b"])),
                        P[p + "mlp_out_w"], P[p + "mlp_out_b"])
        return x + mlp, (k, v)

    def _final(self, P, x: Tensor) -> Tensor:
        return tc.layer_norm(x, P["lnf_g"], P["lnf_b"])

    def head(self, h, P=None) -> Tensor:
        """``W_U h + b`` for ``h`` of shape (..., D)."""
        P = P or self.leaves()
        return tc.linear(h, P["unembed_w"], P["unembed_b"])

    def run(self, tokens, P=None, capture: int | None = None, patch=None):
        """Full forward pass over a (B, T) batch.

        Returns ``(hidden, captured)`` where ``hidden`` is the final-norm output
        of shape (B, T, D). ``patch=(layer, replacement)`` substitutes the
        last-position layer state; ``capture`` returns that state instead.
        """
        P = P or self.leaves()
        ids = self._check_tokens(tokens)
        B, T = ids.shape
        x = self._input(P, tc.embedding(P["tok_emb"], ids), 0)
        captured = None
        L = self.cfg.layers
        for i in range(L):
            x, _ = self.run_block(P, i, x)
            layer = i + 1
            if layer < L:
                if capture == layer:
                    captured = tc.take(x, (slice(None), T - 1))
                if patch is not None and patch[0] == layer:
                    x = _replace_last(x, patch[1])
        x = self._final(P, x)
        if capture == L:
            captured = tc.take(x, (slice(None), T - 1))
        if patch is not None and patch[0] == L:
            x = _replace_last(x, patch[1])
        return x, captured

    def run_block(self, P, i, x, past=None):
        return self._block(P, i, x, past)


def _replace_last(x: Tensor, replacement) -> Tensor:
    B, T, D = x.shape
    r = tc.as_tensor(replacement)
    if r.shape != (D,):
        raise ShapeError(f"replacement must have shape ({D},), got {r.shape}")
    if B != 1:
        raise ShapeError("patching is defined for a single sequence")
    last = tc.reshape(r, (1, 1, D))
    if T == 1:
        return last
    return tc.concat([tc.take(x, (slice(None), slice(0, T - 1))), last], axis=1)


# -- public operations ----------------------------------------------------------

def forward_logits(model: TinyTransformer, tokens: Sequence[int]) -> np.ndarray:
    """Next-token logits at the last position of ``tokens``."""
    hidden, _ = model.run(tokens)
    return model.head(tc.take(hidden, (0, hidden.shape[1] - 1))).numpy()


def forward_capture(model: TinyTransformer, tokens: Sequence[int], layer: int):
    """Logits plus the last-position layer-``layer`` hidden state."""
    model._check_layer(layer)
    hidden, captured = model.run(tokens, capture=layer)
    logits = model.head(tc.take(hidden, (0, hidden.shape[1] - 1))).numpy()
    position = len(tokens) - 1
    return logits, HiddenState(layer, position, captured.numpy()[0])


def patched_logits_graph(model: TinyTransformer, tokens, layer: int, replacement,
                         P=None) -> Tensor:
    """Differentiable logits with the last-position layer state replaced."""
    model._check_layer(layer)
    P = P or model.leaves()
    r = tc.as_tensor(replacement)
    if r.shape != (model.cfg.hidden_size,):
        raise ShapeError(f"replacement must have shape ({model.cfg.hidden_size},)")
    if layer == model.cfg.layers:
        return model.head(r, P)
    hidden, _ = model.run(tokens, P=P, patch=(layer, r))
    return model.head(tc.take(hidden, (0, hidden.shape[1] - 1)), P)


def forward_patch(model: TinyTransformer, tokens: Sequence[int], layer: int,
                  replacement) -> np.ndarray:
    """Logits after substituting the last-position layer state by ``replacement``."""
    model._check_tokens(tokens)
    return patched_logits_graph(model, tokens, layer, np.asarray(replacement, dtype=np.float64)).numpy()


def start_cache(model: TinyTransformer, tokens: Sequence[int], P=None):
    """Run a prefix and return (last-layer hidden at the last position, cache)."""
    P = P or model.leaves()
    ids = model._check_tokens(tokens)
    x = model._input(P, tc.embedding(P["tok_emb"], ids), 0)
    keys, values = [], []
    for i in range(model.cfg.layers):
        x, (k, v) = model.run_block(P, i, x)
        keys.append(k)
        values.append(v)
    h = model._final(P, x)
    h_last = tc.take(h, (0, ids.shape[1] - 1))
    return h_last, DecodeCache(tuple(keys), tuple(values)).detached()


def transition_step(model: TinyTransformer, cache: DecodeCache, input_embedding, P=None):
    """Feed an arbitrary input embedding at the next position.

    Returns the new last-layer hidden state (differentiable with respect to
    ``input_embedding``) and the extended cache.
    """
    if cache.length >= model.cfg.max_seq_len:
        raise CapacityError("decode cache is full")
    P = P or model.leaves()
    e = tc.as_tensor(input_embedding)
    if e.shape != (model.cfg.embed_size,):
        raise ShapeError(f"input embedding must have shape ({model.cfg.embed_size},)")
    x = model._input(P, tc.reshape(e, (1, 1, model.cfg.embed_size)), cache.length)
    keys, values = [], []
    for i in range(model.cfg.layers):
        x, (k, v) = model.run_block(P, i, x, past=(cache.keys[i], cache.values[i]))
        keys.append(k)
        values.append(v)
    h = tc.reshape(model._final(P, x), (model.cfg.hidden_size,))
    return h, DecodeCache(tuple(keys), tuple(values))


def greedy_decode(model: TinyTransformer, prompt: Sequence[int], max_new: int) -> list[int]:
    """Argmax continuation; ties go to the lowest token id."""
    if len(prompt) == 0:
        raise InputError("prompt must be non-empty")
    out = list(prompt)
    for _ in range(max_new):
        logits = forward_logits(model, out)
        out.append(int(np.argmax(logits)))
    return out


# -- training --------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay over a dict of arrays."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, weight_decay=1e-6,
                 betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.wd, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = params[k] - self.lr * (update + self.wd * params[k])


def lm_loss(model: TinyTransformer, batch: np.ndarray, pad_id: int, P=None) -> Tensor:
    """Mean next-token cross-entropy over non-pad targets of a (B, T) batch."""
    P = P or model.leaves()
    inputs, targets = batch[:, :-1], batch[:, 1:]
    hidden, _ = model.run(inputs, P=P)
    logp = tc.log_softmax(model.head(hidden, P))
    B, T = targets.shape
    picked = tc.take(logp, (np.arange(B)[:, None], np.arange(T)[None, :], targets))
    weights = (targets != pad_id).astype(np.float64)
    return tc.scale(tc.total(tc.mul(picked, weights)), -1.0 / max(1.0, weights.sum()))


def _pad(seqs: Sequence[Sequence[int]], pad_id: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def train_lm(model: TinyTransformer, corpus: Sequence[Sequence[int]], epochs: int = 10,
             lr: float = 1e-3, batch_size: int = 32, seed: int = 0, pad_id: int = 0,
             weight_decay: float = 1e-6):
    """Next-token cross-entropy training; returns (new model, per-step losses)."""
    if len(corpus) == 0:
        raise InputError("corpus is empty")
    if any(len(s) < 2 for s in corpus):
        raise InputError("every training sequence needs at least two tokens")
    if any(len(s) > model.cfg.max_seq_len + 1 for s in corpus):
        raise InputError("training sequence longer than max_seq_len + 1")
    params = {k: v.copy() for k, v in model.params.items()}
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    names = list(params)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        for start in range(0, len(order), batch_size):
            batch = _pad([corpus[i] for i in order[start:start + batch_size]], pad_id)
            P = {n: Tensor(params[n]) for n in names}
            loss = lm_loss(model, batch, pad_id, P)
            grads = tc.gradients(loss, [P[n] for n in names])
            opt.step(params, dict(zip(names, grads)))
            losses.append(loss.item())
    return TinyTransformer(model.cfg, params), losses


def round_to_float32(model: TinyTransformer) -> TinyTransformer:
    """Round parameters to float32 so a checkpoint round trip is exact."""
    return TinyTransformer(model.cfg, {k: v.astype(np.float32).astype(np.float64)
                                       for k, v in model.params.items()})


# -- checkpoints -------------------------------------------------------------------

def write_container(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Magic bytes, a length-prefixed JSON header, then little-endian float32 tensors.

    A ``.manifest`` text file next to ``path`` lists tensor names and shapes.
    """
    path = Path(path)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for name, arr in arrays.items():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.write_bytes(buf.getvalue())
    lines = [f"{k}={json.dumps(v, sort_keys=True)}" for k, v in sorted(header.items())]
    lines += [f"{name}\t{' '.join(str(d) for d in arr.shape)}" for name, arr in arrays.items()]
    Path(str(path) + ".manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_container(path: str | Path, shapes: dict[str, tuple[int, ...]] | None = None):
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    offset = len(MAGIC) + 4
    header = json.loads(data[offset:offset + n].decode("utf-8"))
    offset += n
    if shapes is None:
        shapes = {k: tuple(v) for k, v in header["tensors"]}
    arrays = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.astype(np.float64).reshape(shape)
        offset += 4 * count
    if offset != len(data):
        raise InputError(f"{path}: trailing or missing bytes")
    return header, arrays


def save_model(model: TinyTransformer, path: str | Path) -> None:
    header = {"kind": "tiny_transformer", "config": asdict(model.cfg),
              "tensors": [[k, list(v.shape)] for k, v in model.params.items()]}
    write_container(path, header, model.params)


def load_model(path: str | Path) -> TinyTransformer:
    header, arrays = read_container(path)
    cfg = ModelConfig(**header["config"])
    return TinyTransformer(cfg, arrays)
