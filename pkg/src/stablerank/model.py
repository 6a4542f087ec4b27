"""Small decoder-only transformer with injectable mask and positions.

The model itself is deliberately ordinary: pre-norm RMS blocks, rotary
attention, gated FFN, no dropout. What matters is that the three inputs a
caller controls (token ids, per-token position ids, boolean attention mask)
fully determine its behavior; the order-robustness machinery upstream works
purely by choosing those inputs. No positional signal enters except through
position_ids.
"""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ConfigError, ContractError, VersionError

CKPT_MAGIC = b"stablerank-ckpt"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    rope_base: float = 10000.0
    max_seq_len: int = 256
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ConfigError(f"vocab_size must be >= 1, got {self.vocab_size}")
        for field in ("d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1, got {getattr(self, field)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ConfigError(
                f"head dimension {self.d_model // self.n_heads} must be even for rotary pairs"
            )
        if self.rope_base <= 0:
            raise ConfigError(f"rope_base must be positive, got {self.rope_base}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class ModelParams:
    """Named parameter tensors in a fixed order, plus the config they fit."""

    def __init__(self, config: ModelConfig, tensors: dict[str, ad.Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors.keys())

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()

    @property
    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def __repr__(self):
        return f"ModelParams({self.n_params} scalars, {len(self.tensors)} tensors)"


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) in canonical order; fan_in 0 marks a gain vector."""
    d, ff = config.d_model, config.d_ff
    out = [("embed.tokens", (config.vocab_size, d), d)]
    for i in range(config.n_layers):
        p = f"layers.{i}"
        out += [
            (f"{p}.attn.norm_gain", (d,), 0),
            (f"{p}.attn.wq", (d, d), d),
            (f"{p}.attn.wk", (d, d), d),
            (f"{p}.attn.wv", (d, d), d),
            (f"{p}.attn.wo", (d, d), d),
            (f"{p}.ffn.norm_gain", (d,), 0),
            (f"{p}.ffn.w_gate", (d, ff), d),
            (f"{p}.ffn.w_up", (d, ff), d),
            (f"{p}.ffn.w_down", (ff, d), ff),
        ]
    out += [("final.norm_gain", (d,), 0), ("lm_head", (d, config.vocab_size), d)]
    return out


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded init: normals at std 1/sqrt(fan_in), clipped at 4 sigma;
    normalization gains start at 1."""
    rng = np.random.default_rng(config.seed)
    dt = config.np_dtype
    tensors: dict[str, ad.Tensor] = {}
    for name, shape, fan_in in _param_shapes(config):
        if fan_in == 0:
            data = np.ones(shape, dtype=dt)
        else:
            std = 1.0 / np.sqrt(fan_in)
            data = np.clip(rng.normal(0.0, std, size=shape), -4 * std, 4 * std).astype(dt)
        tensors[name] = ad.Tensor(data, requires_grad=True)
    return ModelParams(config, tensors)


def rope_rotate(x: ad.Tensor, position_ids, rope_base: float = 10000.0) -> ad.Tensor:
    """Rotary rotation of [heads, seq, head_dim] by integer positions."""
    return ad.rope(x, position_ids, base=rope_base)


def forward(params: ModelParams, token_ids, position_ids, mask: np.ndarray) -> ad.Tensor:
    """Per-position next-token logits [seq, vocab].

    token_ids and position_ids are integer sequences of equal length; mask
    is the boolean [seq, seq] attention mask (query row, key column) that
    attention obeys verbatim.
    """
    cfg = params.config
    tokens = np.asarray(token_ids, dtype=np.int64)
    positions = np.asarray(position_ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    seq = tokens.shape[0]
    if positions.shape != (seq,) or mask.shape != (seq, seq):
        raise ContractError(
            f"length mismatch: tokens {tokens.shape}, positions {positions.shape}, mask {mask.shape}"
        )
    if seq > cfg.max_seq_len:
        raise ContractError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ContractError("token id out of vocabulary range")

    h = ad.gather(params["embed.tokens"], tokens)  # [seq, d]
    n_heads, head_dim = cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(head_dim)

    def split_heads(t):  # [seq, d] -> [heads, seq, head_dim]
        return ad.transpose(ad.reshape(t, (seq, n_heads, head_dim)), (1, 0, 2))

    def merge_heads(t):  # [heads, seq, head_dim] -> [seq, d]
        return ad.reshape(ad.transpose(t, (1, 0, 2)), (seq, cfg.d_model))

    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        a = ad.rms_norm(h, params[f"{p}.attn.norm_gain"])
        q = split_heads(ad.matmul(a, params[f"{p}.attn.wq"]))
        k = split_heads(ad.matmul(a, params[f"{p}.attn.wk"]))
        v = split_heads(ad.matmul(a, params[f"{p}.attn.wv"]))
        q = ad.rope(q, positions, base=cfg.rope_base)
        k = ad.rope(k, positions, base=cfg.rope_base)
        logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), scale)
        probs = ad.masked_softmax(logits, mask)
        attended = merge_heads(ad.matmul(probs, v))
        h = ad.add(h, ad.matmul(attended, params[f"{p}.attn.wo"]))

        f = ad.rms_norm(h, params[f"{p}.ffn.norm_gain"])
        gate = ad.silu(ad.matmul(f, params[f"{p}.ffn.w_gate"]))
        up = ad.matmul(f, params[f"{p}.ffn.w_up"])
        h = ad.add(h, ad.matmul(ad.mul(gate, up), params[f"{p}.ffn.w_down"]))

    h = ad.rms_norm(h, params["final.norm_gain"])
    return ad.matmul(h, params["lm_head"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Byte-stable container (np.savez is a zip archive and embeds timestamps, so
# identical states would not produce identical files):
#
#   magic line          b"stablerank-ckpt v<N>\n"
#   header length       8 bytes little-endian
#   header              canonical JSON (sorted keys, no whitespace)
#   blobs               raw little-endian C-order arrays, in header order
#
# The header lists every array with name/shape/dtype. Optimizer state rides
# along as arrays named "opt.m.<param>" / "opt.v.<param>" plus a small
# train_state dict, so training can resume from the file exactly.


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path: str, params: ModelParams, train_state: dict | None = None) -> None:
    """train_state, when given: {"step": int, "m": {name: arr}, "v": {name: arr}}."""
    arrays: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in params.items()]
    state_meta = None
    if train_state is not None:
        state_meta = {"step": int(train_state["step"])}
        for kind in ("m", "v"):
            moments = train_state[kind]
            if set(moments) != set(params.names()):
                raise CheckpointError("optimizer moments do not cover the parameter set")
            arrays += [(f"opt.{kind}.{n}", moments[n]) for n in params.names()]
    header = {
        "config": asdict(params.config),
        "arrays": [
            {"name": n, "shape": list(a.shape), "dtype": str(a.dtype)} for n, a in arrays
        ],
        "train_state": state_meta,
    }
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + b" v" + str(CKPT_VERSION).encode() + b"\n")
        hb = _header_bytes(header)
        fh.write(len(hb).to_bytes(8, "little"))
        fh.write(hb)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> tuple[ModelParams, dict | None]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if not magic.startswith(CKPT_MAGIC + b" v"):
            raise CheckpointError(f"{path} is not a checkpoint file")
        try:
            version = int(magic[len(CKPT_MAGIC) + 2 :].strip())
        except ValueError:
            raise CheckpointError(f"malformed checkpoint version line {magic!r}") from None
        if version != CKPT_VERSION:
            raise VersionError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
        header_len = int.from_bytes(fh.read(8), "little")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        config = ModelConfig(**header["config"])
        loaded: dict[str, np.ndarray] = {}
        for meta in header["arrays"]:
            dt = np.dtype(meta["dtype"])
            count = int(np.prod(meta["shape"], dtype=np.int64)) if meta["shape"] else 1
            buf = fh.read(count * dt.itemsize)
            if len(buf) != count * dt.itemsize:
                raise CheckpointError(f"truncated checkpoint: array {meta['name']}")
            loaded[meta["name"]] = np.frombuffer(buf, dtype=dt).reshape(meta["shape"]).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after declared arrays")

    expected = _param_shapes(config)
    tensors: dict[str, ad.Tensor] = {}
    for name, shape, _ in expected:
        if name not in loaded:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        if loaded[name].shape != shape:
            raise CheckpointError(
                f"parameter {name} has shape {loaded[name].shape}, config implies {shape}"
            )
        tensors[name] = ad.Tensor(loaded[name], requires_grad=True)
    params = ModelParams(config, tensors)

    train_state = None
    if header.get("train_state") is not None:
        train_state = {"step": int(header["train_state"]["step"]), "m": {}, "v": {}}
        for kind in ("m", "v"):
            for name, _, _ in expected:
                key = f"opt.{kind}.{name}"
                if key not in loaded:
                    raise CheckpointError(f"checkpoint missing optimizer moment {key}")
                train_state[kind][name] = loaded[key]
    return params, train_state
