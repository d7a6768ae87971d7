"""A small post-LN decoder-only transformer with activation tracing."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from compecon import autodiff as ad
from compecon.autodiff import Tensor
from compecon.constraints import ConstraintSpec, apply_constraint, causal_mask

CHECKPOINT_FORMAT = "compecon-checkpoint"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 2
    model_dim: int = 64
    ffn_dim: int = 128
    vocab_size: int = 64
    max_seq_len: int = 64
    num_classes: int = 0
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        for name in ("num_heads", "model_dim", "ffn_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_seq_len < 2:
            raise ConfigError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if self.model_dim % self.num_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.num_classes < 0:
            raise ConfigError("num_classes must be >= 0")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def key_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def output_dim(self) -> int:
        return self.num_classes or self.vocab_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ActivationTrace:
    """Per-layer tensors captured during one forward pass.

    ``attention[l]`` has shape ``(B, H, N, N)``; ``ffn_pre[l]`` and
    ``ffn_post[l]`` have shape ``(B, N, d_ff)``.  When the forward ran on a
    tape these tensors are differentiable.
    """

    attention: list[Tensor] = field(default_factory=list)
    ffn_pre: list[Tensor] = field(default_factory=list)
    ffn_post: list[Tensor] = field(default_factory=list)
    seq_len: int = 0

    @property
    def num_layers(self) -> int:
        return len(self.attention)

    @property
    def num_heads(self) -> int:
        return self.attention[0].shape[1] if self.attention else 0

    @property
    def batch_size(self) -> int:
        if self.attention:
            return self.attention[0].shape[0]
        return self.ffn_post[0].shape[0] if self.ffn_post else 0

    def attention_matrix(self, layer: int, head: int, batch: int = 0) -> np.ndarray:
        return self.attention[layer].data[batch, head]

    def attention_matrices(self) -> list[np.ndarray]:
        """Every ``N x N`` attention matrix, ordered by layer, head, then batch."""
        mats = []
        for a in self.attention:
            for h in range(a.shape[1]):
                for b in range(a.shape[0]):
                    mats.append(a.data[b, h])
        return mats


_LAYER_PARAMS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


class TransformerModel:
    """Parameters plus the forward pass.

    Layers are post-LN: ``x = LN(x + attn(x)); x = LN(x + ffn(x))``.  Query,
    key and value projections are stored as ``d_model x d_model`` matrices
    whose column block ``h*d_k:(h+1)*d_k`` is head ``h``'s projection.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def checksum(self) -> str:
        return ad.parameters_checksum(self.parameters())

    def copy(self) -> "TransformerModel":
        return TransformerModel(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data = v.copy()

    def forward(self, tokens, constraint: ConstraintSpec | None = None, trace: bool = False):
        return forward(self, tokens, constraint, trace)


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.model_dim, cfg.ffn_dim
    shapes = [("tok_emb", (cfg.vocab_size, d)), ("pos_emb", (cfg.max_seq_len, d))]
    per_layer = {
        "ln1_g": (d,), "ln1_b": (d,),
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "ln2_g": (d,), "ln2_b": (d,),
        "w1": (d, f), "b1": (f,), "w2": (f, d), "b2": (d,),
    }
    for layer in range(cfg.num_layers):
        shapes += [(f"layers.{layer}.{n}", per_layer[n]) for n in _LAYER_PARAMS]
    shapes.append(("head", (d, cfg.output_dim)))
    return shapes


def init_model(config: ModelConfig) -> TransformerModel:
    """Normal(0, 0.02) weights and embeddings, zero biases, unit LN gains."""
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.dtype)
    params = {}
    for name, shape in _param_shapes(config):
        short = name.rsplit(".", 1)[-1]
        if short.endswith("_g"):
            arr = np.ones(shape)
        elif short.startswith("b") or short.endswith("_b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return TransformerModel(config, params)


def count_params(model: TransformerModel | ModelConfig) -> int:
    cfg = model.config if isinstance(model, TransformerModel) else model
    return int(sum(np.prod(s) for _, s in _param_shapes(cfg)))


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim not in (1, 2):
        raise ConfigError(f"tokens must be 1-D or 2-D, got shape {ids.shape}")
    n = ids.shape[-1]
    if n > cfg.max_seq_len:
        raise ConfigError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    if n < 1:
        raise ConfigError("empty sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
    return ids


def forward(
    model: TransformerModel,
    tokens,
    constraint: ConstraintSpec | None = None,
    trace: bool = False,
):
    """Run the model on one sequence ``(N,)`` or a batch ``(B, N)``.

    Returns ``(logits, trace_or_None)``; logits are ``(N, V)`` or
    ``(B, N, V)`` matching the input rank.
    """
    cfg = model.config
    p = model.params
    spec = constraint or ConstraintSpec()
    ids = _check_tokens(cfg, tokens)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    b, n = ids.shape
    h, dk, d = cfg.num_heads, cfg.key_dim, cfg.model_dim
    allowed = causal_mask(n)
    act = ActivationTrace(seq_len=n) if trace else None

    x = ad.add(ad.embedding(p["tok_emb"], ids), ad.embedding(p["pos_emb"], np.broadcast_to(np.arange(n), (b, n))))
    for layer in range(cfg.num_layers):
        lp = {k: p[f"layers.{layer}.{k}"] for k in _LAYER_PARAMS}

        def heads(w):
            return ad.permute(ad.reshape(ad.matmul(x, w), (b, n, h, dk)), (0, 2, 1, 3))

        q, k, v = heads(lp["wq"]), heads(lp["wk"]), heads(lp["wv"])
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dk))
        probs = apply_constraint(spec, scores, allowed)
        ctx = ad.reshape(ad.permute(ad.matmul(probs, v), (0, 2, 1, 3)), (b, n, d))
        x = ad.layer_norm(ad.add(x, ad.matmul(ctx, lp["wo"])), lp["ln1_g"], lp["ln1_b"])

        pre = ad.add_bias(ad.matmul(x, lp["w1"]), lp["b1"])
        post = ad.relu(pre)
        ffn = ad.add_bias(ad.matmul(post, lp["w2"]), lp["b2"])
        x = ad.layer_norm(ad.add(x, ffn), lp["ln2_g"], lp["ln2_b"])
        if act is not None:
            act.attention.append(probs)
            act.ffn_pre.append(pre)
            act.ffn_post.append(post)

    logits = ad.matmul(x, p["head"])
    if single:
        logits = ad.reshape(logits, (n, cfg.output_dim))
    return logits, act


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: TransformerModel, path: str | Path, extra: dict | None = None) -> Path:
    """Write config, format version and raw parameter arrays to an ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "param_names": list(model.params),
        "extra": extra or {},
    }
    arrays = {f"p{i}": t.data for i, t in enumerate(model.params.values())}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    return path


def load_checkpoint(path: str | Path) -> TransformerModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].tobytes().decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"{path}: not a compecon checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        known = {f.name for f in fields(ModelConfig)}
        cfg = ModelConfig(**{k: v for k, v in meta["config"].items() if k in known})
        params = {
            name: Tensor(z[f"p{i}"].copy(), requires_grad=True, name=name)
            for i, name in enumerate(meta["param_names"])
        }
    return TransformerModel(cfg, params)
