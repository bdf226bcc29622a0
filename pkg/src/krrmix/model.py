"""Small decoder-only language model wrapping any mixer variant.

Pre-norm residual blocks: h + Mixer(LN(h)) then h + FFN(LN(h)), with a GELU
FFN at ffn_mult * hidden, rotary positions inside the mixers, a final norm
and an untied output head (tying available by flag). No dropout, constant
learning rate. Parameters live in a flat name -> ndarray dict whose order is
fixed by param_shapes(), which also drives checkpoints and Adam state.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field, replace
from typing import Dict, Tuple

import numpy as np

from . import autograd as ag
from .errors import ShapeMismatch
from .mixers import MixerConfig, MixerWeights, mixer_forward
from .rng import PURPOSE_INIT, stream
from .rope import rope_apply  # re-exported: positional encoding is a model-level op

__all__ = [
    "ModelConfig", "AdamState", "param_shapes", "init_params", "count_params",
    "model_forward", "block_forward", "lm_loss", "adam_step", "rope_apply",
    "save_checkpoint", "load_checkpoint", "config_digest", "token_accuracy",
]


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int
    hidden: int
    heads: int
    max_seq_len: int
    mixer: MixerConfig
    ffn_mult: int = 4
    init_std: float = 0.02
    seed: int = 0
    tied_head: bool = False

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("heads must divide hidden")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if self.mixer.hidden_size != self.hidden or self.mixer.heads != self.heads:
            raise ValueError("mixer config disagrees with model hidden/heads")

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, mixer=replace(self.mixer, variant=variant))


_MIXER_MATRIX_NAMES = ("w_q", "w_k", "w_v", "w_r", "w_s")


def _mixer_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, h = cfg.hidden, cfg.heads
    m = cfg.mixer
    shapes: Dict[str, Tuple[int, ...]] = {"w_q": (d, d), "w_k": (d, d), "w_v": (d, d)}
    if m.variant in ("KRR", "KRR-NoLRR"):
        shapes["w_r"] = (d, d)
    if m.variant in ("KRR", "KRR-Share"):
        shapes["w_s"] = (d, h)
        shapes["lrr_lower"] = (h,)
        shapes["lrr_range_raw"] = (h,)
    if m.variant in ("KRR", "KRR-Share", "KRR-NoLRR"):
        shapes["ref_scale"] = (h,)
        shapes["log_lambda"] = (h,)
    if m.learnable_temperature:
        shapes["temp"] = (h,)
    return shapes


def param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Every learnable parameter, in the canonical (init/checkpoint) order."""
    d, v, mult = cfg.hidden, cfg.vocab_size, cfg.ffn_mult
    shapes: Dict[str, Tuple[int, ...]] = {"tok_emb": (v, d)}
    for layer in range(cfg.layers):
        p = f"blocks.{layer}."
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        for name, shape in _mixer_shapes(cfg).items():
            shapes[p + "mixer." + name] = shape
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
        shapes[p + "ffn_w1"] = (d, mult * d)
        shapes[p + "ffn_b1"] = (mult * d,)
        shapes[p + "ffn_w2"] = (mult * d, d)
        shapes[p + "ffn_b2"] = (d,)
    shapes["ln_f_g"] = (d,)
    shapes["ln_f_b"] = (d,)
    if not cfg.tied_head:
        shapes["head_w"] = (d, v)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def _inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def init_params(cfg: ModelConfig, dtype=np.float32) -> Dict[str, np.ndarray]:
    """Allocate and initialize all parameters from the model's seed."""
    rng = stream(cfg.seed, 0, PURPOSE_INIT)
    m = cfg.mixer
    params: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("ln1_g", "ln2_g", "ln_f_g", "ref_scale"):
            arr = np.ones(shape)
        elif leaf in ("ln1_b", "ln2_b", "ln_f_b", "ffn_b1", "ffn_b2"):
            arr = np.zeros(shape)
        elif leaf == "lrr_lower":
            arr = np.full(shape, m.lrr_lower)
        elif leaf == "lrr_range_raw":
            arr = np.full(shape, _inverse_softplus(m.lrr_upper - m.lrr_lower))
        elif leaf == "log_lambda":
            arr = np.full(shape, np.log(m.lambda_init))
        elif leaf == "temp":
            arr = np.full(shape, m.score_scale)
        else:
            arr = rng.standard_normal(shape) * cfg.init_std
        params[name] = arr.astype(dtype)
    return params


def _mixer_weights(params, prefix: str, cfg: ModelConfig) -> MixerWeights:
    names = _mixer_shapes(cfg)
    kw = {name: params[prefix + name] for name in names}
    return MixerWeights(**kw)


def block_forward(h, params, prefix: str, cfg: ModelConfig, positions=None):
    """One pre-norm residual block: h + Mixer(LN(h)); h + FFN(LN(h))."""
    a = ag.add(ag.mul(ag.layer_norm(h), params[prefix + "ln1_g"]), params[prefix + "ln1_b"])
    mixed = mixer_forward(a, _mixer_weights(params, prefix + "mixer.", cfg), cfg.mixer, positions)
    h = ag.add(h, mixed)
    f = ag.add(ag.mul(ag.layer_norm(h), params[prefix + "ln2_g"]), params[prefix + "ln2_b"])
    f = ag.gelu(ag.add(ag.matmul(f, params[prefix + "ffn_w1"]), params[prefix + "ffn_b1"]))
    f = ag.add(ag.matmul(f, params[prefix + "ffn_w2"]), params[prefix + "ffn_b2"])
    return ag.add(h, f)


def model_forward(params, ids: np.ndarray, cfg: ModelConfig):
    """Token ids (..., N) -> logits (..., N, vocab)."""
    ids = np.asarray(ids)
    n = ids.shape[-1]
    if n > cfg.max_seq_len:
        raise ShapeMismatch(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    positions = np.arange(n)
    h = ag.gather_rows(params["tok_emb"], ids)
    for layer in range(cfg.layers):
        h = block_forward(h, params, f"blocks.{layer}.", cfg, positions)
    h = ag.add(ag.mul(ag.layer_norm(h), params["ln_f_g"]), params["ln_f_b"])
    head = ag.transpose(params["tok_emb"]) if cfg.tied_head else params["head_w"]
    return ag.matmul(h, head)


def lm_loss(logits, targets: np.ndarray):
    """Mean next-token cross-entropy; target -1 marks positions to skip."""
    return ag.cross_entropy(logits, targets, ignore_index=-1)


def token_accuracy(logits, targets: np.ndarray) -> float:
    """Fraction of non-ignored positions where argmax(logits) == target."""
    lv = logits.value if isinstance(logits, ag.Node) else np.asarray(logits)
    t = np.asarray(targets)
    valid = t != -1
    if not valid.any():
        return 0.0
    pred = lv.argmax(axis=-1)
    return float((pred[valid] == t[valid]).mean())


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              state: AdamState) -> None:
    """One bias-corrected Adam update, in place; missing grads are zeros."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.m[name] = m
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# checkpoints: text manifest + flat little-endian binary blob
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "krrmix-checkpoint 1"


def config_digest(cfg: ModelConfig) -> str:
    """Stable hex digest of the full model + mixer configuration."""
    parts = []
    for obj, tag in ((cfg, "model"), (cfg.mixer, "mixer")):
        for key in sorted(vars(obj)):
            val = getattr(obj, key)
            if key == "mixer":
                continue
            parts.append(f"{tag}.{key}={val!r}")
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()


def save_checkpoint(path, params: Dict[str, np.ndarray], digest: str) -> None:
    header = io.StringIO()
    header.write(_CKPT_MAGIC + "\n")
    header.write(f"digest {digest}\n")
    offset = 0
    blobs = []
    for name, arr in params.items():
        width = arr.dtype.itemsize
        le = arr.astype(f"<f{width}", copy=False)
        blob = le.tobytes()
        shape = ",".join(str(s) for s in arr.shape) or "scalar"
        header.write(f"tensor {name} {width} {shape} {offset}\n")
        blobs.append(blob)
        offset += len(blob)
    header.write(f"data {offset}\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[Dict[str, np.ndarray], str]:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.index(b"\n")
    if raw[:nl].decode() != _CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    pos = nl + 1
    digest = ""
    tensors = []
    total = None
    while True:
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        kind, _, rest = line.partition(" ")
        if kind == "digest":
            digest = rest
        elif kind == "tensor":
            name, width, shape, offset = rest.rsplit(" ", 3)
            tensors.append((name, int(width), shape, int(offset)))
        elif kind == "data":
            total = int(rest)
            break
        else:
            raise ValueError(f"bad checkpoint line: {line!r}")
    blob = raw[pos:]
    if total is None or len(blob) != total:
        raise ValueError("checkpoint blob length mismatch")
    params: Dict[str, np.ndarray] = {}
    for name, width, shape_s, offset in tensors:
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split(","))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=f"<f{width}", count=count, offset=offset)
        params[name] = arr.reshape(shape).astype(f"=f{width}")
    return params, digest
