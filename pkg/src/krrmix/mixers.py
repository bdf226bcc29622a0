"""Token mixers as regression procedures.

Three families share the projection and similarity machinery:

  * nw_attention    -- softmax similarity times values (a kernel-weighted
                       average, i.e. Nadaraya-Watson regression);
  * cubit_forward   -- kernel ridge regression: values are pre-multiplied by
                       the inverse of a regularized similarity matrix (via a
                       linear solve) before the usual softmax aggregation,
                       with a sigmoid-bounded per-token rescale of the values
                       for training stability;
  * llr_forward     -- local linear regression: each query fits a weighted
                       affine model over the keys and evaluates it at itself.

Every function here accepts Nodes (differentiable) or plain ndarrays, and
arbitrary leading batch axes. The *_reference functions are deliberately
independent re-compositions built on the explicit inverse; they exist for
tests and are never used in the model path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import linalg
from .errors import ShapeMismatch
from .linalg import CausalMask
from .rope import rope_apply

VARIANTS = ("NW", "KRR", "KRR-Share", "KRR-NoLRR", "LLR")


@dataclass
class MixerConfig:
    """Hyperparameters of one mixer head group."""

    hidden_size: int
    heads: int
    variant: str = "KRR"
    causal: bool = True
    lrr_lower: float = 0.5       # beta: lower bound of the value rescale
    lrr_upper: float = 2.0       # alpha + beta: upper bound
    lambda_init: float = 1e-10   # initial ridge regularizer (stored in log space)
    llr_reg: float = 1.0         # slope-only ridge strength for LLR
    learnable_temperature: bool = False  # per-head score scale instead of 1/sqrt(d)
    identity_bypass: bool = False  # test hook: solve := identity, rescale := 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.hidden_size % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide hidden_size ({self.hidden_size})")
        if not (0.0 < self.lrr_lower < self.lrr_upper):
            raise ValueError("need 0 < lrr_lower < lrr_upper")
        if self.lambda_init <= 0.0:
            raise ValueError("lambda_init must be positive")
        if self.llr_reg < 0.0:
            raise ValueError("llr_reg must be nonnegative")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.heads

    @property
    def score_scale(self) -> float:
        return 1.0 / np.sqrt(self.head_dim)


@dataclass
class MixerWeights:
    """Learnable projections and scalars of one mixer (arrays or Nodes).

    w_r is absent for KRR-Share (the reference reuses the key projection);
    the LRR fields are absent for KRR-NoLRR; NW/LLR carry projections only.
    """

    w_q: object
    w_k: object
    w_v: object
    w_r: object = None
    w_s: object = None
    lrr_lower: object = None
    lrr_range_raw: object = None  # softplus(raw) is the positive range
    ref_scale: object = None
    log_lambda: object = None
    temp: object = None

    def named(self) -> dict:
        """Present fields, in declaration order."""
        out = {}
        for name in ("w_q", "w_k", "w_v", "w_r", "w_s", "lrr_lower",
                     "lrr_range_raw", "ref_scale", "log_lambda", "temp"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val
        return out


def _inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def init_mixer_weights(cfg: MixerConfig, rng: np.random.Generator,
                       init_std: float = 0.02, dtype=np.float64) -> MixerWeights:
    """Fresh weights; matrices ~ N(0, init_std^2), scalars at their anchors."""
    d, h = cfg.hidden_size, cfg.heads

    def mat(rows, cols):
        return (rng.standard_normal((rows, cols)) * init_std).astype(dtype)

    w = MixerWeights(w_q=mat(d, d), w_k=mat(d, d), w_v=mat(d, d))
    if cfg.variant in ("KRR", "KRR-NoLRR"):
        w.w_r = mat(d, d)
    if cfg.variant in ("KRR", "KRR-Share"):
        w.w_s = mat(d, h)
        w.lrr_lower = np.full(h, cfg.lrr_lower, dtype=dtype)
        w.lrr_range_raw = np.full(h, _inverse_softplus(cfg.lrr_upper - cfg.lrr_lower), dtype=dtype)
    if cfg.variant in ("KRR", "KRR-Share", "KRR-NoLRR"):
        w.ref_scale = np.ones(h, dtype=dtype)
        w.log_lambda = np.full(h, np.log(cfg.lambda_init), dtype=dtype)
    if cfg.learnable_temperature:
        w.temp = np.full(h, cfg.score_scale, dtype=dtype)
    return w


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, ag.Node) else np.asarray(x)


def split_heads(x, heads: int):
    """(..., N, D) -> (..., H, N, D/H)."""
    shape = _val(x).shape
    n, d = shape[-2], shape[-1]
    y = ag.reshape(x, shape[:-1] + (heads, d // heads))
    axes = list(range(len(shape) + 1))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return ag.permute(y, axes)


def merge_heads(x):
    """(..., H, N, d) -> (..., N, H*d)."""
    shape = _val(x).shape
    h, n, d = shape[-3], shape[-2], shape[-1]
    axes = list(range(len(shape)))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    y = ag.permute(x, axes)
    return ag.reshape(y, shape[:-3] + (n, h * d))


def _apply_scale(scores, scale):
    if isinstance(scale, (int, float)):
        return ag.smul(scores, scale)
    return ag.mul(scores, scale)


def nw_attention(q, k, v, mask=None, scale=None):
    """Softmax attention: rows of the output are convex combinations of v."""
    if scale is None:
        scale = 1.0 / np.sqrt(_val(q).shape[-1])
    scores = _apply_scale(ag.matmul(q, ag.transpose(k)), scale)
    return ag.matmul(ag.softmax_masked(scores, mask=mask), v)


def lrr_scale(x, w_s, lower, range_raw):
    """Per-token, per-head value rescale, strictly inside (lower, lower+range).

    x: (..., N, D); w_s: (D, H). Returns (..., H, N) with entries
    lower + softplus(range_raw) * sigmoid(x @ w_s), bounded by construction.
    """
    logits = ag.transpose(ag.matmul(x, w_s))  # (..., H, N)
    h = _val(logits).shape[-2]
    lo = ag.reshape(lower, (h, 1))
    rng = ag.reshape(ag.softplus(range_raw), (h, 1))
    return ag.add(lo, ag.mul(rng, ag.sigmoid(logits)))


def krr_normalize(r, v_scaled, mask=None, ref_scale=1.0, log_lambda=None,
                  solver: str = "auto"):
    """Apply the inverse regularized similarity matrix to pre-scaled values.

    Builds sigma_inv = softmax(r @ (c * normalize(r))^T, mask) + exp(log_lambda) * I
    and solves sigma_inv @ out = v_scaled. With a causal mask sigma_inv is
    lower triangular with diagonal > lambda, so forward substitution applies;
    otherwise a general solve runs and may raise SingularMatrix.

    solver: "auto" (triangular iff the mask is causal), "triangular", "general".
    """
    n = _val(r).shape[-2]
    norm_r = ag.l2_normalize_rows(r)
    if not (isinstance(ref_scale, (int, float)) and ref_scale == 1.0):
        norm_r = ag.mul(norm_r, ref_scale)
    sim = ag.matmul(r, ag.transpose(norm_r))  # note: no 1/sqrt(d) on this path
    sm = ag.softmax_masked(sim, mask=mask)
    eye = np.eye(n, dtype=_val(sm).dtype)
    if log_lambda is None:
        sigma_inv = sm
    else:
        lam = ag.exp(log_lambda)
        sigma_inv = ag.add(sm, ag.mul(lam, eye))
    if solver == "auto":
        solver = "triangular" if isinstance(mask, CausalMask) else "general"
    if solver == "triangular":
        return ag.solve_lower_triangular(sigma_inv, v_scaled)
    if solver == "general":
        return ag.solve_general(sigma_inv, v_scaled)
    raise ValueError(f"unknown solver {solver!r}")


def project_heads(x, w: MixerWeights, cfg: MixerConfig, positions=None):
    """Project to per-head q, k, v (and r for KRR variants), rotary applied.

    Returns (q, k, v, r) each (..., H, N, d); r is None for NW/LLR and is the
    (already rotated) k for KRR-Share.
    """
    h = cfg.heads
    q = rope_apply(split_heads(ag.matmul(x, w.w_q), h), positions)
    k = rope_apply(split_heads(ag.matmul(x, w.w_k), h), positions)
    v = split_heads(ag.matmul(x, w.w_v), h)
    r = None
    if cfg.variant == "KRR-Share":
        r = k
    elif cfg.variant in ("KRR", "KRR-NoLRR"):
        r = rope_apply(split_heads(ag.matmul(x, w.w_r), h), positions)
    return q, k, v, r


def _head_col(param, heads: int):
    """(H,) parameter -> (H, 1, 1) for broadcasting over (..., H, N, d)."""
    return ag.reshape(param, (heads, 1, 1))


def _score_scale(w: MixerWeights, cfg: MixerConfig):
    if cfg.learnable_temperature and w.temp is not None:
        return _head_col(w.temp, cfg.heads)
    return cfg.score_scale


def cubit_forward(x, w: MixerWeights, cfg: MixerConfig, positions=None,
                  solver: str = "auto"):
    """Kernel-ridge token mixer: softmax(qk) @ solve(sigma_inv, rescale * v).

    x: (..., N, D) -> (..., N, D); heads are split, mixed independently and
    concatenated back. With cfg.identity_bypass the solve and the rescale are
    skipped, which reduces the whole thing to nw_attention exactly.
    """
    if cfg.variant not in ("KRR", "KRR-Share", "KRR-NoLRR"):
        raise ValueError(f"cubit_forward expects a KRR variant, got {cfg.variant!r}")
    n = _val(x).shape[-2]
    q, k, v, r = project_heads(x, w, cfg, positions)
    mask = CausalMask(n) if cfg.causal else None
    if cfg.identity_bypass:
        o = v
    else:
        if cfg.variant == "KRR-NoLRR":
            v_scaled = v
        else:
            s_hat = lrr_scale(x, w.w_s, w.lrr_lower, w.lrr_range_raw)  # (..., H, N)
            s_shape = _val(s_hat).shape
            v_scaled = ag.mul(v, ag.reshape(s_hat, s_shape + (1,)))
        o = krr_normalize(r, v_scaled, mask=mask,
                          ref_scale=_head_col(w.ref_scale, cfg.heads),
                          log_lambda=_head_col(w.log_lambda, cfg.heads),
                          solver=solver)
    z = nw_attention(q, k, o, mask=mask, scale=_score_scale(w, cfg))
    return merge_heads(z)


def nw_forward(x, w: MixerWeights, cfg: MixerConfig, positions=None):
    """Plain softmax-attention mixer over the same projection plumbing."""
    n = _val(x).shape[-2]
    q, k, v, _ = project_heads(x, w, cfg, positions)
    mask = CausalMask(n) if cfg.causal else None
    return merge_heads(nw_attention(q, k, v, mask=mask, scale=_score_scale(w, cfg)))


def llr_forward(q, k, v, mask=None, reg: float = 1.0, scale=None):
    """Local linear regression mixer (non-centered formulation).

    For each query i, fit value rows with a weighted affine model in the keys,
    weights from the softmax similarity row, ridge on the slopes only (the
    intercept stays free so reg -> inf degrades to nw_attention), then
    evaluate the fit at q_i.
    """
    qv = _val(q)
    n, d = qv.shape[-2], qv.shape[-1]
    batch = qv.shape[:-2]
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    scores = _apply_scale(ag.matmul(q, ag.transpose(k)), scale)
    w = ag.softmax_masked(scores, mask=mask)  # (..., N, N)
    ones = np.ones(batch + (n, 1), dtype=qv.dtype)
    m = ag.concat([ones, k], axis=-1)  # (..., N, 1+d) design matrix [1 | K]
    w4 = ag.reshape(w, batch + (n, n, 1))
    m4 = ag.reshape(m, batch + (1, n, 1 + d))
    mw = ag.mul(w4, m4)                       # (..., N, N, 1+d)
    mw_t = ag.transpose(mw)                   # (..., N, 1+d, N)
    h = ag.matmul(mw_t, m4)                   # (..., N, 1+d, 1+d)
    g = ag.matmul(mw_t, ag.reshape(v, batch + (1, n, _val(v).shape[-1])))
    reg_mat = np.eye(1 + d, dtype=qv.dtype) * reg
    reg_mat[0, 0] = 0.0  # the intercept is never regularized
    theta = ag.solve_general(ag.add(h, reg_mat), g)  # (..., N, 1+d, d_v)
    intercept = ag.slice_axis(theta, -2, 0, 1)       # (..., N, 1, d_v)
    slope = ag.slice_axis(theta, -2, 1, 1 + d)       # (..., N, d, d_v)
    q3 = ag.reshape(q, batch + (n, 1, d))
    out = ag.add(intercept, ag.matmul(q3, slope))
    return ag.reshape(out, batch + (n, _val(v).shape[-1]))


def llr_mixer_forward(x, w: MixerWeights, cfg: MixerConfig, positions=None):
    """Per-head local linear regression over projected q, k, v."""
    n = _val(x).shape[-2]
    q, k, v, _ = project_heads(x, w, cfg, positions)
    mask = CausalMask(n) if cfg.causal else None
    z = llr_forward(q, k, v, mask=mask, reg=cfg.llr_reg, scale=_score_scale(w, cfg))
    return merge_heads(z)


def mixer_forward(x, w: MixerWeights, cfg: MixerConfig, positions=None):
    """Dispatch on cfg.variant."""
    if cfg.variant == "NW":
        return nw_forward(x, w, cfg, positions)
    if cfg.variant == "LLR":
        return llr_mixer_forward(x, w, cfg, positions)
    return cubit_forward(x, w, cfg, positions)


# ---------------------------------------------------------------------------
# closed-form references (tests only; plain numpy, explicit inverses)
# ---------------------------------------------------------------------------


def krr_predict_oracle(train_x: np.ndarray, train_y: np.ndarray, query_x: np.ndarray,
                       kernel, lam: float) -> np.ndarray:
    """Literal closed-form kernel ridge prediction k(x)^T (K + lam I)^-1 Y.

    kernel(a, b) maps (p, d), (q, d) -> (p, q). Used in tests and docs, never
    in the model path.
    """
    train_x = np.asarray(train_x)
    train_y = np.asarray(train_y)
    n = train_x.shape[0]
    gram = kernel(train_x, train_x)
    kvec = kernel(np.asarray(query_x)[None, :], train_x)[0]
    coeff = linalg.explicit_inverse(gram + lam * np.eye(n, dtype=gram.dtype)) @ train_y
    return kvec @ coeff


def linear_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b.T


def cubit_forward_reference(x: np.ndarray, w: MixerWeights, cfg: MixerConfig,
                            positions=None) -> np.ndarray:
    """Explicit-inverse composition: softmax(qk) @ inv(sigma_inv) @ diag(s) @ v."""
    h, dh = cfg.heads, cfg.head_dim
    x = np.asarray(x)
    n = x.shape[-2]

    def heads_of(mat):
        y = x @ _val(mat)
        y = y.reshape(x.shape[:-1] + (h, dh))
        return np.moveaxis(y, -2, -3)

    q = rope_apply(heads_of(w.w_q), positions)
    k = rope_apply(heads_of(w.w_k), positions)
    v = heads_of(w.w_v)
    r = k if cfg.variant == "KRR-Share" else rope_apply(heads_of(w.w_r), positions)
    mask = CausalMask(n) if cfg.causal else None

    if cfg.variant == "KRR-NoLRR" or cfg.identity_bypass:
        s_hat = np.ones(x.shape[:-2] + (h, n), dtype=x.dtype)
    else:
        logits = np.moveaxis(x @ _val(w.w_s), -1, -2)  # (..., H, N)
        rng = np.log1p(np.exp(-np.abs(_val(w.lrr_range_raw)))) + np.maximum(_val(w.lrr_range_raw), 0)
        s_hat = _val(w.lrr_lower)[:, None] + rng[:, None] / (1.0 + np.exp(-logits))
    v_scaled = v * s_hat[..., :, :, None]

    if cfg.identity_bypass:
        o = v_scaled
    else:
        c = _val(w.ref_scale)[:, None, None]
        norm_r = linalg.l2_normalize_rows(r) * c
        sigma_inv = linalg.masked_softmax(r @ np.swapaxes(norm_r, -1, -2), mask)
        lam = np.exp(_val(w.log_lambda))[:, None, None]
        sigma_inv = sigma_inv + lam * np.eye(n, dtype=x.dtype)
        o = linalg.explicit_inverse(sigma_inv) @ v_scaled

    scale = _val(w.temp)[:, None, None] if (cfg.learnable_temperature and w.temp is not None) else cfg.score_scale
    a = linalg.masked_softmax(q @ np.swapaxes(k, -1, -2) * scale, mask)
    z = a @ o
    return np.moveaxis(z, -3, -2).reshape(x.shape[:-1] + (h * dh,))


def llr_forward_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask=None,
                          reg: float = 1.0, scale=None) -> np.ndarray:
    """Normal-equations reference: per-query loops and explicit inverses."""
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    n, d = q.shape[-2], q.shape[-1]
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    weights = linalg.masked_softmax(q @ np.swapaxes(k, -1, -2) * scale, mask)
    batch = q.shape[:-2]
    out = np.zeros(batch + (n, v.shape[-1]), dtype=q.dtype)
    reg_mat = np.eye(1 + d, dtype=q.dtype) * reg
    reg_mat[0, 0] = 0.0
    for b in np.ndindex(batch):
        m = np.concatenate([np.ones((n, 1), dtype=q.dtype), k[b]], axis=-1)
        for i in range(n):
            wd = np.diag(weights[b][i])
            h_i = m.T @ wd @ m + reg_mat
            g_i = m.T @ wd @ v[b]
            theta = linalg.explicit_inverse(h_i) @ g_i
            out[b + (i,)] = theta[0] + q[b][i] @ theta[1:]
    return out
