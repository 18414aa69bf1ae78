"""Context-conditioned reconstruction of normal action representations.

For each candidate next action, the network predicts the feature vector a
correct execution should produce: a stack of causal dilated convolutions
summarizes the context frames, a windowed two-head cross-attention (queried
by the candidate's cluster center) reads the summary, and a final linear
head emits a residual that is added to the cluster center. The residual
head is zero-initialized, so an untrained model reproduces the centers.

Everything is plain float64 numpy with hand-written backprop; gradients are
verifiable against central finite differences (see gradient_check).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import ClusterCenters, cluster_centers
from .errors import ConfigError, FormatError, MissingCenterError, TrainingDivergedError

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ReconstructorConfig:
    dim: int
    conv_layers: int = 5
    kernel: int = 3
    attn_window: int = 32
    heads: int = 2
    proj_kernel: int = 3

    def __post_init__(self):
        if self.dim < 1 or self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible across {self.heads} heads")
        if self.attn_window < 1:
            raise ConfigError(f"attn_window must be >= 1, got {self.attn_window}")

    @property
    def head_dim(self):
        return self.dim // self.heads

    @property
    def dilations(self):
        return tuple(3 ** i for i in range(self.conv_layers))

    def to_dict(self):
        return {"dim": self.dim, "conv_layers": self.conv_layers,
                "kernel": self.kernel, "attn_window": self.attn_window,
                "heads": self.heads, "proj_kernel": self.proj_kernel}


@dataclass
class ReconstructorParams:
    """All trainable tensors. conv_w[l] mixes channels, q/k/v kernels are depthwise."""

    config: ReconstructorConfig
    conv_w: list  # per layer: (kernel, D, D)
    conv_b: list  # per layer: (D,)
    q_w: np.ndarray  # (proj_kernel, D); only the last tap reaches a length-1 query
    q_b: np.ndarray
    k_w: np.ndarray  # no key bias: softmax is invariant to a shared key offset
    v_w: np.ndarray
    v_b: np.ndarray
    out_w: np.ndarray  # (heads, head_dim, D)
    out_b: np.ndarray  # (D,)
    res_w: np.ndarray  # (D, D), zero at init
    res_b: np.ndarray  # (D,)

    def named(self):
        """Flat name -> array view, shared by updates and gradient checking."""
        out = {}
        for l, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"conv_w{l}"] = w
            out[f"conv_b{l}"] = b
        out.update(q_w=self.q_w, q_b=self.q_b, k_w=self.k_w,
                   v_w=self.v_w, v_b=self.v_b, out_w=self.out_w, out_b=self.out_b,
                   res_w=self.res_w, res_b=self.res_b)
        return out

    def copy(self):
        cfg = self.config
        return ReconstructorParams(
            config=cfg,
            conv_w=[w.copy() for w in self.conv_w],
            conv_b=[b.copy() for b in self.conv_b],
            q_w=self.q_w.copy(), q_b=self.q_b.copy(), k_w=self.k_w.copy(),
            v_w=self.v_w.copy(), v_b=self.v_b.copy(),
            out_w=self.out_w.copy(), out_b=self.out_b.copy(),
            res_w=self.res_w.copy(), res_b=self.res_b.copy(),
        )


@dataclass
class NormalSet:
    """Reconstructed representations for a candidate set, in candidate order."""

    candidates: tuple
    representations: np.ndarray  # (|C|, D)
    residuals: np.ndarray  # (|C|, D)


@dataclass
class ReconstructionModel:
    params: ReconstructorParams
    centers: ClusterCenters

    @property
    def config(self):
        return self.params.config


def init_params(config, seed) -> ReconstructorParams:
    """Seeded initialization; the residual head starts at exactly zero."""
    rng = np.random.default_rng(seed)
    d = config.dim
    conv_scale = 1.0 / math.sqrt(config.kernel * d)
    conv_w = [rng.normal(0.0, conv_scale, size=(config.kernel, d, d))
              for _ in range(config.conv_layers)]
    conv_b = [np.zeros(d) for _ in range(config.conv_layers)]
    proj_scale = 1.0 / math.sqrt(config.proj_kernel)
    q_w = rng.normal(0.0, proj_scale, size=(config.proj_kernel, d))
    k_w = rng.normal(0.0, proj_scale, size=(config.proj_kernel, d))
    v_w = rng.normal(0.0, proj_scale, size=(config.proj_kernel, d))
    out_w = rng.normal(0.0, 1.0 / math.sqrt(config.head_dim),
                       size=(config.heads, config.head_dim, d))
    return ReconstructorParams(
        config=config, conv_w=conv_w, conv_b=conv_b,
        q_w=q_w, q_b=np.zeros(d), k_w=k_w,
        v_w=v_w, v_b=np.zeros(d),
        out_w=out_w, out_b=np.zeros(d),
        res_w=np.zeros((d, d)), res_b=np.zeros(d),
    )


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def _shifted(x, s):
    """Rows delayed by s steps: out[t] = x[t - s], zero where t < s."""
    if s == 0:
        return x
    out = np.zeros_like(x)
    out[s:] = x[:-s]
    return out


def _conv_forward(x, params):
    """Causal dilated conv stack; returns output plus per-layer caches."""
    caches = []
    for w, b, dil in zip(params.conv_w, params.conv_b, params.config.dilations):
        kernel = w.shape[0]
        z = np.full_like(x, b)
        for k in range(kernel):
            z += _shifted(x, (kernel - 1 - k) * dil) @ w[k]
        y = np.maximum(z, 0.0) + x
        caches.append((x, z))
        x = y
    return x, caches


def causal_dilated_conv(context, params) -> np.ndarray:
    """Apply the full conv stack to a T x D context. Output at frame t never
    depends on frames after t."""
    context = np.asarray(context, dtype=np.float64)
    out, _ = _conv_forward(context, params)
    return out


def _depthwise_forward(x, w, b=None):
    """Per-channel causal conv along time: y[t,c] = sum_j w[j,c] x[t-(K-1-j),c] + b[c]."""
    y = np.zeros_like(x) if b is None else np.tile(b, (x.shape[0], 1))
    for j in range(w.shape[0]):
        y += _shifted(x, w.shape[0] - 1 - j) * w[j]
    return y


def _attention_forward(queries, context, params):
    cfg = params.config
    t = context.shape[0]
    win = context[max(0, t - cfg.attn_window):]
    kp = _depthwise_forward(win, params.k_w)
    vp = _depthwise_forward(win, params.v_w, params.v_b)
    # a length-1 "sequence" only ever sees the kernel's last tap
    qp = queries * params.q_w[-1] + params.q_b
    hd = cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    attn = []
    heads_out = []
    ctx = np.tile(params.out_b, (queries.shape[0], 1))
    for h in range(cfg.heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = qp[:, sl] @ kp[:, sl].T * scale
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        a = e / e.sum(axis=1, keepdims=True)
        o = a @ vp[:, sl]
        ctx += o @ params.out_w[h]
        attn.append(a)
        heads_out.append(o)
    cache = (win, kp, vp, qp, attn, heads_out, max(0, t - cfg.attn_window))
    return ctx, cache


def local_cross_attention(queries, context, params) -> np.ndarray:
    """Windowed two-head cross-attention over the last attn_window context rows.

    Rows outside the window never contribute: the window is sliced off
    before the key/value projections are applied.
    """
    queries = np.asarray(queries, dtype=np.float64)
    context = np.asarray(context, dtype=np.float64)
    out, _ = _attention_forward(queries, context, params)
    return out


def reconstruct_normals(candidates, context, centers, params) -> NormalSet:
    """Normal representation (center + predicted residual) per candidate.

    With an empty context there is nothing to condition on, so the residual
    is zero and the representations equal the centers.
    """
    candidates = tuple(int(c) for c in candidates)
    for c in candidates:
        if c not in centers:
            raise MissingCenterError(c)
    queries = np.stack([centers[c] for c in candidates])
    context = np.asarray(context, dtype=np.float64)
    if context.shape[0] == 0:
        residuals = np.zeros_like(queries)
    else:
        conv_out, _ = _conv_forward(context, params)
        ctx, _ = _attention_forward(queries, conv_out, params)
        residuals = ctx @ params.res_w + params.res_b
    return NormalSet(candidates=candidates,
                     representations=queries + residuals,
                     residuals=residuals)


def loss(f_normal, f_action) -> float:
    """Squared Euclidean distance between reconstruction and observed feature."""
    diff = np.asarray(f_normal, dtype=np.float64) - np.asarray(f_action, dtype=np.float64)
    return float(diff @ diff)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _zero_grads(params):
    return {name: np.zeros_like(arr) for name, arr in params.named().items()}


def _depthwise_backward(dy, x, w, grads, w_name, b_name=None):
    kernel = w.shape[0]
    dx = np.zeros_like(x)
    for j in range(kernel):
        s = kernel - 1 - j
        xs = _shifted(x, s)
        grads[w_name][j] += (dy * xs).sum(axis=0)
        if s == 0:
            dx += dy * w[j]
        else:
            dx[:-s] += dy[s:] * w[j]
    if b_name is not None:
        grads[b_name] += dy.sum(axis=0)
    return dx


def _attention_backward(d_ctx, queries, cache, params, grads):
    cfg = params.config
    win, kp, vp, qp, attn, heads_out, win_start = cache
    hd = cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    d_qp = np.zeros_like(qp)
    d_kp = np.zeros_like(kp)
    d_vp = np.zeros_like(vp)
    grads["out_b"] += d_ctx.sum(axis=0)
    for h in range(cfg.heads):
        sl = slice(h * hd, (h + 1) * hd)
        a, o = attn[h], heads_out[h]
        grads["out_w"][h] += o.T @ d_ctx
        d_o = d_ctx @ params.out_w[h].T
        d_a = d_o @ vp[:, sl].T
        d_vp[:, sl] += a.T @ d_o
        d_scores = a * (d_a - (d_a * a).sum(axis=1, keepdims=True))
        d_qp[:, sl] += d_scores @ kp[:, sl] * scale
        d_kp[:, sl] += d_scores.T @ qp[:, sl] * scale
    grads["q_w"][-1] += (d_qp * queries).sum(axis=0)
    grads["q_b"] += d_qp.sum(axis=0)
    d_win = _depthwise_backward(d_kp, win, params.k_w, grads, "k_w")
    d_win += _depthwise_backward(d_vp, win, params.v_w, grads, "v_w", "v_b")
    return d_win, win_start


def _conv_backward(d_out, caches, params, grads):
    dx = d_out
    for l in range(len(caches) - 1, -1, -1):
        x, z = caches[l]
        w = params.conv_w[l]
        dil = params.config.dilations[l]
        kernel = w.shape[0]
        dz = dx * (z > 0.0)
        d_in = dx.copy()
        for k in range(kernel):
            s = (kernel - 1 - k) * dil
            xs = _shifted(x, s)
            grads[f"conv_w{l}"][k] += xs.T @ dz
            g = dz @ w[k].T
            if s == 0:
                d_in += g
            else:
                d_in[:-s] += g[s:]
        grads[f"conv_b{l}"] += dz.sum(axis=0)
        dx = d_in
    return dx


def loss_and_grads(sample, params, centers):
    """Single-candidate forward and full backward pass for one sample.

    The query is the target class's cluster center (centers are constants
    and receive no updates). Returns (loss, grads) where grads has the same
    keys as params.named().
    """
    target = sample.target_class
    if target not in centers:
        raise MissingCenterError(target)
    queries = centers[target][None, :]
    context = np.asarray(sample.context, dtype=np.float64)
    grads = _zero_grads(params)
    if context.shape[0] == 0:
        f = queries[0]
        diff = f - sample.target_feature
        return float(diff @ diff), grads
    conv_out, conv_caches = _conv_forward(context, params)
    ctx, attn_cache = _attention_forward(queries, conv_out, params)
    r = ctx @ params.res_w + params.res_b
    f = queries + r
    diff = f - sample.target_feature[None, :]
    value = float((diff * diff).sum())

    d_f = 2.0 * diff
    grads["res_w"] += ctx.T @ d_f
    grads["res_b"] += d_f.sum(axis=0)
    d_ctx = d_f @ params.res_w.T
    d_win, win_start = _attention_backward(d_ctx, queries, attn_cache, params, grads)
    d_conv_out = np.zeros_like(conv_out)
    d_conv_out[win_start:] = d_win
    _conv_backward(d_conv_out, conv_caches, params, grads)
    return value, grads


def _apply_update(params, grads, lr):
    new = params.copy()
    for name, arr in new.named().items():
        arr -= lr * grads[name]
    return new


def train_step(sample, params, centers, lr):
    """One gradient-descent step on a single sample. Returns (loss, new params)."""
    value, grads = loss_and_grads(sample, params, centers)
    if not math.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss on video {sample.video!r} (class {sample.target_class})")
    return value, _apply_update(params, grads, lr)


def cosine_lr(lr0, epoch, epochs) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


def dataset_loss(params, centers, samples) -> float:
    """Mean reconstruction loss over a sample list (no updates)."""
    total = 0.0
    for s in samples:
        value, _ = loss_and_grads(s, params, centers)
        total += value
    return total / len(samples)


def train(samples, config, *, epochs=200, batch_size=8, lr0=1e-3,
          seed=0, centers=None) -> ReconstructionModel:
    """Mini-batch gradient descent with a cosine-annealed learning rate.

    Cluster centers default to the per-class means of the samples' target
    features. The shuffle stream is fixed by the seed, so identical inputs
    give identical final parameters.
    """
    samples = list(samples)
    if not samples:
        raise ConfigError("training needs at least one sample")
    if epochs < 0 or batch_size < 1:
        raise ConfigError(f"bad schedule: epochs={epochs} batch_size={batch_size}")
    if centers is None:
        centers = cluster_centers((s.target_class, s.target_feature) for s in samples)
    for s in samples:
        if s.target_class not in centers:
            raise MissingCenterError(s.target_class)

    init_seed, shuffle_seed = np.random.SeedSequence(seed).spawn(2)
    params = init_params(config, init_seed)
    rng = np.random.default_rng(shuffle_seed)
    n = len(samples)
    for epoch in range(epochs):
        lr = cosine_lr(lr0, epoch, epochs)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch = [samples[i] for i in order[start:start + batch_size]]
            grads = _zero_grads(params)
            for s in batch:
                value, g = loss_and_grads(s, params, centers)
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} on video {s.video!r}")
                epoch_loss += value
                for name in grads:
                    grads[name] += g[name]
            for name in grads:
                grads[name] /= len(batch)
            params = _apply_update(params, grads, lr)
        logger.info("epoch %d/%d lr %.3g mean loss %.6g",
                    epoch + 1, epochs, lr, epoch_loss / n)
    return ReconstructionModel(params=params, centers=centers)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def kink_margin(sample, params, centers) -> float:
    """Smallest |pre-activation| across the conv stack for this sample.

    Central finite differences are only a trustworthy oracle when every
    rectifier input is farther from zero than the probe step can push it;
    callers should discard check instances with a margin near eps.
    """
    context = np.asarray(sample.context, dtype=np.float64)
    if context.shape[0] == 0:
        return math.inf
    _, caches = _conv_forward(context, params)
    return min(float(np.abs(z).min()) for _, z in caches)


def gradient_gap(sample, params, centers, grads, eps=1e-5) -> float:
    """Worst per-parameter relative error of `grads` against central differences.

    Each named parameter tensor is compared by norm: |num - ana| /
    max(|num|, |ana|, 1e-8). Element-wise ratios are meaningless here, since
    the probe's own rounding error (~|loss| * 1e-16 / eps) swamps any
    element whose true gradient is tiny.
    """
    worst = 0.0
    for name, arr in params.named().items():
        numeric = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            hi, _ = loss_and_grads(sample, params, centers)
            arr[idx] = orig - eps
            lo, _ = loss_and_grads(sample, params, centers)
            arr[idx] = orig
            numeric[idx] = (hi - lo) / (2.0 * eps)
        analytic = grads[name]
        gap = float(np.linalg.norm(numeric - analytic))
        denom = max(float(np.linalg.norm(numeric)), float(np.linalg.norm(analytic)), 1e-8)
        worst = max(worst, gap / denom)
    return worst


def gradient_check(sample, params, centers, eps=1e-5) -> float:
    """Max relative error of the analytic backward pass on one sample."""
    _, grads = loss_and_grads(sample, params, centers)
    return gradient_gap(sample, params, centers, grads, eps=eps)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def save_model(path, model) -> None:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "centers": {str(label): model.centers.centers[label].tolist()
                    for label in sorted(model.centers.centers)},
        "center_counts": {str(label): model.centers.counts[label]
                          for label in sorted(model.centers.counts)},
        "params": {name: arr.tolist() for name, arr in sorted(model.params.named().items())},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)
        f.write("\n")


def load_model(path) -> ReconstructionModel:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(path, f"invalid JSON ({e.msg})") from e
    for key in ("format_version", "config", "centers", "params"):
        if key not in doc:
            raise FormatError(path, f"missing field {key!r}")
    if doc["format_version"] != MODEL_FORMAT_VERSION:
        raise FormatError(path, f"unsupported format_version {doc['format_version']}")
    config = ReconstructorConfig(**doc["config"])
    params = init_params(config, 0)
    stored = doc["params"]
    for name, arr in params.named().items():
        if name not in stored:
            raise FormatError(path, f"missing tensor {name!r}")
        loaded = np.asarray(stored[name], dtype=np.float64)
        if loaded.shape != arr.shape:
            raise FormatError(
                path, f"tensor {name!r} has shape {loaded.shape}, expected {arr.shape}")
        arr[...] = loaded
    centers = ClusterCenters(
        centers={int(k): np.asarray(v, dtype=np.float64)
                 for k, v in doc["centers"].items()},
        counts={int(k): int(v) for k, v in doc.get("center_counts", {}).items()},
    )
    return ReconstructionModel(params=params, centers=centers)
