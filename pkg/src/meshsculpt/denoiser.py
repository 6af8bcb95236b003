"""Noise-prediction network: hierarchical spiral mesh convolutions.

Architecture: per-vertex input features [xyz | mask bit | learnable
vertex-index embedding | timestep Fourier embedding] are projected to the
hidden width, run through a stack of hierarchical layers, and mapped to 3
output channels. Each hierarchical layer processes the coarsest level
first; a finer level aggregates, over each vertex's spiral neighborhood,
relative features (f_j - f_i) of the level input plus the lifted coarser
outputs, with one weight matrix per spiral position, a ReLU, and a skip
connection back to the layer input.

The timestep embedding is also re-injected into every convolution as a
learnable bias term. Relative aggregation cancels any feature that is
constant across vertices, so an input-only injection would leave the
network blind to t beyond a global additive offset; the per-layer bias
modulates the ReLU gates instead, which is what gives the denoiser its
t-dependent behavior.

The vertex-index embedding deliberately breaks permutation equivariance:
the network may learn vertex-specific priors, which is what lets a fixed
template topology be denoised coherently.

Forward and backward are hand-written and exact; gradients are checked
against central finite differences in the test suite. Everything is a
pure function of explicit inputs, so results are bit-stable for a fixed
BLAS thread count.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule
from .errors import CheckpointError, ConfigError, TopologyMismatch
from .hierarchy import MeshHierarchy

SFD_MAGIC = b"SFD1"
SFD_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    hidden: int = 64
    layers: int = 4
    embed_dim: int = 16
    t_freqs: int = 64
    t_dim: int = 64

    def __post_init__(self):
        for name in ("hidden", "layers", "embed_dim", "t_freqs", "t_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def input_dim(self) -> int:
        return 3 + 1 + self.embed_dim + self.t_dim


@dataclass
class DenoiserParams:
    """All learnable tensors, keyed by name; see :func:`init_params`."""

    config: DenoiserConfig
    hierarchy_hash: int
    tensors: dict

    @property
    def dtype(self):
        return self.tensors["out_w"].dtype

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(
            self.config,
            self.hierarchy_hash,
            {k: v.astype(dtype) for k, v in self.tensors.items()},
        )

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            self.config, self.hierarchy_hash, {k: v.copy() for k, v in self.tensors.items()}
        )


def fourier_bank(t_freqs: int) -> np.ndarray:
    """Fixed geometric frequency bank for the timestep embedding."""
    if t_freqs == 1:
        return np.ones(1, dtype=np.float64)
    k = np.arange(t_freqs, dtype=np.float64)
    return 10000.0 ** (-k / (t_freqs - 1))


def timestep_features(t, t_freqs: int) -> np.ndarray:
    """[sin(t*w) | cos(t*w)] rows for integer timesteps t (shape (B, 2*t_freqs))."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    arg = t[:, None] * fourier_bank(t_freqs)[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def spiral_param_names(config: DenoiserConfig, n_levels: int):
    for i in range(config.layers):
        for l in range(n_levels):
            yield f"layer{i}.level{l}.w", f"layer{i}.level{l}.b", f"layer{i}.level{l}.tb"


def init_params(
    config: DenoiserConfig,
    hierarchy: MeshHierarchy,
    rng: np.random.Generator,
    dtype=np.float32,
) -> DenoiserParams:
    """Fan-in scaled uniform weights; embedding table N(0, 0.02)."""
    C = config.hidden
    L = hierarchy.spiral_length
    n0 = hierarchy.levels[0].size

    def uniform(shape, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape)

    tensors = {
        "embed": rng.normal(0.0, 0.02, size=(n0, config.embed_dim)),
        "t_proj_w": uniform((2 * config.t_freqs, config.t_dim), 2 * config.t_freqs),
        "t_proj_b": np.zeros(config.t_dim),
        "in_w": uniform((config.input_dim, C), config.input_dim),
        "in_b": np.zeros(C),
        "out_w": uniform((C, 3), C),
        "out_b": np.zeros(3),
    }
    for wname, bname, tbname in spiral_param_names(config, hierarchy.n_levels):
        tensors[wname] = uniform((L, C, C), L * C)
        tensors[bname] = np.zeros(C)
        tensors[tbname] = uniform((config.t_dim, C), config.t_dim)
    tensors = {k: v.astype(dtype) for k, v in tensors.items()}
    return DenoiserParams(config, hierarchy.topology_hash, tensors)


# ---------------------------------------------------------------------------
# precomputed index plan


class _SparseOp:
    """CSR linear map applied along the vertex axis of (B, R, C) arrays.

    The (B, C) axes are flattened into matrix columns, so a single sparse
    matmul handles the whole batch; results are bit-stable for fixed
    inputs (scipy's CSR kernel is sequential per row).
    """

    def __init__(self, mat):
        self._f32 = mat.astype(np.float32)
        self._f64 = mat.astype(np.float64)
        self.shape = mat.shape

    def __call__(self, x: np.ndarray) -> np.ndarray:
        B, R, C = x.shape
        mat = self._f32 if x.dtype == np.float32 else self._f64
        flat = np.ascontiguousarray(x.transpose(1, 0, 2)).reshape(R, B * C)
        out = mat @ flat
        return np.ascontiguousarray(out.reshape(-1, B, C).transpose(1, 0, 2))


def _gather_transpose_matrix(idx: np.ndarray, n_out: int, weights=None):
    from scipy import sparse

    idx = np.asarray(idx, dtype=np.int64).ravel()
    if np.bincount(idx, minlength=n_out).min() == 0:
        raise ConfigError("scatter target with no references")
    data = np.ones(len(idx)) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    cols = np.arange(len(idx))
    return sparse.csr_matrix((data, (idx, cols)), shape=(n_out, len(idx)))


class DenoiserPlan:
    """Index arrays derived from a hierarchy, shared by forward and backward."""

    def __init__(self, hierarchy: MeshHierarchy):
        from scipy import sparse

        self.hierarchy = hierarchy
        self.hash = hierarchy.topology_hash
        self.n_levels = hierarchy.n_levels
        self.spiral_length = hierarchy.spiral_length
        self.sizes = [lvl.size for lvl in hierarchy.levels]

        self.spiral_flat = []
        self.spiral_scatter = []
        for lvl in hierarchy.levels:
            flat = lvl.spirals.astype(np.int64).ravel()
            self.spiral_flat.append(flat)
            self.spiral_scatter.append(_SparseOp(_gather_transpose_matrix(flat, lvl.size)))

        # restriction: local indices of level l's vertices within level l-1
        self.restrict = [None]
        for l in range(1, self.n_levels):
            coarse = hierarchy.levels[l].vertices
            fine = hierarchy.levels[l - 1].vertices
            pos = np.searchsorted(fine, coarse)
            if not np.array_equal(fine[pos], coarse):
                raise ConfigError("hierarchy levels are not nested")
            self.restrict.append(pos.astype(np.int64))

        # single-hop lift l -> l-1, kept as gather+einsum in the forward so the
        # per-row summation order is independent of the vertex labeling
        self.up_idx = [None]
        self.up_w = [None]
        self.up_w_cast = [None]
        self.up_w64 = [None]
        up_mats = [None]
        for l in range(1, self.n_levels):
            lvl = hierarchy.levels[l]
            self.up_idx.append(lvl.up_index.astype(np.int64))
            self.up_w.append(lvl.up_weight)
            self.up_w_cast.append(lvl.up_weight.astype(np.float32))
            self.up_w64.append(lvl.up_weight.astype(np.float64))
            n_fine = lvl.up_index.shape[0]
            rows = np.repeat(np.arange(n_fine), 3)
            mat = sparse.csr_matrix(
                (lvl.up_weight.astype(np.float64).ravel(),
                 (rows, lvl.up_index.astype(np.int64).ravel())),
                shape=(n_fine, lvl.size),
            )
            up_mats.append(mat)

        # composed lifts U[m -> l] and their transposes for the backward pass
        self.lift_chain = {}
        self.lift_chain_T = {}
        for l in range(self.n_levels):
            acc = None
            for m in range(l + 1, self.n_levels):
                acc = up_mats[m] if acc is None else acc @ up_mats[m]
                self.lift_chain[(m, l)] = _SparseOp(acc.tocsr())
                self.lift_chain_T[(m, l)] = _SparseOp(acc.T.tocsr())

    def lift(self, l: int, y: np.ndarray) -> np.ndarray:
        """Lift level-l features (B, n_l, C) one level finer."""
        B, _, C = y.shape
        idx = self.up_idx[l]
        w = self.up_w_cast[l] if y.dtype == np.float32 else self.up_w64[l]
        gathered = np.take(y, idx.ravel(), axis=1).reshape(B, idx.shape[0], 3, C)
        return np.einsum("bfkc,fk->bfc", gathered, w)

    def lift_to(self, m: int, l: int, y: np.ndarray) -> np.ndarray:
        """Lift level-m features down to level l < m (single-hop chains)."""
        for k in range(m, l, -1):
            y = self.lift(k, y)
        return y

    def lift_to_T(self, m: int, l: int, d: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`lift_to`: (B, n_l, C) -> (B, n_m, C)."""
        return self.lift_chain_T[(m, l)](d)


def _check_params_plan(params: DenoiserParams, plan: DenoiserPlan) -> None:
    if params.hierarchy_hash != plan.hash:
        raise TopologyMismatch(
            f"params built for topology {params.hierarchy_hash:#018x}, "
            f"plan is {plan.hash:#018x}"
        )


# ---------------------------------------------------------------------------
# forward / backward


def _featurize(X, t, M, params: DenoiserParams, plan: DenoiserPlan):
    """Input features and their projection to the hidden width."""
    cfg = params.config
    dtype = params.dtype
    B, N, _ = X.shape
    four = timestep_features(t, cfg.t_freqs).astype(dtype)  # (B, 2F)
    c = four @ params.tensors["t_proj_w"] + params.tensors["t_proj_b"]  # (B, t_dim)
    feat = np.empty((B, N, cfg.input_dim), dtype=dtype)
    feat[:, :, 0:3] = X
    feat[:, :, 3] = M
    feat[:, :, 4 : 4 + cfg.embed_dim] = params.tensors["embed"][None, :, :]
    feat[:, :, 4 + cfg.embed_dim :] = c[:, None, :]
    h = feat @ params.tensors["in_w"] + params.tensors["in_b"]
    return four, c, feat, h


def _conv_forward(g, spiral_flat, W, b):
    """Relative spiral convolution: sum_j W_j (g[n_j] - g[i]) + b."""
    B, n, C = g.shape
    L = W.shape[0]
    G = np.take(g, spiral_flat, axis=1).reshape(B * n, L * C)
    Wf = W.reshape(L * C, C)
    Ws = W.sum(axis=0)
    y = (G @ Wf).reshape(B, n, C)
    y -= g @ Ws
    y += b
    return y, G


def _conv_backward(dY, g, G, spiral_flat, scatter, W):
    B, n, C = g.shape
    L = W.shape[0]
    dY2 = dY.reshape(B * n, C)
    dWf = G.T @ dY2  # (L*C, C)
    gTdY = g.reshape(B * n, C).T @ dY2  # (C, C)
    dW = dWf.reshape(L, C, C) - gTdY[None, :, :]
    db = dY2.sum(axis=0)
    dG = (dY2 @ W.reshape(L * C, C).T).reshape(B, n * L, C)
    dg = scatter(dG)
    dg -= dY @ W.sum(axis=0).T
    return dW, db, dg


def _layer_forward(F, c, params, plan, layer: int, keep: bool):
    """One hierarchical layer; returns (output, cache-for-backward).

    ``c`` is the per-sample timestep embedding (B, t_dim), re-injected as a
    learnable bias into every level's convolution.
    """
    nl = plan.n_levels
    # restrict the layer input down the hierarchy
    feats = [F]
    for l in range(1, nl):
        feats.append(np.take(feats[l - 1], plan.restrict[l], axis=1))

    ys = [None] * nl
    cache = {"g": [None] * nl, "G": [None] * nl, "relu": [None] * nl}
    for l in range(nl - 1, -1, -1):
        g = feats[l].copy()
        for m in range(nl - 1, l, -1):  # lift every coarser output down to level l
            g += plan.lift_to(m, l, ys[m])
        W = params.tensors[f"layer{layer}.level{l}.w"]
        b = params.tensors[f"layer{layer}.level{l}.b"]
        tb = params.tensors[f"layer{layer}.level{l}.tb"]
        y, G = _conv_forward(g, plan.spiral_flat[l], W, b)
        y += (c @ tb)[:, None, :]
        relu_mask = y > 0
        np.maximum(y, 0, out=y)
        ys[l] = y
        if keep:
            cache["g"][l] = g
            cache["G"][l] = G
            cache["relu"][l] = relu_mask
    out = ys[0] + F
    return out, cache


def _layer_backward(dOut, c, params, plan, layer: int, cache):
    nl = plan.n_levels
    dF = dOut.copy()  # skip connection
    d_y = [None] * nl
    d_y[0] = dOut
    d_feat = [None] * nl  # gradient w.r.t. the restricted layer inputs
    grads = {}
    dc = np.zeros_like(c)
    for l in range(nl):
        dY = d_y[l] * cache["relu"][l]
        W = params.tensors[f"layer{layer}.level{l}.w"]
        tb = params.tensors[f"layer{layer}.level{l}.tb"]
        dW, db, dg = _conv_backward(
            dY, cache["g"][l], cache["G"][l], plan.spiral_flat[l], plan.spiral_scatter[l], W
        )
        dY_sum = dY.sum(axis=1)  # (B, C)
        grads[f"layer{layer}.level{l}.w"] = dW
        grads[f"layer{layer}.level{l}.b"] = db
        grads[f"layer{layer}.level{l}.tb"] = c.T @ dY_sum
        dc += dY_sum @ tb.T
        d_feat[l] = dg
        # push gradient through the lift chains g_l += lift_to(m, l, y_m)
        for m in range(l + 1, nl):
            d = plan.lift_to_T(m, l, dg)
            if d_y[m] is None:
                d_y[m] = d
            else:
                d_y[m] = d_y[m] + d
    # un-restrict: accumulate level gradients back onto the full layer input
    for l in range(nl - 1, 0, -1):
        d_feat[l - 1][:, plan.restrict[l], :] += d_feat[l]
    dF += d_feat[0]
    return dF, grads, dc


def forward_batch(X, t, M, params: DenoiserParams, plan: DenoiserPlan, keep_cache: bool = False):
    """Predict noise for a batch: X (B, N, 3), t (B,), M (B, N) -> (B, N, 3)."""
    _check_params_plan(params, plan)
    dtype = params.dtype
    N = plan.sizes[0]
    X = np.asarray(X, dtype=dtype)
    if X.ndim != 3 or X.shape[1] != N or X.shape[2] != 3:
        raise TopologyMismatch(f"input shape {X.shape} does not match template ({N} vertices)")
    M = np.asarray(M, dtype=dtype).reshape(X.shape[0], N)
    four, c, feat, h = _featurize(X, t, M, params, plan)
    layer_caches = []
    layer_inputs = []
    for i in range(params.config.layers):
        layer_inputs.append(h)
        h, cache = _layer_forward(h, c, params, plan, i, keep_cache)
        layer_caches.append(cache)
    eps = h @ params.tensors["out_w"] + params.tensors["out_b"]
    if not keep_cache:
        return eps, None
    return eps, {
        "four": four,
        "c": c,
        "feat": feat,
        "head_in": h,
        "layer_inputs": layer_inputs,
        "layer_caches": layer_caches,
    }


def backward_batch(params: DenoiserParams, plan: DenoiserPlan, cache, upstream):
    """Exact gradients of sum(upstream * eps) w.r.t. every tensor and the input."""
    cfg = params.config
    dtype = params.dtype
    upstream = np.asarray(upstream, dtype=dtype)
    B, N, _ = upstream.shape
    up2 = upstream.reshape(B * N, 3)

    grads = {
        "out_w": cache["head_in"].reshape(B * N, cfg.hidden).T @ up2,
        "out_b": up2.sum(axis=0),
    }
    dh = upstream @ params.tensors["out_w"].T
    dc_total = np.zeros_like(cache["c"])
    for i in range(cfg.layers - 1, -1, -1):
        dh, layer_grads, dc = _layer_backward(dh, cache["c"], params, plan, i,
                                              cache["layer_caches"][i])
        grads.update(layer_grads)
        dc_total += dc

    feat = cache["feat"]
    dh2 = dh.reshape(B * N, cfg.hidden)
    grads["in_w"] = feat.reshape(B * N, cfg.input_dim).T @ dh2
    grads["in_b"] = dh2.sum(axis=0)
    dfeat = dh @ params.tensors["in_w"].T  # (B, N, Din)
    dX = dfeat[:, :, 0:3].copy()
    grads["embed"] = dfeat[:, :, 4 : 4 + cfg.embed_dim].sum(axis=0)
    dc_total += dfeat[:, :, 4 + cfg.embed_dim :].sum(axis=1)  # (B, t_dim)
    grads["t_proj_w"] = cache["four"].T @ dc_total
    grads["t_proj_b"] = dc_total.sum(axis=0)
    return grads, dX


# single-sample surface ------------------------------------------------------


def init_features(x_t, mask_flags, t: int, params: DenoiserParams, plan: DenoiserPlan):
    """Level-0 feature field for one mesh: concat + projection to hidden units."""
    X = np.asarray(x_t, dtype=params.dtype)[None]
    M = np.asarray(mask_flags, dtype=params.dtype)[None]
    _, _, _, h = _featurize(X, [t], M, params, plan)
    return h[0]


def hierarchical_layer(features, params: DenoiserParams, plan: DenoiserPlan, layer_index: int,
                       t: int = 1):
    """Apply one hierarchical layer to a (N, hidden) feature field."""
    cfg = params.config
    four = timestep_features([t], cfg.t_freqs).astype(params.dtype)
    c = four @ params.tensors["t_proj_w"] + params.tensors["t_proj_b"]
    out, _ = _layer_forward(np.asarray(features, dtype=params.dtype)[None], c, params, plan,
                            layer_index, keep=False)
    return out[0]


def denoiser_forward(x_t, t: int, mask_flags, params: DenoiserParams, plan: DenoiserPlan):
    """Predicted noise for every vertex of a single mesh (N, 3)."""
    eps, _ = forward_batch(
        np.asarray(x_t)[None], np.asarray([t]), np.asarray(mask_flags)[None], params, plan
    )
    return eps[0]


def denoiser_backward(x_t, t: int, mask_flags, params: DenoiserParams, plan: DenoiserPlan,
                      upstream):
    """Gradients of sum(upstream * eps) for one mesh; returns (grads, dx)."""
    _, cache = forward_batch(
        np.asarray(x_t)[None], np.asarray([t]), np.asarray(mask_flags)[None],
        params, plan, keep_cache=True,
    )
    grads, dX = backward_batch(params, plan, cache, np.asarray(upstream)[None])
    return grads, dX[0]


def make_denoise_fn(params: DenoiserParams, plan: DenoiserPlan):
    """Batched closure suitable for :func:`meshsculpt.diffusion.reverse_sample`."""
    def fn(X, t, M):
        eps, _ = forward_batch(X, t, M, params, plan)
        return eps
    return fn


# ---------------------------------------------------------------------------
# checkpoint format (magic SFD1)


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    payload = np.asarray(arr, dtype="<f4")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<I", payload.ndim)
    head += struct.pack(f"<{payload.ndim}I", *payload.shape) if payload.ndim else b""
    return head + payload.tobytes(order="C")


def save_checkpoint(path, params: DenoiserParams, schedule: NoiseSchedule,
                    extra: dict | None = None) -> None:
    """Write params (+ optional extra tensors) with schedule and topology hash.

    Named f32 tensors in sorted order; the trailing CRC32 covers everything
    before it, so truncation or corruption is always detected on load.
    """
    tensors = dict(params.tensors)
    cfg = params.config
    tensors["cfg.hidden"] = np.float32(cfg.hidden)
    tensors["cfg.layers"] = np.float32(cfg.layers)
    tensors["cfg.embed_dim"] = np.float32(cfg.embed_dim)
    tensors["cfg.t_freqs"] = np.float32(cfg.t_freqs)
    tensors["cfg.t_dim"] = np.float32(cfg.t_dim)
    if extra:
        overlap = set(extra) & set(tensors)
        if overlap:
            raise CheckpointError(f"extra tensor names collide: {sorted(overlap)}")
        tensors.update(extra)

    body = bytearray()
    body += SFD_MAGIC
    body += struct.pack("<H", SFD_VERSION)
    body += struct.pack("<Q", params.hierarchy_hash)
    body += struct.pack("<I", schedule.T)
    body += schedule.beta.astype("<f4").tobytes()
    body += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        body += _encode_tensor(name, np.asarray(tensors[name]))
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path):
    """Read a checkpoint; returns (params, schedule, hierarchy_hash, extras).

    Raises CheckpointError on any corruption (bad magic, version, sizes, or
    CRC) without returning partial state.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 + 2 + 8 + 4 + 4 + 4:
        raise CheckpointError(f"{path}: corrupt checkpoint (too short)")
    body, (crc_stored,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: corrupt checkpoint (CRC mismatch)")

    off = 0

    def take(n):
        nonlocal off
        if off + n > len(body):
            raise CheckpointError(f"{path}: corrupt checkpoint (truncated record)")
        chunk = body[off : off + n]
        off += n
        return chunk

    if take(4) != SFD_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<H", take(2))
    if version != SFD_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hierarchy_hash,) = struct.unpack("<Q", take(8))
    (T,) = struct.unpack("<I", take(4))
    if T < 1 or T > 10**7:
        raise CheckpointError(f"{path}: corrupt checkpoint (bad T)")
    beta = np.frombuffer(take(4 * T), dtype="<f4").astype(np.float64)
    (count,) = struct.unpack("<I", take(4))

    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise CheckpointError(f"{path}: corrupt checkpoint (bad rank)")
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n_items = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n_items), dtype="<f4")
        tensors[name] = arr.reshape(dims).copy() if rank else np.float32(arr[0])
    if off != len(body):
        raise CheckpointError(f"{path}: corrupt checkpoint (trailing bytes)")

    try:
        cfg = DenoiserConfig(
            hidden=int(tensors.pop("cfg.hidden")),
            layers=int(tensors.pop("cfg.layers")),
            embed_dim=int(tensors.pop("cfg.embed_dim")),
            t_freqs=int(tensors.pop("cfg.t_freqs")),
            t_dim=int(tensors.pop("cfg.t_dim")),
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint (missing {exc})") from exc

    beta64 = beta
    alpha = 1.0 - beta64
    schedule = NoiseSchedule(
        T=T, beta=beta64, alpha=alpha,
        alpha_bar=np.cumprod(alpha.astype(np.longdouble)).astype(np.float64),
    )

    param_tensors = {}
    extras = {}
    for name, arr in tensors.items():
        if name.startswith(("layer", "cfg.")) or name in (
            "embed", "t_proj_w", "t_proj_b", "in_w", "in_b", "out_w", "out_b",
        ):
            param_tensors[name] = arr
        else:
            extras[name] = arr
    needed = {"embed", "t_proj_w", "t_proj_b", "in_w", "in_b", "out_w", "out_b"}
    layer_keys = [k for k in param_tensors if k.startswith("layer")]
    for k in layer_keys:
        stem = k.rsplit(".", 1)[0]
        needed.update(f"{stem}.{suffix}" for suffix in ("w", "b", "tb"))
    missing = needed - set(param_tensors)
    if missing:
        raise CheckpointError(f"{path}: corrupt checkpoint (missing tensors {sorted(missing)})")
    params = DenoiserParams(cfg, hierarchy_hash, param_tensors)
    return params, schedule, hierarchy_hash, extras


def require_hash(params_hash: int, topology_hash: int) -> None:
    if params_hash != topology_hash:
        raise TopologyMismatch(
            f"topology mismatch: checkpoint {params_hash:#018x} vs mesh {topology_hash:#018x}"
        )
