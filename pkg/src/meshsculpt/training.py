"""Masked-diffusion training: loss, Adam, the epoch loop, and the toy dataset.

Per training step each sample draws a fresh timestep, a fresh random
region mask, and fresh noise; the network predicts the noise and the MSE
is taken over masked vertices only (unmasked vertices carry no noise, so
predicting there would be ill-posed).

Reproducibility: the step-s generator is derived from (seed, s) and the
epoch-e shuffle from (seed, e), so a run is a pure function of its config
and resuming from a checkpoint replays the exact trajectory.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .denoiser import (
    DenoiserConfig,
    DenoiserParams,
    DenoiserPlan,
    backward_batch,
    forward_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .diffusion import NoiseSchedule, diffuse_batch, make_schedule
from .errors import ConfigError, TrainingDiverged
from .hierarchy import MeshHierarchy
from .mesh import MaskConfig, MeshSample, TemplateTopology, default_k_max, sample_training_mask


# ---------------------------------------------------------------------------
# synthetic morphable model


@dataclass
class ToyMorphableModel:
    """Mean shape plus K orthonormal deformation fields with per-mode scales."""

    mean_shape: np.ndarray  # (N, 3) model units
    basis: np.ndarray  # (K, N, 3), orthonormal under the flattened inner product
    sigma: np.ndarray  # (K,)

    @property
    def K(self) -> int:
        return self.basis.shape[0]

    def synthesize(self, codes: np.ndarray) -> np.ndarray:
        """mean + sum_k codes_k * sigma_k * basis_k for (n, K) codes."""
        codes = np.atleast_2d(codes)
        disp = np.tensordot(codes * self.sigma[None, :], self.basis, axes=(1, 0))
        return self.mean_shape[None] + disp

    def projection_residual(self, meshes: np.ndarray) -> np.ndarray:
        """RMS distance of each mesh from the model's affine subspace (model units)."""
        X = np.asarray(meshes).reshape(len(meshes), -1) - self.mean_shape.ravel()[None]
        B = self.basis.reshape(self.K, -1)
        resid = X - (X @ B.T) @ B
        return np.sqrt((resid**2).mean(axis=1))


@dataclass
class ToyDataset:
    topology: TemplateTopology
    model: ToyMorphableModel
    train: np.ndarray  # (n_train, N, 3)
    test: np.ndarray
    codes_train: np.ndarray
    codes_test: np.ndarray
    noise_std: float
    seed: int
    mode: str = "identity"


def _bump_field(positions, rng, n_centers, width, center_pool):
    """Sum of Gaussian kernels at random surface points, each with a random direction."""
    field_ = np.zeros_like(positions)
    for _ in range(n_centers):
        c = positions[center_pool[rng.integers(0, len(center_pool))]]
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        a = rng.standard_normal()
        w = np.exp(-((positions - c) ** 2).sum(axis=1) / (2.0 * width**2))
        field_ += a * w[:, None] * d[None, :]
    return field_


def generate_toy_dataset(
    topology: TemplateTopology,
    template: MeshSample,
    K: int,
    n_samples: int,
    seed: int,
    n_test: int = 0,
    n_centers: int = 4,
    kernel_width: float | None = None,
    sigma0: float | None = None,
    decay: float = 0.85,
    noise_std: float = 0.0,
    mode: str = "identity",
) -> ToyDataset:
    """Synthesize a linear shape manifold and draw samples from it.

    Basis fields are Gram-Schmidt-orthonormalized smooth random bumps;
    samples are mean + sum z_k sigma_k basis_k with z ~ N(0,1), plus an
    optional iid noise floor of ``noise_std`` model units per component.
    ``mode="expression"`` restricts bump centers to a localized cap and
    halves the kernel width, emulating expression-style deformations.
    """
    n_verts = topology.vertex_count
    if not 0 <= K < 3 * n_verts:
        raise ConfigError("K must satisfy 0 <= K < 3 * vertex_count")
    if mode not in ("identity", "expression"):
        raise ConfigError(f"unknown dataset mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pos = template.positions
    center = pos.mean(axis=0)
    radius = float(np.sqrt(((pos - center) ** 2).sum(axis=1).mean()))
    if kernel_width is None:
        kernel_width = 0.35 * radius
    if sigma0 is None:
        sigma0 = 0.08 * radius
    if mode == "expression":
        kernel_width *= 0.5
        cap = pos[:, 2] >= np.quantile(pos[:, 2], 0.6)
        center_pool = np.flatnonzero(cap)
    else:
        center_pool = np.arange(n_verts)

    basis = np.zeros((K, n_verts, 3), dtype=np.float64)
    got = 0
    attempts = 0
    while got < K:
        attempts += 1
        if attempts > 20 * K + 20:
            raise ConfigError("degenerate Gram-Schmidt: cannot build an orthonormal basis")
        f = _bump_field(pos, rng, n_centers, kernel_width, center_pool).ravel()
        for _ in range(2):  # two passes for numerical orthogonality
            for j in range(got):
                f -= (f @ basis[j].ravel()) * basis[j].ravel()
        norm = np.linalg.norm(f)
        if norm < 1e-8:
            continue
        basis[got] = (f / norm).reshape(n_verts, 3)
        got += 1

    sigma = sigma0 * decay ** np.arange(K)
    model = ToyMorphableModel(mean_shape=pos.copy(), basis=basis, sigma=sigma)

    total = n_samples + n_test
    codes = rng.standard_normal((total, K)) if K else np.zeros((total, 0))
    meshes = model.synthesize(codes)
    if noise_std > 0:
        meshes = meshes + noise_std * rng.standard_normal(meshes.shape)
    return ToyDataset(
        topology=topology,
        model=model,
        train=meshes[:n_samples],
        test=meshes[n_samples:],
        codes_train=codes[:n_samples],
        codes_test=codes[n_samples:],
        noise_std=float(noise_std),
        seed=seed,
        mode=mode,
    )


def save_dataset(out_dir, dataset: ToyDataset) -> None:
    from .mesh import save_obj

    os.makedirs(out_dir, exist_ok=True)
    save_obj(os.path.join(out_dir, "template.obj"), dataset.topology,
             MeshSample(dataset.model.mean_shape))
    np.save(os.path.join(out_dir, "train.npy"), dataset.train)
    np.save(os.path.join(out_dir, "test.npy"), dataset.test)
    np.save(os.path.join(out_dir, "basis.npy"), dataset.model.basis)
    np.save(os.path.join(out_dir, "sigma.npy"), dataset.model.sigma)
    np.save(os.path.join(out_dir, "codes_train.npy"), dataset.codes_train)
    np.save(os.path.join(out_dir, "codes_test.npy"), dataset.codes_test)
    meta = {
        "k": int(dataset.model.K),
        "seed": dataset.seed,
        "noise_std": dataset.noise_std,
        "mode": dataset.mode,
        "n_train": int(len(dataset.train)),
        "n_test": int(len(dataset.test)),
        "units": "mm",
    }
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> ToyDataset:
    from .mesh import load_obj

    topo, template = load_obj(os.path.join(path, "template.obj"))
    with open(os.path.join(path, "meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    model = ToyMorphableModel(
        mean_shape=template.positions,
        basis=np.load(os.path.join(path, "basis.npy")),
        sigma=np.load(os.path.join(path, "sigma.npy")),
    )
    return ToyDataset(
        topology=topo,
        model=model,
        train=np.load(os.path.join(path, "train.npy")),
        test=np.load(os.path.join(path, "test.npy")),
        codes_train=np.load(os.path.join(path, "codes_train.npy")),
        codes_test=np.load(os.path.join(path, "codes_test.npy")),
        noise_std=float(meta.get("noise_std", 0.0)),
        seed=int(meta.get("seed", 0)),
        mode=meta.get("mode", "identity"),
    )


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs: int = 600
    base_lr: float = 1e-2  # linear decay to 0 over all steps
    batch_size: int = 32
    k_max: int = 0  # 0 = derive from the topology (~40% coverage cap)
    full_mask_probability: float = 0.1
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: int = 64
    layers: int = 4
    embed_dim: int = 16
    t_freqs: int = 64
    t_dim: int = 64
    levels: int = 3
    ratios: tuple = (1.0, 0.25, 0.0625)
    spiral_length: int = 9
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        for name in ("base_lr", "batch_size", "adam_beta1", "adam_beta2", "adam_eps",
                     "T", "beta_start", "beta_end"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.full_mask_probability <= 1.0:
            raise ConfigError("full_mask_probability must be in [0, 1]")
        if self.k_max < 0:
            raise ConfigError("k_max must be >= 0")

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            hidden=self.hidden, layers=self.layers, embed_dim=self.embed_dim,
            t_freqs=self.t_freqs, t_dim=self.t_dim,
        )

    def mask_config(self, topology: TemplateTopology) -> MaskConfig:
        k = self.k_max if self.k_max > 0 else default_k_max(topology)
        return MaskConfig(k_max=k, full_mask_probability=self.full_mask_probability)


def parse_config_file(path) -> dict:
    """Plain-text ``key = value`` file; '#' starts a comment."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key] = val
    return out


def config_from_mapping(mapping: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    kwargs = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
    types = {f.name: f.type for f in fields(TrainConfig)}
    for key, val in mapping.items():
        if key not in kwargs:
            raise ConfigError(f"unknown config key {key!r}")
        if key == "ratios":
            if isinstance(val, str):
                val = tuple(float(x) for x in val.replace(",", " ").split())
            kwargs[key] = tuple(float(x) for x in val)
        elif types[key] in ("int", int):
            kwargs[key] = int(val)
        elif types[key] in ("float", float):
            kwargs[key] = float(val)
        else:
            kwargs[key] = val
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def init(cls, params: DenoiserParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t) for k, t in params.tensors.items()},
            v={k: np.zeros_like(t) for k, t in params.tensors.items()},
            step=0,
        )


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adam_update(params: DenoiserParams, grads: dict, state: AdamState, lr: float,
                beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.tensors.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


def lr_at(step: int, total_steps: int, base_lr: float) -> float:
    """Linear decay: base_lr * (1 - step/total_steps); exactly 0 at the end."""
    return base_lr * (1.0 - step / total_steps)


# ---------------------------------------------------------------------------
# training steps and loop


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0, step)))


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1, epoch)))


def masked_mse(eps_hat: np.ndarray, noise: np.ndarray, flags: np.ndarray):
    """MSE over masked vertex components only; returns (loss, d loss / d eps_hat).

    Unmasked entries of eps_hat contribute nothing to either value.
    """
    m3 = flags[:, :, None]
    denom = float(flags.sum()) * 3.0
    if denom == 0:
        raise ConfigError("no masked vertices in the batch")
    diff = np.where(m3, np.asarray(eps_hat, dtype=np.float64) - noise, 0.0)
    loss = float((diff**2).sum() / denom)
    return loss, (2.0 / denom) * diff


def training_step(
    batch_x0: np.ndarray,
    params: DenoiserParams,
    plan: DenoiserPlan,
    opt_state: AdamState,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    mask_cfg: MaskConfig,
    topology: TemplateTopology,
    config: TrainConfig,
    lr: float,
) -> float:
    """One optimization step on a (B, N, 3) normalized batch; mutates params/opt_state."""
    B, N, _ = batch_x0.shape
    if B == 0:
        raise ConfigError("empty batch")
    flags = np.empty((B, N), dtype=bool)
    for i in range(B):
        flags[i] = sample_training_mask(topology, rng, mask_cfg).flags
    t = rng.integers(1, schedule.T + 1, size=B)
    noise = rng.standard_normal((B, N, 3))
    x_t = diffuse_batch(batch_x0, t, flags, schedule, noise)

    eps_hat, cache = forward_batch(
        x_t.astype(params.dtype), t, flags, params, plan, keep_cache=True
    )
    loss, upstream = masked_mse(eps_hat, noise, flags)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at adam step {opt_state.step + 1}")

    grads, _ = backward_batch(params, plan, cache, upstream.astype(params.dtype))
    clip_global_norm(grads, config.clip_norm)
    adam_update(params, grads, opt_state, lr,
                beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
    return loss


@dataclass
class Normalization:
    """Model-unit <-> diffusion-space transform stored in every checkpoint."""

    center: np.ndarray  # (3,)
    scale: float  # model units per diffusion unit

    def to_model_space(self, x):
        return x * self.scale + self.center

    def to_diffusion_space(self, x):
        return (x - self.center) / self.scale

    @classmethod
    def fit(cls, mean_shape: np.ndarray) -> "Normalization":
        center = mean_shape.mean(axis=0)
        rms = float(np.sqrt(((mean_shape - center) ** 2).sum(axis=1).mean()))
        if rms <= 0:
            raise ConfigError("degenerate mean shape (zero extent)")
        return cls(center=center, scale=rms)


def _train_extras(params, opt_state: AdamState, norm: Normalization,
                  mean_shape: np.ndarray, mask_cfg: MaskConfig, epochs_done: int,
                  hierarchy: MeshHierarchy) -> dict:
    extras = {
        "norm.center": norm.center.astype(np.float32),
        "norm.scale": np.float32(norm.scale),
        "norm.mean_shape": mean_shape.astype(np.float32),
        "mask.k_max": np.float32(mask_cfg.k_max),
        "mask.full_probability": np.float32(mask_cfg.full_mask_probability),
        "hier.ratios": np.asarray(hierarchy.ratios, dtype=np.float32),
        "hier.spiral_length": np.float32(hierarchy.spiral_length),
        "adam.step": np.float32(opt_state.step),
        "train.epochs_done": np.float32(epochs_done),
    }
    for name in params.tensors:
        extras[f"adam.m.{name}"] = opt_state.m[name]
        extras[f"adam.v.{name}"] = opt_state.v[name]
    return extras


def train(
    dataset_train: np.ndarray,
    topology: TemplateTopology,
    hierarchy: MeshHierarchy,
    config: TrainConfig,
    out_dir,
    resume_from=None,
    quiet: bool = True,
) -> dict:
    """Full training loop; writes checkpoints, an NDJSON log, and a loss curve.

    Returns {"params", "schedule", "norm", "epoch_losses", "final_path"}.
    Aborts with TrainingDiverged if the epoch loss exceeds 10x the first
    epoch's for 3 consecutive epochs.
    """
    if len(dataset_train) == 0:
        raise ConfigError("dataset is empty")
    from .tuning import tune_allocator

    tune_allocator()
    os.makedirs(out_dir, exist_ok=True)
    plan = DenoiserPlan(hierarchy)
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    mask_cfg = config.mask_config(topology)

    mean_shape = np.asarray(dataset_train, dtype=np.float64).mean(axis=0)
    norm = Normalization.fit(mean_shape)
    data = norm.to_diffusion_space(np.asarray(dataset_train, dtype=np.float64)).astype(np.float32)

    if resume_from is not None:
        params, ckpt_schedule, _, extras = load_checkpoint(resume_from)
        # keep the full-precision schedule built from the config; the stored
        # one went through f32 and would perturb the replayed trajectory
        if ckpt_schedule.T != schedule.T or \
                np.abs(ckpt_schedule.beta - schedule.beta).max() > 1e-6:
            raise ConfigError("resume config disagrees with the checkpoint's noise schedule")
        if params.hierarchy_hash != hierarchy.topology_hash:
            from .errors import TopologyMismatch

            raise TopologyMismatch("resume checkpoint was trained on a different topology")
        opt_state = AdamState.init(params)
        opt_state.step = int(extras["adam.step"])
        for name in params.tensors:
            opt_state.m[name] = extras[f"adam.m.{name}"].astype(params.dtype)
            opt_state.v[name] = extras[f"adam.v.{name}"].astype(params.dtype)
        # recompute the transform in full precision (the checkpoint stores f32)
        # and make sure this really is the dataset the run started from
        stored_center = extras["norm.center"].astype(np.float64)
        stored_scale = float(extras["norm.scale"])
        if (np.abs(norm.center - stored_center).max() > 1e-3 * norm.scale
                or abs(norm.scale - stored_scale) > 1e-3 * norm.scale):
            raise ConfigError("resume dataset does not match the checkpoint's normalization")
        start_epoch = int(extras["train.epochs_done"])
    else:
        params = init_params(
            config.denoiser_config(), hierarchy,
            np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(2,))),
        )
        opt_state = AdamState.init(params)
        start_epoch = 0

    n = len(data)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    global_step = start_epoch * steps_per_epoch
    epoch_losses: list[float] = []
    step_log: list[tuple[int, float, float]] = []
    t0 = time.monotonic()
    bad_epochs = 0
    first_epoch_loss = None

    log_path = os.path.join(out_dir, "log.ndjson")
    log_fh = open(log_path, "a" if resume_from is not None else "w", encoding="utf-8")
    try:
        for epoch in range(start_epoch, config.epochs):
            perm = epoch_rng(config.seed, epoch).permutation(n)
            losses = []
            for b in range(steps_per_epoch):
                idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
                lr = lr_at(global_step, total_steps, config.base_lr)
                loss = training_step(
                    data[idx], params, plan, opt_state, schedule,
                    step_rng(config.seed, global_step), mask_cfg, topology, config, lr,
                )
                losses.append(loss)
                step_log.append((global_step, loss, lr))
                log_fh.write(json.dumps({
                    "step": global_step, "epoch": epoch, "loss": loss, "lr": lr,
                    "wallclock": round(time.monotonic() - t0, 3),
                }) + "\n")
                global_step += 1
            log_fh.flush()
            mean_loss = float(np.mean(losses))
            epoch_losses.append(mean_loss)
            if first_epoch_loss is None:
                first_epoch_loss = mean_loss
            if not quiet:
                print(f"epoch {epoch + 1}/{config.epochs}  loss {mean_loss:.6f}")
            bad_epochs = bad_epochs + 1 if mean_loss > 10.0 * first_epoch_loss else 0
            if bad_epochs >= 3:
                raise TrainingDiverged(
                    f"epoch loss {mean_loss:.3g} above 10x the first epoch "
                    f"({first_epoch_loss:.3g}) for 3 consecutive epochs"
                )
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(out_dir, f"ckpt_epoch{epoch + 1:04d}.sfd"),
                    params, schedule,
                    extra=_train_extras(params, opt_state, norm, mean_shape, mask_cfg,
                                        epoch + 1, hierarchy),
                )
    finally:
        log_fh.close()

    final_path = os.path.join(out_dir, "final.sfd")
    save_checkpoint(
        final_path, params, schedule,
        extra=_train_extras(params, opt_state, norm, mean_shape, mask_cfg, config.epochs,
                            hierarchy),
    )
    _write_loss_curve(os.path.join(out_dir, "loss_curve.png"), step_log)
    return {
        "params": params,
        "schedule": schedule,
        "norm": norm,
        "epoch_losses": epoch_losses,
        "final_path": final_path,
    }


def _write_loss_curve(path, step_log) -> None:
    if not step_log:
        return
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [s for s, _, _ in step_log]
    losses = [l for _, l, _ in step_log]
    lrs = [lr for _, _, lr in step_log]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.7, label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("masked-noise MSE")
    ax.set_yscale("log")
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, lw=0.7, color="tab:orange", label="lr")
    ax2.set_ylabel("learning rate")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
