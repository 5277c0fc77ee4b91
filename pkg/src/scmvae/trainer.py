"""Deterministic training loop (Adam, exponential LR decay) and evaluation."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import metrics as M
from .losses import DegenerateBatchError, LossBreakdown, LossConfig, total_loss
from .mesh import TriMesh, load_mesh, mesh_volume
from .model import CLS_SLOT, REG_SLOT, MeshVAE, ModelConfig, load_checkpoint, save_checkpoint
from .torusgen import DatasetManifest


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3.6e-4
    batch_size: int = 16
    epochs: int = 300
    lr_decay_per_epoch: float = 0.77
    lr_floor: float = 1e-8
    seed: int = 0
    split_ratios: tuple = (0.8, 0.1, 0.1)
    checkpoint_every: int = 0  # 0: only final + best
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def to_dict(self):
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig(**d["loss"])
        if "model" in d:
            m = d["model"]
            d["model"] = m if isinstance(m, ModelConfig) else ModelConfig.from_dict(m)
        if "split_ratios" in d:
            d["split_ratios"] = tuple(d["split_ratios"])
        return cls(**d)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    COLUMNS = ["epoch", "lr",
               "train_total", "train_reconstruction", "train_kl",
               "train_contrastive_cls", "train_contrastive_reg",
               "val_total", "val_reconstruction", "val_kl",
               "val_contrastive_cls", "val_contrastive_reg", "wall_time_s"]

    def add(self, epoch, lr, train: LossBreakdown, val: LossBreakdown, wall: float):
        self.epochs.append({"epoch": epoch, "lr": lr,
                            **{f"train_{k}": v for k, v in train.as_dict().items()},
                            **{f"val_{k}": v for k, v in val.as_dict().items()},
                            "wall_time_s": wall})

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for row in self.epochs:
                w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v)
                            for k, v in row.items()})


def load_split_arrays(manifest: DatasetManifest, split: str):
    """Stack a split's meshes and labels into arrays (X, y_cls, y_reg)."""
    entries = manifest.split_entries(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    meshes = [load_mesh(manifest.mesh_path(e)) for e in entries]
    x = np.stack([m.vertices for m in meshes])
    y_cls = np.array([e.y_cls for e in entries])
    y_reg = np.array([e.y_reg for e in entries], dtype=np.float64)
    return x, y_cls, y_reg


def normalize_labels(y, lo, hi):
    if hi == lo:
        return np.zeros_like(y)
    return (y - lo) / (hi - lo)


class Adam:
    """Standard Adam (beta1=0.9, beta2=0.999, eps=1e-8) over a ParamStore."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


def _epoch_losses(model, x, y_cls, y_reg, cfg: TrainConfig, noise_key) -> LossBreakdown:
    """Loss breakdown over one full set, without gradient updates."""
    sums = np.zeros(5)
    count = 0
    b = cfg.batch_size
    for s in range(0, len(x), b):
        xb = x[s:s + b]
        if len(xb) < 2:
            continue
        code = model.encode(xb, noise_seed=noise_key + [s])
        x_hat = model.decode(code.z)
        try:
            lt, bd = total_loss(xb, x_hat, code, y_cls[s:s + b], y_reg[s:s + b], cfg.loss)
        except DegenerateBatchError:
            x_hat.release_graph()
            continue
        lt.release_graph()
        w = len(xb)
        sums += w * np.array([bd.total, bd.reconstruction, bd.kl,
                              bd.contrastive_cls, bd.contrastive_reg])
        count += w
    if count == 0:
        raise ValueError("no usable batch in split")
    return LossBreakdown(*(float(v) for v in sums / count))


def train(manifest: DatasetManifest, config: TrainConfig, out_dir,
          hierarchy=None, template: TriMesh | None = None):
    """Train on the manifest's train split; returns (model, TrainLog).

    Writes ``checkpoint_final.json``, ``checkpoint_best.json`` (lowest
    validation total loss) and ``trainlog.csv`` into ``out_dir``. Fully
    reproducible given the config seed.
    """
    from .hierarchy import build_hierarchy

    os.makedirs(out_dir, exist_ok=True)
    if hierarchy is None:
        if template is None:
            template = load_mesh(os.path.join(manifest.root, "template.obj"))
        hierarchy = build_hierarchy(template, config.model.downsample_factors)
    with open(os.path.join(out_dir, "hierarchy.json"), "w") as fh:
        fh.write(hierarchy.to_json())

    x_tr, yc_tr, yr_tr = load_split_arrays(manifest, "train")
    x_va, yc_va, yr_va = load_split_arrays(manifest, "val")
    lo, hi = float(yr_tr.min()), float(yr_tr.max())
    yr_tr_n = normalize_labels(yr_tr, lo, hi)
    yr_va_n = normalize_labels(yr_va, lo, hi)

    model = MeshVAE(config.model, hierarchy, seed=config.seed)
    v_mean = x_tr.mean(axis=0)
    v_std = float((x_tr - v_mean).std())
    if v_std > 0:
        model.set_vertex_stats(v_mean, v_std)
    opt = Adam(model.params)
    log = TrainLog()
    best_val = np.inf
    best_state = model.params.state()
    best_epoch = -1
    t0 = time.perf_counter()

    for epoch in range(config.epochs):
        lr = max(config.learning_rate * config.lr_decay_per_epoch ** epoch, config.lr_floor)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(x_tr))
        sums = np.zeros(5)
        count = 0
        for bi, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s:s + config.batch_size]
            if len(idx) < 2:
                continue
            xb = x_tr[idx]
            model.params.zero_grad()
            code = model.encode(xb, noise_seed=[config.seed, epoch, bi])
            x_hat = model.decode(code.z)
            try:
                loss, bd = total_loss(xb, x_hat, code, yc_tr[idx], yr_tr_n[idx], config.loss)
            except DegenerateBatchError:
                # all anchors partnerless: fall back to the plain VAE terms
                vae_cfg = LossConfig(**{**asdict(config.loss),
                                        "enable_cls": False, "enable_reg": False})
                loss, bd = total_loss(xb, x_hat, code, yc_tr[idx], yr_tr_n[idx], vae_cfg)
            if not np.isfinite(loss.data):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch {bi}: {bd.as_dict()}")
            loss.backward()
            opt.step(lr)
            sums += len(idx) * np.array([bd.total, bd.reconstruction, bd.kl,
                                         bd.contrastive_cls, bd.contrastive_reg])
            count += len(idx)
        train_bd = LossBreakdown(*(float(v) for v in sums / count))
        val_bd = _epoch_losses(model, x_va, yc_va, yr_va_n, config,
                               noise_key=[config.seed, epoch, 1 << 20])
        log.add(epoch, lr, train_bd, val_bd, time.perf_counter() - t0)
        if val_bd.total < best_val:
            best_val = val_bd.total
            best_state = model.params.state()
            best_epoch = epoch
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            _finalize(model, x_tr, config)
            save_checkpoint(model, os.path.join(out_dir, f"checkpoint_{epoch:04d}.json"))

    final_state = model.params.state()
    _finalize(model, x_tr, config)
    final_stats = model.latent_stats
    save_checkpoint(model, os.path.join(out_dir, "checkpoint_final.json"),
                    extra={"label_min": lo, "label_max": hi})
    model.params.load_state(best_state)
    _finalize(model, x_tr, config)
    save_checkpoint(model, os.path.join(out_dir, "checkpoint_best.json"),
                    extra={"epoch": best_epoch, "val_total": best_val,
                           "label_min": lo, "label_max": hi})
    model.params.load_state(final_state)
    model.latent_stats = final_stats
    log.to_csv(os.path.join(out_dir, "trainlog.csv"))
    return model, log


def _finalize(model: MeshVAE, x_tr, config: TrainConfig):
    mu = encode_mu(model, x_tr, config.batch_size)
    model.latent_stats = (mu.mean(axis=0), mu.std(axis=0))
    model.trained = True


def encode_mu(model: MeshVAE, x, batch_size: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(x), batch_size):
        code = model.encode(x[s:s + batch_size], eps=0.0)
        out.append(code.mu.data)
        code.z.release_graph()
    return np.concatenate(out)


def evaluate(model_or_path, manifest: DatasetManifest, split: str = "test",
             hierarchy=None, knn_k: int = 5, nna_cap: int = 200,
             seed: int = 0) -> M.EvalReport:
    """Encode a split and compute the full metric suite."""
    if isinstance(model_or_path, (str, os.PathLike)):
        model = load_checkpoint(model_or_path, hierarchy)
    else:
        model = model_or_path

    x_tr, yc_tr, yr_tr = load_split_arrays(manifest, "train")
    x_ev, yc_ev, yr_ev = load_split_arrays(manifest, split)
    lo, hi = float(yr_tr.min()), float(yr_tr.max())
    yr_tr_n = normalize_labels(yr_tr, lo, hi)
    yr_ev_n = normalize_labels(yr_ev, lo, hi)

    mu_tr = encode_mu(model, x_tr)
    mu_ev = encode_mu(model, x_ev)

    _, per_factor, sap_mean = M.sap(mu_ev, np.stack([yc_ev, yr_ev_n], axis=1))
    corr_reg = M.pcc(mu_ev[:, REG_SLOT], yr_ev)
    corr_cls = M.pbc(yc_ev, mu_ev[:, CLS_SLOT])
    acc = M.knn_predict(mu_tr[:, CLS_SLOT], yc_tr, mu_ev[:, CLS_SLOT], yc_ev,
                        k=knn_k, mode="classify")
    mse = M.knn_predict(mu_tr[:, REG_SLOT], yr_tr_n, mu_ev[:, REG_SLOT], yr_ev_n,
                        k=knn_k, mode="regress")
    x_hat = []
    for s in range(0, len(x_ev), 64):
        out = model.decode(mu_ev[s:s + 64])
        x_hat.append(out.data)
        out.release_graph()
    x_hat = np.concatenate(x_hat)
    rec = M.recon_error(x_ev, x_hat)

    n = min(nna_cap, len(x_ev))
    z_gen = model.sample_latents(n, fit_mu=mu_tr, seed=seed)
    gen_t = model.decode(z_gen)
    gen = gen_t.data
    gen_t.release_graph()
    ref = x_ev[:n]
    nna_cd = M.one_nna(list(gen), list(ref), distance="cd", seed=seed)
    nna_emd = M.one_nna(list(gen), list(ref), distance="emd", seed=seed)

    t_stat, p_value = volume_difference_ttest(model, n_points=10)

    return M.EvalReport(sap_cls=float(per_factor[0]), sap_reg=float(per_factor[1]),
                        sap_mean=sap_mean, pcc=corr_reg, pbc=corr_cls,
                        knn_acc=acc, knn_mse=mse, recon_err=rec,
                        nna_cd=nna_cd, nna_emd=nna_emd,
                        t_stat=t_stat, p_value=p_value)


def volume_difference_ttest(model: MeshVAE, n_points: int = 10):
    """t-test on decoded volume differences between the z1 extremes.

    Decodes meshes along a z2 grid with z1 fixed at -3 sigma and +3 sigma
    and tests whether the paired volume differences have zero mean.
    """
    if model.latent_stats is None:
        raise ValueError("model has no latent statistics")
    mean, std = model.latent_stats
    dz = model.config.latent_dim
    z2_vals = np.linspace(-3 * std[REG_SLOT], 3 * std[REG_SLOT], n_points)
    diffs = []
    for z2 in z2_vals:
        z = np.zeros((2, dz))
        z[:, REG_SLOT] = z2
        z[0, CLS_SLOT] = -3 * std[CLS_SLOT]
        z[1, CLS_SLOT] = 3 * std[CLS_SLOT]
        out = model.decode(z)
        verts = out.data
        out.release_graph()
        faces = model.template.faces
        v0 = mesh_volume(TriMesh(verts[0], faces))
        v1 = mesh_volume(TriMesh(verts[1], faces))
        diffs.append(v1 - v0)
    return M.one_sample_ttest(diffs, 0.0)
