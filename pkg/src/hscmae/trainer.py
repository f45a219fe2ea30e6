"""Training orchestration for the dual-path loop.

Per step: mask plan -> masked student pass (reconstruction targets and
contrastive embeddings) -> clean teacher pass (affinity mining, distillation
targets) -> clean student pass with input gradient gate (canonical
correlation) -> weighted total, backward, clip, AdamW, EMA update. After the
last epoch a linear CCA is fitted on the clean-path training embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cca_linear, diffcore as dc
from .data_io import TrainView, batches
from .losses import CcaConfig, LossBundle, dcca_loss, distill_loss, rec_loss, soft_infonce, total_loss
from .masking import apply_value_mask, make_grad_gate, make_plan
from .model import (LOSS_NAMES, ModelConfig, ModelParams, config_entries, config_from_entries,
                    decode, embed_arrays, encode, forward_embed, fuse, load_entries, project,
                    save_entries)
from .optim import OptimConfig, adamw_step, clip_global_norm, cosine_lr
from .teacher import anneal_momentum, ema_update, identity_affinities, mine_affinities


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 100
    batch_size: int = 400
    mask_ratio: float = 0.2
    k: int = 5
    tau: float = 0.05
    warmup_epochs: int = 5
    use_rec: bool = True
    use_cca: bool = True
    use_infonce: bool = True
    use_dis: bool = True
    identity_affinities: bool = False  # single-positive contrastive baseline
    cca_r: int | None = None           # canonical directions; default proj_dim
    cca_eps: float = 1e-4
    cca_post_dim: int = 10
    seed: int = 0
    eval_every: int = 0

    def cca_config(self):
        r = self.cca_r if self.cca_r is not None else self.model.proj_dim
        return CcaConfig(r=r, eps=self.cca_eps)

    def active_losses(self):
        return {"rec": self.use_rec, "cca": self.use_cca,
                "infonce": self.use_infonce, "dis": self.use_dis}


@dataclass
class EpochLog:
    epoch: int
    losses: dict          # name -> mean raw value over the epoch's steps
    weights: dict         # name -> effective weight at the last step
    total: float
    lr: float
    rho: float
    map_a2v: float | None = None
    map_v2a: float | None = None
    map_avg: float | None = None


@dataclass
class TrainResult:
    params: ModelParams
    teacher: ModelParams
    cca_model: cca_linear.LinearCcaModel
    logs: list


def _step_seed(seed, epoch, batch_index):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(epoch, batch_index))
    return int(ss.generate_state(1)[0])


def train_step(mp, teacher, xa, xv, cfg, epoch, step_seed, lr_t, rho, adam_step):
    """One optimizer step on a mini-batch; mutates student and teacher.

    Returns (LossBundle value dict, effective weights, total value)."""
    n = xa.shape[0]
    if n < 2:
        raise ValueError("train_step: batch size must be >= 2")
    active = cfg.active_losses()
    if not any(active.values()):
        raise ValueError("train_step: all loss terms disabled")

    mp.zero_grads()
    ss = np.random.SeedSequence(step_seed)
    rng_mae, rng_cca = (np.random.default_rng(child) for child in ss.spawn(2))
    plan = make_plan(n, cfg.model.d_audio, cfg.model.d_visual, cfg.mask_ratio, step_seed)

    bundle = LossBundle()
    z_mae = None

    # student masked path
    if active["rec"] or active["infonce"] or active["dis"]:
        xa_masked = dc.const(apply_value_mask(xa, plan, "audio"))
        xv_masked = dc.const(apply_value_mask(xv, plan, "visual"))
        ha, hv = encode(mp, xa_masked, xv_masked, train=True, rng=rng_mae)
        ua, uv = fuse(mp, ha, hv)
        z_mae = project(mp, ua, uv)
        if active["rec"]:
            xa_hat, xv_hat = decode(mp, ua, uv)
            bundle.rec = rec_loss(xa, xv, xa_hat, xv_hat)

    # teacher clean path (eval mode, gradient-free)
    targets = None
    zt_a = zt_v = None
    if active["infonce"] or active["dis"]:
        zt_a, zt_v = embed_arrays(teacher, xa, xv)
        if active["infonce"]:
            if cfg.identity_affinities:
                targets = identity_affinities(n, tau=cfg.tau)
            else:
                targets = mine_affinities(zt_a, zt_v, k=cfg.k, tau=cfg.tau)
            bundle.infonce = soft_infonce(z_mae[0], z_mae[1], targets, cfg.tau)
        if active["dis"]:
            bundle.dis = distill_loss(z_mae[0], z_mae[1], zt_a, zt_v)

    # student clean path with input gradient gate
    if active["cca"]:
        gate_a, gate_v = make_grad_gate(plan)
        xa_gated = dc.gradient_gate(dc.const(xa), gate_a)
        xv_gated = dc.gradient_gate(dc.const(xv), gate_v)
        z_cca_a, z_cca_v, _, _ = forward_embed(mp, xa_gated, xv_gated, train=True, rng=rng_cca)
        bundle.cca = dcca_loss(z_cca_a, z_cca_v, cfg.cca_config())

    total, weights = total_loss(bundle, {name: mp.sigma(name) for name in LOSS_NAMES},
                                epoch, cfg.warmup_epochs)
    total_value = float(total.value[0, 0])
    if not np.isfinite(total_value):
        raise dc.NumericError(f"train_step: non-finite total loss; components {bundle.values()}")

    dc.backward(total)
    clip_global_norm(mp.parameters(), cfg.optim.clip_norm)
    adamw_step(mp.parameters(), cfg.optim, adam_step, lr_t)
    ema_update(teacher, mp, rho)
    return bundle.values(), weights, total_value


def train(view, cfg, eval_set=None, step_hook=None):
    """Full training loop.

    ``view`` is the label-stripped TrainView; ``eval_set`` is an optional
    labeled FeatureSet scored every ``cfg.eval_every`` epochs on the raw
    retrieval-space embeddings (the post-hoc CCA is fitted only once, after
    the final epoch). ``step_hook(mp, teacher, rho)`` runs after every step.
    """
    if not isinstance(view, TrainView):
        view = TrainView(audio=np.asarray(view[0]), visual=np.asarray(view[1]))
    n = view.audio.shape[0]
    if n == 0:
        raise ValueError("train: empty training split")

    mp = ModelParams(cfg.model, seed=cfg.seed)
    teacher = mp.copy()
    logs = []
    adam_step = 0

    for epoch in range(1, cfg.epochs + 1):
        lr_t = cosine_lr(epoch, cfg.optim)
        rho = anneal_momentum(epoch, cfg.epochs)
        sums = {name: 0.0 for name in LOSS_NAMES}
        total_sum = 0.0
        weights = {}
        epoch_batches = batches(n, cfg.batch_size, seed=_step_seed(cfg.seed, epoch, 0xBA7C4))
        if not epoch_batches:
            raise ValueError(f"train: batch size {cfg.batch_size} exceeds split size {n}")
        for bi, idx in enumerate(epoch_batches):
            adam_step += 1
            values, weights, total_value = train_step(
                mp, teacher, view.audio[idx], view.visual[idx], cfg, epoch,
                _step_seed(cfg.seed, epoch, bi), lr_t, rho, adam_step)
            for name in LOSS_NAMES:
                sums[name] += values[name]
            total_sum += total_value
            if step_hook is not None:
                step_hook(mp, teacher, rho)
        nb = len(epoch_batches)
        log = EpochLog(epoch=epoch,
                       losses={name: sums[name] / nb for name in LOSS_NAMES},
                       weights=weights, total=total_sum / nb, lr=lr_t, rho=rho)
        if eval_set is not None and cfg.eval_every and epoch % cfg.eval_every == 0:
            from .evaluate import cross_modal_map, retrieval_embeddings
            za, zv = retrieval_embeddings(mp, None, eval_set.audio, eval_set.visual)
            report = cross_modal_map(za, zv, eval_set.labels)
            log.map_a2v, log.map_v2a, log.map_avg = report.map_a2v, report.map_v2a, report.map_avg
        logs.append(log)

    za, zv = embed_arrays(mp, view.audio, view.visual)
    p = min(cfg.cca_post_dim, cfg.model.proj_dim)
    cca_model = cca_linear.fit(za, zv, p=p, eps=cfg.cca_eps)
    return TrainResult(params=mp, teacher=teacher, cca_model=cca_model, logs=logs)


# ---------------------------------------------------------------------------
# checkpoint assembly
# ---------------------------------------------------------------------------

def save_checkpoint(path, result):
    entries = {}
    entries.update(config_entries(result.params.config))
    entries.update(result.params.state_entries())
    entries.update({f"teacher/{k}": v for k, v in result.teacher.state_entries().items()})
    entries.update(cca_linear.checkpoint_entries(result.cca_model))
    save_entries(path, entries)


def load_checkpoint(path):
    entries = load_entries(path)
    config = config_from_entries(entries)
    mp = ModelParams(config, init=False)
    mp.load_state_entries(entries)
    teacher = ModelParams(config, init=False)
    teacher.load_state_entries(entries, prefix="teacher/")
    cca_model = cca_linear.from_checkpoint_entries(entries)
    return mp, teacher, cca_model


def epoch_log_rows(logs):
    """CSV rows (with schema header) for the per-epoch loss decomposition."""
    header = ("epoch,l_rec,l_cca,l_infonce,l_dis,"
              "w_rec,w_cca,w_infonce,w_dis,total,lr,rho,map_a2v,map_v2a,map_avg")
    rows = [header]
    for log in logs:
        cells = [str(log.epoch)]
        cells += [repr(log.losses[name]) for name in LOSS_NAMES]
        cells += [repr(float(log.weights.get(name, 0.0))) for name in LOSS_NAMES]
        cells += [repr(log.total), repr(log.lr), repr(log.rho)]
        for v in (log.map_a2v, log.map_v2a, log.map_avg):
            cells.append("" if v is None else repr(v))
        rows.append(",".join(cells))
    return rows
