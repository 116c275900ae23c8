"""Training phases and orchestration.

Three-phase recipe: (1) fine-tune the encoder plus a linear frame classifier
on the synthetic task, (2) prune it under the sparsity controller with a
distillation or task loss while gates are sampled stochastically, then
(3) optionally distill the compacted student further toward its teacher and
always fine-tune it again. AdamW drives everything; gate parameters and
Lagrange multipliers sit in their own high-learning-rate groups, with the
multipliers ascending.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import controller as C
from . import gates as G
from . import model as M
from .autodiff import Tensor, backward, no_grad
from .compactor import compact, derive_mask, deterministic_z
from .distill import DEFAULT_LAYER_SET, DistillConfig, distill_loss
from .errors import ConfigError, ContractError
from .model import Encoder, LinearHead, forward
from .optim import AdamW
from .rng import substream
from .serialize import load_container, save_container
from .task import PowersetSpec, SyntheticSample, frame_error_rate, generate_dataset, task_loss

FINETUNE = "finetune"
PRUNE = "prune"
FURTHER_DISTILL = "further_distill"

PHASE_DEFAULT_EPOCHS = {FINETUNE: 20, PRUNE: 30, FURTHER_DISTILL: 20}

MODE_DISTILL = "distill"
MODE_TASK = "task"


@dataclass
class PhaseConfig:
    phase: str
    prune_loss_mode: str = MODE_DISTILL
    preft: bool = True
    max_epochs: int = 0  # 0 selects the phase default
    patience: int = 5
    lr_main: float = 2e-4
    lr_gates: float = 2e-2
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    target_sparsity: float = 0.5
    warmup_epochs: int = 5
    # multiplies the penalty force on the gate parameters; the multipliers
    # themselves ascend on the raw residual. Compresses the |lambda| range the
    # saddle point needs, so the constraint binds within a desk-scale step
    # budget instead of the tens of thousands of steps a full-size run has.
    penalty_scale: float = 1000.0
    # fixed quadratic residual weight (classic augmented-Lagrangian mu term):
    # tracks the warmup ramp immediately and damps multiplier windup, while
    # the learned multipliers remove the steady-state error
    quadratic_weight: float = 2e4
    # after warmup, pushes each keep probability toward 0 or 1, weighted by
    # the unit's share of prunable parameters (sum of (ppu/total) * q(1-q)).
    # Without it, gates can satisfy the expected-sparsity constraint while
    # parked near the deterministic prune threshold, where expectation and
    # mask-based counts disagree badly.
    polarize_weight: float = 200.0
    # temperature of the keep-probability surrogate the controller tracks;
    # centered on the deterministic prune threshold so the constraint lands
    # the mask-based sparsity, not just the sampling-time expectation
    surrogate_temperature: float = 0.75

    def __post_init__(self):
        if self.phase not in PHASE_DEFAULT_EPOCHS:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.max_epochs == 0:
            self.max_epochs = PHASE_DEFAULT_EPOCHS[self.phase]
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.lr_main <= 0 or self.lr_gates <= 0:
            raise ConfigError("learning rates must be positive")
        if self.prune_loss_mode not in (MODE_DISTILL, MODE_TASK):
            raise ConfigError(f"unknown prune loss mode {self.prune_loss_mode!r}")


@dataclass
class TaskData:
    train: list
    val: list
    spec: PowersetSpec


def make_data(seed: int, n_train: int = 256, n_val: int = 64,
              samples_per_utterance: int = 400,
              spec: PowersetSpec = PowersetSpec()) -> TaskData:
    if n_train < 1:
        raise ConfigError("need a non-empty training set")
    all_samples = generate_dataset(seed, n_train + n_val, samples_per_utterance, spec)
    return TaskData(all_samples[:n_train], all_samples[n_train:], spec)


@dataclass
class Checkpoint:
    encoder: Encoder
    head: LinearHead | None = None
    distill_cfg: DistillConfig | None = None
    controller_state: dict | None = None
    optim_tensors: dict = field(default_factory=dict)
    optim_step: int = 0
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = {name: p.data for name, p in M.named_parameters(ckpt.encoder).items()}
    for g in ckpt.encoder.gate_groups:
        tensors[g.name] = g.log_alpha.data
    if ckpt.head is not None:
        tensors.update({k: v.data for k, v in ckpt.head.named_parameters().items()})
    if ckpt.distill_cfg is not None:
        tensors.update({k: v.data for k, v in ckpt.distill_cfg.named_parameters().items()})
    tensors.update(ckpt.optim_tensors)
    metadata = {
        "arch": M.arch_metadata(ckpt.encoder),
        "meta": ckpt.meta,
        "controller": ckpt.controller_state,
        "optim_step": ckpt.optim_step,
        "has_head": ckpt.head is not None,
        "has_gates": bool(ckpt.encoder.gate_groups),
        "distill_layers": list(ckpt.distill_cfg.layer_set) if ckpt.distill_cfg else None,
    }
    save_container(path, metadata, tensors)


def load_checkpoint(path) -> Checkpoint:
    metadata, tensors = load_container(path)
    enc = M.from_tensors(metadata["arch"], tensors)
    if metadata["has_gates"]:
        M.attach_gates(enc, tensors)
    head = None
    if metadata["has_head"]:
        head = LinearHead(Tensor(tensors["head/weight"].copy(), requires_grad=True),
                          Tensor(tensors["head/bias"].copy(), requires_grad=True))
    dcfg = None
    if metadata["distill_layers"] is not None:
        layer_set = tuple(metadata["distill_layers"])
        dcfg = DistillConfig(layer_set, {
            i: Tensor(tensors[f"distill/W_{i}"].copy(), requires_grad=True) for i in layer_set
        })
    optim_tensors = {k: v for k, v in tensors.items() if k.startswith("optim/")}
    return Checkpoint(
        encoder=enc,
        head=head,
        distill_cfg=dcfg,
        controller_state=metadata["controller"],
        optim_tensors=optim_tensors,
        optim_step=metadata["optim_step"],
        meta=metadata["meta"],
    )


def clone_encoder(enc: Encoder, fresh_gates: bool = True) -> Encoder:
    data = {name: p.data for name, p in M.named_parameters(enc).items()}
    new = M.from_tensors(M.arch_metadata(enc), data)
    if fresh_gates:
        new.gate_groups = M._make_gate_groups(new)
    elif enc.gate_groups:
        M.attach_gates(new, {g.name: g.log_alpha.data for g in enc.gate_groups})
    return new


def clone_head(head: LinearHead) -> LinearHead:
    return LinearHead(Tensor(head.weight.data.copy(), requires_grad=True),
                      Tensor(head.bias.data.copy(), requires_grad=True))


# ---------------------------------------------------------------------------
# shared loop machinery


class _EarlyStopper:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, val: float, epoch: int) -> bool:
        if val < self.best:
            self.best = val
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    def should_stop(self) -> bool:
        return self.stale >= self.patience


def _batches(order, size):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def _snapshot(named: dict) -> dict:
    return {k: v.data.copy() for k, v in named.items()}


def _restore(named: dict, snap: dict) -> None:
    for k, v in named.items():
        v.data = snap[k].copy()


class _JsonlLog:
    def __init__(self, path):
        self.fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, record: dict):
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


def evaluate_task(enc: Encoder, head: LinearHead, samples, gate_vecs=None):
    """(mean cross-entropy, frame error rate) over a sample list."""
    losses, errs = [], []
    with no_grad():
        for s in samples:
            _, ws = forward(enc, s.signal, gate_vecs)
            logits = head(ws)
            losses.append(float(task_loss(logits, s.labels).data))
            errs.append(frame_error_rate(logits, s.labels))
    return float(np.mean(losses)), float(np.mean(errs))


def cache_hiddens(enc: Encoder, samples, layer_set) -> list:
    """Frozen per-utterance teacher hidden states for the matched layers."""
    cached = []
    with no_grad():
        for s in samples:
            hiddens, _ = forward(enc, s.signal)
            cached.append({i: hiddens[i].data.copy() for i in layer_set})
    return cached


def _det_gate_vecs(enc: Encoder, gate_cfg: G.GateConfig):
    return {(g.kind, g.layer_index): Tensor(deterministic_z(g.log_alpha.data, gate_cfg))
            for g in enc.gate_groups}


def teacher_checksum(enc: Encoder) -> float:
    return float(sum(np.abs(p.data).sum() for p in M.named_parameters(enc).values()))


# ---------------------------------------------------------------------------
# phase 1 / 3: task fine-tuning


def finetune(enc: Encoder, head: LinearHead, data: TaskData, cfg: PhaseConfig,
             parents=(), log_path=None) -> Checkpoint:
    """Train encoder + head + layer weights on the frame task; return the
    best-validation checkpoint under patience-based early stopping."""
    if cfg.phase != FINETUNE:
        raise ConfigError("finetune requires a finetune-phase config")
    if not data.train:
        raise ConfigError("empty training set")

    params = dict(M.named_parameters(enc))
    params.update(head.named_parameters())
    opt = AdamW([{"params": params, "lr": cfg.lr_main, "weight_decay": cfg.weight_decay}])
    shuffle = substream(cfg.seed, "shuffle/finetune")
    log = _JsonlLog(log_path)
    stopper = _EarlyStopper(cfg.patience)
    best_state = _snapshot(params)
    history = []
    step = 0

    for epoch in range(cfg.max_epochs):
        order = shuffle.permutation(len(data.train))
        for batch in _batches(order, cfg.batch_size):
            opt.zero_grad()
            scale = 1.0 / len(batch)
            batch_loss = 0.0
            for idx in batch:
                s = data.train[idx]
                _, ws = forward(enc, s.signal)
                loss = task_loss(head(ws), s.labels)
                batch_loss += float(loss.data) * scale
                backward(loss * scale)
            opt.step()
            log.write({"step": step, "epoch": epoch, "loss": batch_loss})
            step += 1
        val_loss, val_err = evaluate_task(enc, head, data.val)
        history.append({"epoch": epoch, "val_loss": val_loss, "val_frame_error": val_err})
        if stopper.update(val_loss, epoch):
            best_state = _snapshot(params)
        if stopper.should_stop():
            break
    log.close()
    _restore(params, best_state)

    val_loss, val_err = evaluate_task(enc, head, data.val)
    meta = {
        "phase": FINETUNE,
        "seed": cfg.seed,
        "best_epoch": stopper.best_epoch,
        "val_history": history,
        "val_loss": val_loss,
        "val_frame_error": val_err,
        "parents": list(parents),
    }
    return Checkpoint(encoder=enc, head=head,
                      optim_tensors=opt.state_tensors(), optim_step=opt.step_count, meta=meta)


# ---------------------------------------------------------------------------
# phase 2: gated pruning


def prune_train(student: Encoder, data: TaskData, cfg: PhaseConfig,
                teacher: Encoder | None = None, head: LinearHead | None = None,
                gate_cfg: G.GateConfig = G.GateConfig(),
                layer_set=DEFAULT_LAYER_SET, parents=(), log_path=None) -> Checkpoint:
    """Min-max training of the student under the sparsity constraint.

    Gates are sampled once per optimizer step; validation runs with
    deterministic gates. Best-checkpoint tracking starts once target warmup
    has finished, since earlier epochs are graded against a moving
    constraint and a pre-warmup "best" would be a nearly ungated model.
    """
    if cfg.phase != PRUNE:
        raise ConfigError("prune_train requires a prune-phase config")
    mode = cfg.prune_loss_mode
    if mode == MODE_DISTILL and teacher is None:
        raise ContractError("distill mode requires a teacher")
    if mode == MODE_TASK and head is None:
        raise ContractError("task mode requires a classification head")
    if not student.gate_groups:
        raise ContractError("student encoder carries no gates")

    total, prunable, _ = M.count_params(student)
    steps_per_epoch = max(1, math.ceil(len(data.train) / cfg.batch_size))
    ctrl = C.SparsityController(
        target_sparsity=cfg.target_sparsity,
        warmup_steps=cfg.warmup_epochs * steps_per_epoch,
        total_prunable=prunable,
        fixed_params=total - prunable,
    )

    dcfg = None
    teacher_train = teacher_val = None
    if mode == MODE_DISTILL:
        dcfg = DistillConfig.build(student.d_model, student.n_layers, layer_set)
        teacher_train = cache_hiddens(teacher, data.train, dcfg.layer_set)
        teacher_val = cache_hiddens(teacher, data.val, dcfg.layer_set)

    main_params = dict(M.named_parameters(student))
    if dcfg is not None:
        main_params.update(dcfg.named_parameters())
    if mode == MODE_TASK:
        main_params.update(head.named_parameters())
    gate_params = {g.name: g.log_alpha for g in student.gate_groups}
    lam_params = {"controller/lambda1": ctrl.lambda1, "controller/lambda2": ctrl.lambda2}
    opt = AdamW([
        {"params": main_params, "lr": cfg.lr_main, "weight_decay": cfg.weight_decay},
        {"params": gate_params, "lr": cfg.lr_gates, "weight_decay": 0.0},
        {"params": lam_params, "lr": cfg.lr_gates, "weight_decay": 0.0, "maximize": True},
    ])

    tracked = dict(main_params)
    tracked.update(gate_params)
    tracked.update(lam_params)

    noise = substream(cfg.seed, "gates")
    shuffle = substream(cfg.seed, "shuffle/prune")
    log = _JsonlLog(log_path)
    stopper = _EarlyStopper(cfg.patience)
    best_state = None
    history = []
    step = 0

    def main_loss_for(idx, gate_vecs, train=True):
        s = (data.train if train else data.val)[idx]
        hiddens, ws = forward(student, s.signal, gate_vecs)
        if mode == MODE_DISTILL:
            cache = (teacher_train if train else teacher_val)[idx]
            return distill_loss(cache, hiddens, dcfg)
        return task_loss(head(ws), s.labels)

    for epoch in range(cfg.max_epochs):
        order = shuffle.permutation(len(data.train))
        for batch in _batches(order, cfg.batch_size):
            opt.zero_grad()
            samples = {
                (g.kind, g.layer_index): G.sample_gates(
                    g, gate_cfg, np.clip(noise.random(g.num_units), 1e-12, 1.0 - 1e-12)
                ).z
                for g in student.gate_groups
            }
            scale = 1.0 / len(batch)
            batch_loss = 0.0
            for idx in batch:
                loss = main_loss_for(idx, samples)
                batch_loss += float(loss.data) * scale
                backward(loss * scale)
            s_soft = C.expected_sparsity(ctrl, M.expected_param_count(
                student, gate_cfg, surrogate_temperature=cfg.surrogate_temperature))
            _, _, rem_true = M.count_params(student, derive_mask(student, gate_cfg))
            s_true = 1.0 - rem_true / total
            # straight-through residual: the constraint is measured on the
            # exact mask-based sparsity while gradients flow through the
            # soft keep-probability surrogate
            s_hat = s_soft + (s_true - float(s_soft.data))
            target = C.current_target(ctrl, step)
            residual = s_hat - target
            # gate force: scaled penalty with frozen multipliers plus the
            # fixed quadratic; multiplier ascent sees the raw residual only
            frozen = C.SparsityController(
                ctrl.target_sparsity, ctrl.warmup_steps, ctrl.total_prunable,
                ctrl.fixed_params, lambda1=ctrl.lambda1.detach(),
                lambda2=ctrl.lambda2.detach())
            pen = C.penalty(frozen, s_hat, target)
            backward(pen * cfg.penalty_scale + residual * residual * cfg.quadratic_weight)
            backward(C.penalty(ctrl, float(s_hat.data), target))
            if cfg.polarize_weight > 0.0 and epoch >= cfg.warmup_epochs:
                reg = None
                for g in student.gate_groups:
                    q = G.keep_probability(g.log_alpha, gate_cfg, cfg.surrogate_temperature)
                    term = ad.tsum(q * (1.0 - q)) * (g.params_per_unit / total)
                    reg = term if reg is None else reg + term
                backward(reg * cfg.polarize_weight)
            opt.clip_grad_norm(cfg.clip_norm)
            opt.step()
            log.write({
                "step": step, "epoch": epoch, "loss": batch_loss,
                "penalty": float(pen.data), "expected_sparsity": float(s_soft.data),
                "mask_sparsity": s_true,
                "lambda1": float(ctrl.lambda1.data), "lambda2": float(ctrl.lambda2.data),
            })
            step += 1

        det = _det_gate_vecs(student, gate_cfg)
        with no_grad():
            val_main = float(np.mean([
                float(main_loss_for(i, det, train=False).data) for i in range(len(data.val))
            ]))
            s_val = float(C.expected_sparsity(ctrl, M.expected_param_count(
                student, gate_cfg, surrogate_temperature=cfg.surrogate_temperature)).data)
        _, _, rem_now = M.count_params(student, derive_mask(student, gate_cfg))
        ach_now = 1.0 - rem_now / total
        # lambda-free total: main loss plus the fixed quadratic against the
        # final target, so epochs missing the constraint never look "best"
        val_total = val_main + cfg.quadratic_weight * (ach_now - ctrl.target_sparsity) ** 2
        history.append({
            "epoch": epoch, "val_loss": val_total, "val_main": val_main,
            "expected_sparsity": s_val, "achieved_sparsity": ach_now,
        })
        if epoch >= cfg.warmup_epochs:
            if stopper.update(val_total, epoch):
                best_state = _snapshot(tracked)
            if stopper.should_stop():
                break
    log.close()
    if best_state is not None:
        _restore(tracked, best_state)

    mask = derive_mask(student, gate_cfg)
    _, _, remaining = M.count_params(student, mask)
    achieved = 1.0 - remaining / total
    meta = {
        "phase": PRUNE,
        "mode": mode,
        "preft": cfg.preft,
        "seed": cfg.seed,
        "target_sparsity": cfg.target_sparsity,
        "achieved_sparsity": achieved,
        "best_epoch": stopper.best_epoch,
        "val_history": history,
        "parents": list(parents),
    }
    return Checkpoint(encoder=student, head=head, distill_cfg=dcfg,
                      controller_state=C.state_dict(ctrl),
                      optim_tensors=opt.state_tensors(), optim_step=opt.step_count, meta=meta)


# ---------------------------------------------------------------------------
# phase 2b: further distillation of the compacted student


def further_distill(student: Encoder, teacher: Encoder, dcfg: DistillConfig,
                    data: TaskData, cfg: PhaseConfig, parents=(), log_path=None) -> Checkpoint:
    """Distill the (compacted or deterministically gated) student toward the
    teacher with sparsity frozen: no gates, no L0 term."""
    if cfg.phase != FURTHER_DISTILL:
        raise ConfigError("further_distill requires a further_distill-phase config")
    if student.n_layers != teacher.n_layers:
        raise ContractError("teacher/student layer counts diverge")

    teacher_train = cache_hiddens(teacher, data.train, dcfg.layer_set)
    teacher_val = cache_hiddens(teacher, data.val, dcfg.layer_set)

    params = dict(M.named_parameters(student))
    params.update(dcfg.named_parameters())
    opt = AdamW([{"params": params, "lr": cfg.lr_main, "weight_decay": cfg.weight_decay}])
    shuffle = substream(cfg.seed, "shuffle/further_distill")
    log = _JsonlLog(log_path)
    stopper = _EarlyStopper(cfg.patience)
    best_state = _snapshot(params)
    history = []
    step = 0

    def val_loss_now():
        with no_grad():
            vals = []
            for i, s in enumerate(data.val):
                hiddens, _ = forward(student, s.signal)
                vals.append(float(distill_loss(teacher_val[i], hiddens, dcfg).data))
        return float(np.mean(vals))

    for epoch in range(cfg.max_epochs):
        order = shuffle.permutation(len(data.train))
        for batch in _batches(order, cfg.batch_size):
            opt.zero_grad()
            scale = 1.0 / len(batch)
            batch_loss = 0.0
            for idx in batch:
                s = data.train[idx]
                hiddens, _ = forward(student, s.signal)
                loss = distill_loss(teacher_train[idx], hiddens, dcfg)
                batch_loss += float(loss.data) * scale
                backward(loss * scale)
            opt.step()
            log.write({"step": step, "epoch": epoch, "loss": batch_loss})
            step += 1
        vl = val_loss_now()
        history.append({"epoch": epoch, "val_loss": vl})
        if stopper.update(vl, epoch):
            best_state = _snapshot(params)
        if stopper.should_stop():
            break
    log.close()
    _restore(params, best_state)

    meta = {
        "phase": FURTHER_DISTILL,
        "seed": cfg.seed,
        "best_epoch": stopper.best_epoch,
        "val_history": history,
        "val_loss": stopper.best,
        "parents": list(parents),
    }
    return Checkpoint(encoder=student, distill_cfg=dcfg,
                      optim_tensors=opt.state_tensors(), optim_step=opt.step_count, meta=meta)


# ---------------------------------------------------------------------------
# generic (not task-fine-tuned) starting point for the no-preFT arms


def pretrain_generic(config: M.EncoderConfig, data: TaskData, seed: int,
                     epochs: int = 2, batch_size: int = 16, lr: float = 2e-4) -> Encoder:
    """Brief signal-reconstruction training standing in for a generic
    pretrained encoder: predicts per-frame mean and spread of the raw input."""
    enc = M.build(config, seed)
    stride = M.total_stride(config.conv_layers)
    head = LinearHead.build(config.d_model, 2, seed, name="recon")
    targets = []
    for s in data.train:
        sig = s.signal.data[0]
        t = len(s.labels)
        win = sig[: t * stride].reshape(t, stride)
        targets.append(np.stack([win.mean(axis=1), win.std(axis=1)], axis=1))

    params = dict(M.named_parameters(enc))
    params.update(head.named_parameters(prefix="recon"))
    opt = AdamW([{"params": params, "lr": lr}])
    shuffle = substream(seed, "shuffle/pretrain")
    for _ in range(epochs):
        order = shuffle.permutation(len(data.train))
        for batch in _batches(order, batch_size):
            opt.zero_grad()
            scale = 1.0 / len(batch)
            for idx in batch:
                _, ws = forward(enc, data.train[idx].signal)
                diff = head(ws) - Tensor(targets[idx])
                loss = ad.tsum(diff * diff) * (1.0 / diff.size)
                backward(loss * scale)
            opt.step()
    return enc


# ---------------------------------------------------------------------------
# ablation matrix


ABLATION_ROWS = (
    (MODE_TASK, False, False),
    (MODE_TASK, True, False),
    (MODE_DISTILL, False, False),
    (MODE_DISTILL, True, False),
    (MODE_DISTILL, True, True),  # + further distill
)


def run_ablation(teacher_ckpt: Checkpoint, generic_enc: Encoder, data: TaskData,
                 target_sparsity: float = 0.5, seed: int = 0,
                 prune_epochs: int = 0, finetune_epochs: int = 0,
                 distill_epochs: int = 0, out_dir=None) -> list[dict]:
    """Pruning-strategy comparison at one target sparsity.

    Five method rows: {task, distill} pruning x {no preFT, preFT} plus the
    further-distilled variant; every pruned model is compacted and
    fine-tuned before evaluation. Row 0 is the unpruned reference.
    """
    teacher = teacher_ckpt.encoder
    _, unpruned_err = evaluate_task(teacher, teacher_ckpt.head, data.val)
    rows = [{
        "system": "unpruned", "preft": None, "sparsity": 0.0,
        "frame_error": unpruned_err, "seed": seed,
    }]

    def phase_cfg(phase, mode=MODE_DISTILL, preft=True, max_epochs=0):
        return PhaseConfig(phase=phase, prune_loss_mode=mode, preft=preft,
                           max_epochs=max_epochs, seed=seed,
                           target_sparsity=target_sparsity)

    fd_pool = {}
    for mode, preft, extra_distill in ABLATION_ROWS:
        key = (mode, preft)
        if key not in fd_pool:
            base = teacher if preft else generic_enc
            student = clone_encoder(base)
            head = clone_head(teacher_ckpt.head) if (mode == MODE_TASK and preft) else (
                LinearHead.build(student.d_model, data.spec.n_classes, seed)
                if mode == MODE_TASK else None
            )
            prune_teacher = (teacher if preft else generic_enc) if mode == MODE_DISTILL else None
            ckpt = prune_train(student, data,
                               phase_cfg(PRUNE, mode, preft, prune_epochs),
                               teacher=prune_teacher, head=head)
            fd_pool[key] = ckpt
        pruned = fd_pool[key]

        small = compact(pruned.encoder, derive_mask(pruned.encoder))
        dcfg = pruned.distill_cfg
        if extra_distill:
            fd_teacher = teacher if preft else generic_enc
            fd = further_distill(small, fd_teacher, dcfg, data,
                                 phase_cfg(FURTHER_DISTILL, max_epochs=distill_epochs))
            small = fd.encoder

        ft_head = clone_head(pruned.head) if pruned.head is not None else (
            clone_head(teacher_ckpt.head) if preft
            else LinearHead.build(small.d_model, data.spec.n_classes, seed)
        )
        final = finetune(small, ft_head, data, phase_cfg(FINETUNE, max_epochs=finetune_epochs))
        label = "diar + pruning" if mode == MODE_TASK else "distill + pruning"
        if extra_distill:
            label += " + further distill"
        rows.append({
            "system": label, "preft": preft,
            "sparsity": pruned.meta["achieved_sparsity"],
            "frame_error": final.meta["val_frame_error"], "seed": seed,
        })

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation_t{target_sparsity:g}_seed{seed}.json").write_text(
            json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        header = "system,preft,sparsity,frame_error,seed"
        lines = [header] + [
            f"{r['system']},{r['preft']},{r['sparsity']:.4f},{r['frame_error']:.4f},{r['seed']}"
            for r in rows
        ]
        (out / f"ablation_t{target_sparsity:g}_seed{seed}.csv").write_text(
            "\n".join(lines) + "\n", encoding="utf-8")
    return rows
