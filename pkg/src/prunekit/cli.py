"""Command-line front door.

Subcommands mirror the pipeline phases (finetune, prune, distill, compact,
bench, report, ablation). Runs are configured by a flat key=value file with
flag overrides; every command is deterministic given (config, seed). Exit
codes: 0 success, 2 usage, 3 configuration, 4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as B
from . import model as M
from . import pipeline as P
from .compactor import compact, derive_mask, full_mask, load_mask, save_mask, verify_equivalence
from .errors import ConfigError, ContractError, VerificationError
from .model import EncoderConfig, LinearHead
from .task import PowersetSpec

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_VERIFY = 4

ENV_OUT_DIR = "PRUNEKIT_OUT_DIR"

# flat config schema: key -> (type, default)
CONFIG_SCHEMA = {
    "seed": (int, 0),
    "out_dir": (str, "runs"),
    "d_model": (int, 64),
    "n_layers": (int, 6),
    "n_heads": (int, 4),
    "ffn_dim": (int, 256),
    "conv_layers": (str, "32x10x5,32x3x2,32x3x2"),
    "max_speakers": (int, 4),
    "max_overlap": (int, 2),
    "n_train": (int, 256),
    "n_val": (int, 64),
    "samples_per_utterance": (int, 400),
    "batch_size": (int, 16),
    "patience": (int, 5),
    "max_epochs": (int, 0),
    "lr_main": (float, 2e-4),
    "lr_gates": (float, 2e-2),
    "weight_decay": (float, 0.01),
    "clip_norm": (float, 5.0),
    "target_sparsity": (float, 0.5),
    "warmup_epochs": (int, 5),
    "penalty_scale": (float, 1000.0),
    "quadratic_weight": (float, 2e4),
    "polarize_weight": (float, 0.5),
    "prune_mode": (str, "distill"),
    "preft": (bool, True),
    "distill_layers": (str, "0,2,4,6"),
}


def parse_config(path) -> dict:
    """Flat key = value file; unknown keys and bad values are config errors."""
    cfg = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        typ = CONFIG_SCHEMA[key][0]
        try:
            if typ is bool:
                if value.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(value)
                cfg[key] = value.lower() in ("true", "1")
            else:
                cfg[key] = typ(value)
        except ValueError:
            raise ConfigError(
                f"{path}:{lineno}: key {key!r} expects {typ.__name__}, got {value!r}"
            ) from None
    return cfg


def _conv_layers(spec: str):
    out = []
    for part in spec.split(","):
        dims = part.strip().split("x")
        if len(dims) != 3:
            raise ConfigError(f"conv_layers entry {part!r} must be CHANNELSxWIDTHxSTRIDE")
        out.append(tuple(int(d) for d in dims))
    return tuple(out)


def _encoder_config(cfg: dict) -> EncoderConfig:
    return EncoderConfig(
        conv_layers=_conv_layers(cfg["conv_layers"]),
        d_model=cfg["d_model"],
        n_layers=cfg["n_layers"],
        n_heads=cfg["n_heads"],
        ffn_dim=cfg["ffn_dim"],
    )


def _data(cfg: dict) -> P.TaskData:
    return P.make_data(
        cfg["seed"],
        n_train=cfg["n_train"],
        n_val=cfg["n_val"],
        samples_per_utterance=cfg["samples_per_utterance"],
        spec=PowersetSpec(cfg["max_speakers"], cfg["max_overlap"]),
    )


def _out_dir(cfg: dict) -> Path:
    root = os.environ.get(ENV_OUT_DIR, cfg["out_dir"])
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _phase_cfg(cfg: dict, phase: str, **overrides) -> P.PhaseConfig:
    kwargs = {
        "phase": phase,
        "max_epochs": cfg["max_epochs"],
        "patience": cfg["patience"],
        "lr_main": cfg["lr_main"],
        "lr_gates": cfg["lr_gates"],
        "batch_size": cfg["batch_size"],
        "seed": cfg["seed"],
        "weight_decay": cfg["weight_decay"],
        "clip_norm": cfg["clip_norm"],
        "target_sparsity": cfg["target_sparsity"],
        "warmup_epochs": cfg["warmup_epochs"],
        "penalty_scale": cfg["penalty_scale"],
        "quadratic_weight": cfg["quadratic_weight"],
        "polarize_weight": cfg["polarize_weight"],
        "prune_loss_mode": cfg["prune_mode"],
        "preft": cfg["preft"],
    }
    kwargs.update(overrides)
    return P.PhaseConfig(**kwargs)


def _distill_layer_set(cfg: dict):
    return tuple(int(i) for i in cfg["distill_layers"].split(","))


# ---------------------------------------------------------------------------
# subcommands


def cmd_finetune(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _out_dir(cfg)
    data = _data(cfg)
    enc = M.build(_encoder_config(cfg), cfg["seed"])
    head = LinearHead.build(enc.d_model, data.spec.n_classes, cfg["seed"])
    ckpt = P.finetune(enc, head, data, _phase_cfg(cfg, P.FINETUNE),
                      log_path=out / "finetune.jsonl")
    path = out / "teacher.ckpt"
    P.save_checkpoint(ckpt, path)
    print(f"best validation loss {ckpt.meta['val_loss']:.4f} "
          f"frame error {ckpt.meta['val_frame_error']:.4f}")
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.target_sparsity is not None:
        cfg["target_sparsity"] = args.target_sparsity
    if args.mode is not None:
        cfg["prune_mode"] = args.mode
    if args.no_preft:
        cfg["preft"] = False
    if not 0.0 <= cfg["target_sparsity"] < 1.0:
        raise ConfigError(f"target sparsity {cfg['target_sparsity']} outside [0, 1)")
    if cfg["prune_mode"] == P.MODE_DISTILL and args.teacher is None:
        print("error: --teacher is required in distill mode", file=sys.stderr)
        return EXIT_USAGE
    out = _out_dir(cfg)
    data = _data(cfg)

    teacher_ckpt = parent_digest = None
    if args.teacher is not None:
        from .serialize import file_digest

        teacher_ckpt = P.load_checkpoint(args.teacher)
        parent_digest = file_digest(args.teacher)

    if cfg["preft"]:
        if teacher_ckpt is None:
            print("error: preFT pruning needs --teacher (the fine-tuned checkpoint)",
                  file=sys.stderr)
            return EXIT_USAGE
        base = teacher_ckpt.encoder
    else:
        base = P.pretrain_generic(_encoder_config(cfg), data, cfg["seed"])
    student = P.clone_encoder(base)

    head = None
    if cfg["prune_mode"] == P.MODE_TASK:
        head = (P.clone_head(teacher_ckpt.head)
                if (teacher_ckpt is not None and teacher_ckpt.head is not None and cfg["preft"])
                else LinearHead.build(student.d_model, data.spec.n_classes, cfg["seed"]))

    teacher_enc = None
    if cfg["prune_mode"] == P.MODE_DISTILL:
        teacher_enc = teacher_ckpt.encoder if cfg["preft"] else base

    ckpt = P.prune_train(
        student, data, _phase_cfg(cfg, P.PRUNE),
        teacher=teacher_enc, head=head,
        layer_set=_distill_layer_set(cfg),
        parents=[parent_digest] if parent_digest else [],
        log_path=out / "prune.jsonl",
    )
    path = out / f"gated_t{cfg['target_sparsity']:g}.ckpt"
    P.save_checkpoint(ckpt, path)
    print(f"achieved deterministic sparsity {ckpt.meta['achieved_sparsity']:.4f} "
          f"(target {cfg['target_sparsity']:g})")
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _out_dir(cfg)
    data = _data(cfg)
    from .serialize import file_digest

    student_ckpt = P.load_checkpoint(args.student)
    teacher_ckpt = P.load_checkpoint(args.teacher)
    if student_ckpt.distill_cfg is None:
        raise ConfigError("student checkpoint carries no distillation projections")
    student = student_ckpt.encoder
    if student.gate_groups:
        student = compact(student, derive_mask(student))
    ckpt = P.further_distill(
        student, teacher_ckpt.encoder, student_ckpt.distill_cfg, data,
        _phase_cfg(cfg, P.FURTHER_DISTILL),
        parents=(student_ckpt.meta.get("parents", [])
                 + [file_digest(args.student), file_digest(args.teacher)]),
        log_path=out / "further_distill.jsonl",
    )
    path = out / "distilled.ckpt"
    P.save_checkpoint(ckpt, path)
    print(f"best validation distill loss {ckpt.meta['val_loss']:.4f}")
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_compact(args) -> int:
    ckpt = P.load_checkpoint(args.checkpoint)
    if not ckpt.encoder.gate_groups:
        raise ConfigError(f"{args.checkpoint}: checkpoint carries no gate state")
    mask = derive_mask(ckpt.encoder)
    small = compact(ckpt.encoder, mask)
    diff = None
    if args.verify:
        diff = verify_equivalence(ckpt.encoder, small, n_inputs=args.verify_inputs)
        if diff > 1e-6:
            print(f"verification FAILED: max abs diff {diff:.3e} > 1e-6", file=sys.stderr)
            return EXIT_VERIFY
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    total, _, _ = M.count_params(small)
    from .serialize import file_digest

    meta = {
        "phase": "compact",
        "parents": ckpt.meta.get("parents", []) + [file_digest(args.checkpoint)],
        "source_achieved_sparsity": ckpt.meta.get("achieved_sparsity"),
        "params": total,
    }
    P.save_checkpoint(
        P.Checkpoint(encoder=small, head=ckpt.head, distill_cfg=ckpt.distill_cfg, meta=meta),
        out_path)
    mask_path = out_path.with_suffix(".mask")
    save_mask(mask, mask_path)
    print(f"compacted parameters: {total}")
    if diff is not None:
        print(f"equivalence verified: max abs diff {diff:.3e}")
    print(f"checkpoint: {out_path}")
    print(f"mask: {mask_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    ck_a = P.load_checkpoint(args.checkpoint_a)
    ck_b = P.load_checkpoint(args.checkpoint_b)
    enc_a, enc_b = ck_a.encoder, ck_b.encoder
    if args.float32:
        enc_a, enc_b = M.astype(enc_a, np.float32), M.astype(enc_b, np.float32)
    rep_a = B.time_forward(enc_a, batch_size=args.batch, reps=args.reps,
                           input_length=args.length, seed=args.seed)
    rep_b = B.time_forward(enc_b, batch_size=args.batch, reps=args.reps,
                           input_length=args.length, seed=args.seed)
    ratio = B.speedup(rep_a, rep_b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    B.write_json(rep_a, out / f"timing_base_seed{args.seed}.json")
    B.write_json(rep_b, out / f"timing_pruned_seed{args.seed}.json")
    B.write_timing_csv(rep_a, out / f"timing_base_seed{args.seed}.csv")
    B.write_timing_csv(rep_b, out / f"timing_pruned_seed{args.seed}.csv")
    (out / f"speedup_seed{args.seed}.json").write_text(
        json.dumps({"speedup": ratio,
                    "base_seconds": rep_a.total_seconds,
                    "pruned_seconds": rep_b.total_seconds}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    print(f"base total {rep_a.total_seconds:.4f}s "
          f"(conv {rep_a.conv_seconds:.4f}s, transformer {rep_a.transformer_seconds:.4f}s)")
    print(f"pruned total {rep_b.total_seconds:.4f}s")
    print(f"speedup: {ratio:.2f}x")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"{run_dir} is not a directory")
    teacher_path = Path(args.teacher) if args.teacher else run_dir / "teacher.ckpt"
    if not teacher_path.exists():
        raise ConfigError(f"no teacher checkpoint at {teacher_path}")
    teacher_ckpt = P.load_checkpoint(teacher_path)
    cfg = parse_config(args.config) if args.config else {
        k: d for k, (_, d) in CONFIG_SCHEMA.items()
    }
    data = _data(cfg)

    students = []
    for path in sorted(run_dir.glob("gated_t*.ckpt")):
        ck = P.load_checkpoint(path)
        enc = ck.encoder
        if enc.gate_groups:
            enc = compact(enc, derive_mask(enc))
        students.append((path.stem, ck.meta.get("achieved_sparsity", 0.0), enc))

    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    if students:
        sim = B.similarity_report(teacher_ckpt.encoder, students, data.val,
                                  layer_set=_distill_layer_set(cfg))
        B.write_json(sim, out / f"similarity_seed{cfg['seed']}.json")
        B.write_similarity_csv(sim, out / f"similarity_seed{cfg['seed']}.csv")
        print(f"similarity rows: {len(sim.rows)}")
    for path in sorted(run_dir.glob("*.mask")):
        rep = B.structure_report(load_mask(path))
        B.write_json(rep, out / (path.stem + "_structure.json"))
        B.write_structure_csv(rep, out / (path.stem + "_structure.csv"))
        print(f"structure report: {path.stem}")
    return EXIT_OK


def cmd_ablation(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.target_sparsity is not None:
        cfg["target_sparsity"] = args.target_sparsity
    out = _out_dir(cfg)
    data = _data(cfg)
    if args.teacher:
        teacher_ckpt = P.load_checkpoint(args.teacher)
    else:
        enc = M.build(_encoder_config(cfg), cfg["seed"])
        head = LinearHead.build(enc.d_model, data.spec.n_classes, cfg["seed"])
        teacher_ckpt = P.finetune(enc, head, data, _phase_cfg(cfg, P.FINETUNE))
    generic = P.pretrain_generic(_encoder_config(cfg), data, cfg["seed"])
    rows = P.run_ablation(teacher_ckpt, generic, data,
                          target_sparsity=cfg["target_sparsity"], seed=cfg["seed"],
                          out_dir=out)
    width = max(len(r["system"]) for r in rows)
    for r in rows:
        preft = "-" if r["preft"] is None else ("yes" if r["preft"] else "no")
        print(f"{r['system']:<{width}}  preFT={preft:<3}  "
              f"sparsity={r['sparsity']:.3f}  frame_error={r['frame_error']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunekit",
                                     description="structured pruning workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("finetune", help="fine-tune the encoder on the synthetic task")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("prune", help="gated pruning under the sparsity controller")
    p.add_argument("config")
    p.add_argument("--target-sparsity", type=float)
    p.add_argument("--mode", choices=[P.MODE_DISTILL, P.MODE_TASK])
    p.add_argument("--no-preft", action="store_true")
    p.add_argument("--teacher")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("distill", help="further distillation of a pruned student")
    p.add_argument("config")
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("compact", help="physically delete pruned units")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--verify", action="store_true")
    p.add_argument("--verify-inputs", type=int, default=10)
    p.set_defaults(func=cmd_compact)

    p = sub.add_parser("bench", help="time two checkpoints and report speedup")
    p.add_argument("checkpoint_a")
    p.add_argument("checkpoint_b")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--length", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--float32", action="store_true")
    p.add_argument("--out", default="bench")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="similarity and structure reports for a run dir")
    p.add_argument("run_dir")
    p.add_argument("--teacher")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablation", help="pruning-strategy comparison matrix")
    p.add_argument("config")
    p.add_argument("--target-sparsity", type=float)
    p.add_argument("--teacher")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationError as exc:
        print(f"verification error: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
