"""Command line front end.

Subcommands cover the whole flow: train a quantized model, sweep the
bit-op penalty, calibrate ranges, compile to the textual shift-add IR,
verify the three evaluation paths against each other, and report hardware
cost.  Exit codes: 0 success, 1 bad input or usage, 2 verification
mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, ExperimentConfig, load_config
from .data import Dataset, load_csv, split, synth_dataset
from .fxp import mantissa_of
from .ir import IRError, emit_ir, parse_ir
from .layers import CalibratedModel, QModel, deploy_forward
from .lowering import FxpValue, adder_count, interpret, interpret_batch, lower
from .resource import bitops_exact, calibrate
from .training import CSV_HEADER, TrainingDiverged, metrics_csv, train

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISMATCH = 2


# ---------------------------------------------------------------------------
# shared plumbing


def dataset_from_config(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.kind == "synthetic":
        X, y = synth_dataset(
            d.n_samples,
            seed=cfg.seed,
            n_features=d.n_features,
            n_classes=d.n_classes,
            separation=d.separation,
        )
    else:
        X, y = load_csv(d.csv_path, d.task)
    return split(X, y, d.val_fraction, cfg.seed, d.task)


def model_spec_from_config(cfg: ExperimentConfig) -> dict:
    m = cfg.model
    return {
        "layer_sizes": list(m.layer_sizes),
        "seed": cfg.seed,
        "weight_granularity": m.weight_granularity,
        "act_granularity": m.act_granularity,
        "weight_f_init": m.weight_f_init,
        "act_f_init": m.act_f_init,
        "act_i_init": m.act_i_init,
        "round_mode": m.round_mode,
        "act_overflow": m.act_overflow,
        "input_format": m.input_format,
        "rounded_sat_bounds": m.rounded_sat_bounds,
    }


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    if getattr(args, "beta_init", None) is not None:
        cfg.train.beta_init = args.beta_init
    if getattr(args, "beta_final", None) is not None:
        cfg.train.beta_final = args.beta_final
    return cfg


def run_training(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Train per config, write the run directory, return a small summary."""
    ds = dataset_from_config(cfg)
    spec = model_spec_from_config(cfg)
    model = QModel.mlp(**spec)
    result = train(model, ds.X_train, ds.y_train, ds.X_val, ds.y_val,
                   cfg.train_settings())

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.to_json())
    (out_dir / "metrics.csv").write_text(metrics_csv(result.rows))
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    ckpt.save_train_checkpoint(ckpt_dir / "final.json", spec, result.final_state)
    manifest = []
    for e in result.pareto.entries:
        name = f"pareto_e{e.epoch:03d}.json"
        ckpt.save_train_checkpoint(ckpt_dir / name, spec, e.state)
        manifest.append(
            {
                "epoch": e.epoch,
                "val_metric": e.metric,
                "bitops_surrogate": e.cost,
                "file": f"checkpoints/{name}",
            }
        )
    (out_dir / "pareto.json").write_text(json.dumps(manifest, indent=2) + "\n")

    last = result.rows[-1]
    return {
        "out_dir": out_dir,
        "dataset": ds,
        "val_metric": last.val_metric,
        "bitops_surrogate": last.bitops,
        "pareto_size": len(manifest),
    }


def _deploy_metric(cm: CalibratedModel, X: np.ndarray, y: np.ndarray,
                   task: str) -> float:
    out = deploy_forward(cm, X)
    if task == "classification":
        return float((out.argmax(axis=1) == y).mean())
    err = out[:, 0] - y
    return -float(np.sqrt((err * err).mean()))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    summary = run_training(cfg, Path(cfg.out_dir))
    print(f"run dir: {summary['out_dir']}")
    print(f"val_metric={summary['val_metric']!r}")
    print(f"bitops_surrogate={summary['bitops_surrogate']!r}")
    print(f"pareto_checkpoints={summary['pareto_size']}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    try:
        betas = [float(b) for b in args.betas.split(",") if b.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --betas list: {e}") from e
    if not betas:
        raise ConfigError("--betas needs at least one value")
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    base = cfg.train
    lines = ["beta_final,val_metric,deploy_metric,bitops_total,run_dir"]
    for k, beta_final in enumerate(betas):
        point = replace(cfg, train=replace(base))
        # scale the whole schedule so it ends at the requested value
        point.train.beta_init = base.beta_init * (beta_final / base.beta_final)
        point.train.beta_final = beta_final
        point.out_dir = str(root / f"point{k}")
        summary = run_training(point, Path(point.out_dir))
        ds = summary["dataset"]
        spec = model_spec_from_config(point)
        _, state = ckpt.load_train_checkpoint(
            Path(point.out_dir) / "checkpoints" / "final.json"
        )
        model = ckpt.rebuild_model(spec, state)
        cm = calibrate(model, ds.X_all)
        ckpt.save_calibrated(Path(point.out_dir) / "calibrated.json", cm)
        report = bitops_exact(cm)
        dep = _deploy_metric(cm, ds.X_val, ds.y_val, cfg.data.task)
        lines.append(
            f"{beta_final!r},{summary['val_metric']!r},{dep!r},"
            f"{report.total},{point.out_dir}"
        )
        print(
            f"point{k}: beta_final={beta_final:g} val={summary['val_metric']:.4f} "
            f"deploy={dep:.4f} bitops={report.total}"
        )
    (root / "sweep_summary.csv").write_text("\n".join(lines) + "\n")
    print(f"summary: {root / 'sweep_summary.csv'}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    spec, state = ckpt.load_train_checkpoint(args.checkpoint)
    model = ckpt.rebuild_model(spec, state)
    ds = dataset_from_config(cfg)
    cm = calibrate(model, ds.X_all)
    ckpt.save_calibrated(args.out, cm)
    report = bitops_exact(cm)
    print(f"calibrated model: {args.out}")
    print(f"bitops_total={report.total}")
    return EXIT_OK


def cmd_compile(args) -> int:
    cm = ckpt.load_calibrated(args.model)
    g = lower(cm)
    Path(args.out).write_text(emit_ir(g))
    print(f"ir: {args.out}")
    print(f"nodes={len(g.nodes)} adders={adder_count(g)} max_bits={g.max_bits()}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cm = ckpt.load_calibrated(args.model)
    g = lower(cm)
    if args.ir is not None:
        text = Path(args.ir).read_text()
    else:
        text = emit_ir(g)
    g2 = parse_ir(text)
    if g2 != g:
        print("ir graph does not match the model's lowering", file=sys.stderr)
        return EXIT_MISMATCH

    n = args.samples
    if n == 0:
        print("ok: 0 samples")
        return EXIT_OK
    rng = np.random.default_rng(args.seed)
    fmt = cm.input_format
    span = fmt.max_value - fmt.min_value
    X = rng.uniform(fmt.min_value - 0.125 * span, fmt.max_value + 0.125 * span,
                    size=(n, cm.layer_sizes[0]))
    M = mantissa_of(X, fmt).astype(np.int64)
    f_out = cm.layers[-1].act_f

    try:
        ref = deploy_forward(cm, X)
        got_graph = np.ldexp(interpret_batch(g, M).astype(np.float64), -f_out)
        got_ir = np.ldexp(interpret_batch(g2, M).astype(np.float64), -f_out)
        bad = (ref != got_graph).any(axis=1) | (ref != got_ir).any(axis=1)
        for row in range(min(4, n)):  # spot-check the per-sample interpreter
            outs = interpret(g, [FxpValue(int(m), fmt) for m in M[row]])
            if [o.value for o in outs] != list(ref[row]):
                bad[row] = True
    except AssertionError as e:
        print(f"interval violation: {e}", file=sys.stderr)
        return EXIT_MISMATCH

    n_bad = int(bad.sum())
    if n_bad:
        print(f"mismatches: {n_bad}/{n} samples", file=sys.stderr)
        return EXIT_MISMATCH
    print(f"ok: {n} samples, all paths agree")
    return EXIT_OK


def cmd_report(args) -> int:
    cm = ckpt.load_calibrated(args.model)
    report = bitops_exact(cm)
    w_groups = w_pruned = a_groups = a_pruned = 0
    for lc in cm.layers:
        gi = lc.weight_group_index.ravel()
        _, first = np.unique(gi, return_index=True)
        gw = lc.weight_width.ravel()[first]
        w_groups += gw.size
        w_pruned += int((gw == 0).sum())
        _, first = np.unique(lc.act_group_index, return_index=True)
        aw = lc.act_width[first]
        a_groups += aw.size
        a_pruned += int((aw == 0).sum())
    if args.format == "kv":
        print(report.to_kv())
        print(f"weight_groups={w_groups}")
        print(f"pruned_weight_groups={w_pruned}")
        print(f"act_groups={a_groups}")
        print(f"pruned_act_groups={a_pruned}")
    else:
        print(report.to_text())
        print(f"  pruned weight groups: {w_pruned}/{w_groups}")
        print(f"  pruned activation groups: {a_pruned}/{a_groups}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bitgrad",
                                description="train and compile quantized MLPs")
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(q):
        q.add_argument("--config", required=True, help="experiment JSON")
        q.add_argument("--seed", type=int, default=None)
        q.add_argument("--out", default=None, help="output directory override")

    q = sub.add_parser("train", help="train one model, write a run directory")
    add_config(q)
    q.add_argument("--beta-init", type=float, default=None)
    q.add_argument("--beta-final", type=float, default=None)
    q.set_defaults(fn=cmd_train)

    q = sub.add_parser("sweep", help="train at several bit-op penalties")
    add_config(q)
    q.add_argument("--betas", required=True,
                   help="comma-separated final penalty values")
    q.set_defaults(fn=cmd_sweep)

    q = sub.add_parser("calibrate", help="freeze a checkpoint to integer formats")
    q.add_argument("--config", required=True, help="experiment JSON")
    q.add_argument("--checkpoint", required=True, help="training checkpoint")
    q.add_argument("--out", required=True, help="calibrated checkpoint output path")
    q.add_argument("--seed", type=int, default=None)
    q.set_defaults(fn=cmd_calibrate)

    q = sub.add_parser("compile", help="lower a calibrated model to textual IR")
    q.add_argument("--model", required=True, help="calibrated checkpoint")
    q.add_argument("--out", required=True, help="IR output path")
    q.set_defaults(fn=cmd_compile)

    q = sub.add_parser("verify", help="check float emulation, graph, and IR agree")
    q.add_argument("--model", required=True, help="calibrated checkpoint")
    q.add_argument("--ir", default=None, help="IR file (default: lower in memory)")
    q.add_argument("--samples", type=int, default=1000)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(fn=cmd_verify)

    q = sub.add_parser("report", help="bit-op cost of a calibrated model")
    q.add_argument("--model", required=True, help="calibrated checkpoint")
    q.add_argument("--format", choices=("text", "kv"), default="text")
    q.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_ERROR
    try:
        return args.fn(args)
    except (ConfigError, ckpt.CheckpointError, IRError, TrainingDiverged,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
