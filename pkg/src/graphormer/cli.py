"""Command-line surface: train, eval, ablate, attn, count-params, gen-data.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import storage
from .autodiff import NumericsError
from .config import (
    ConfigError,
    GraphormerConfig,
    PRESETS,
    apply_overrides,
    config_hash,
    load_config_file,
    render_config,
)
from .encoder import ArchitectureError
from .mesh import InputError, generate_dataset, generate_synthetic_template
from .model import GraphormerModel, count_params_from_config, flops_estimate, grb_param_delta
from .train import evaluate, train_loop

USAGE_ERRORS = (ConfigError, InputError, ArchitectureError, storage.FormatError, FileNotFoundError)

TRAIN_STREAM = 0
TEST_STREAM = 1


def _load_config(args) -> GraphormerConfig:
    base = PRESETS[args.preset]()
    if args.config is not None:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        cfg = load_config_file(args.config, base=base)
    else:
        cfg = base
    if getattr(args, "seed", None) is not None:
        cfg = apply_overrides(cfg, {"train.seed": args.seed})
    return cfg.validate()


def _template(cfg: GraphormerConfig):
    d = cfg.data
    return generate_synthetic_template(
        d.limbs, d.segments_per_limb, d.ring_resolution, d.seed, d.coarse_target
    )


def _quantize(samples):
    """Round samples to the f32 interchange precision of the dataset format.

    Training and evaluation then consume exactly the values a saved dataset
    file would reload, so cmd_eval on an exported split reproduces the
    training log bit-for-bit.
    """
    from dataclasses import fields

    out = []
    for s in samples:
        kwargs = {
            f.name: np.asarray(getattr(s, f.name), dtype="<f4").astype(np.float64)
            for f in fields(s)
        }
        out.append(type(s)(**kwargs))
    return out


def _datasets(cfg: GraphormerConfig, template):
    d = cfg.data
    train = generate_dataset(
        template, d.train_samples, d.angle_range, d.seed, d.image_size, stream=TRAIN_STREAM
    )
    test = generate_dataset(
        template, d.test_samples, d.angle_range, d.seed, d.image_size, stream=TEST_STREAM
    )
    return _quantize(train), _quantize(test)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(render_config(cfg))
    template = _template(cfg)
    train_samples, test_samples = _datasets(cfg, template)
    start = time.perf_counter()
    result = train_loop(
        cfg, train_samples, test_samples, out_dir=args.out, template=template, verbose=True
    )
    print(f"training finished in {time.perf_counter() - start:.1f}s")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics log: {os.path.join(args.out, 'metrics.csv')}")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = storage.load_model(args.checkpoint)
    samples, meta = storage.load_dataset(args.dataset)
    cfg = model.config
    if not samples:
        raise ConfigError(f"dataset {args.dataset} is empty")
    for key, got, want in (
        ("joint count", meta["n_joints"], cfg.n_joints),
        ("coarse vertex count", meta["n_coarse"], cfg.n_coarse),
        ("fine vertex count", meta["n_fine"], model.template.n_fine),
    ):
        if got != want:
            raise ConfigError(
                f"dataset/checkpoint mismatch: dataset {key} {got} vs checkpoint {want}"
            )
    result = evaluate(model, samples)
    payload = {
        "mpve": result["mpve"],
        "mpjpe": result["mpjpe"],
        "pa_mpjpe": result["pa_mpjpe"],
        "sample_count": len(samples),
        "config_hash": config_hash(cfg),
    }
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def _parse_ablation_file(path, preset: str):
    """Split a spec file into the base config and the ablation axes."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    axes = {
        "grid_features": ["on"],
        "grb_encoders": [[3]],
        "grb_design": ["after"],
        "grb_kind": ["residual_block"],
        "seeds": [0],
    }
    base_lines = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key = line.partition("=")[0].strip()
            if key.startswith("ablation."):
                name = key[len("ablation.") :]
                if name not in axes:
                    raise ConfigError(f"unknown config key: {key}")
                value = json.loads(line.partition("=")[2].strip())
                if not isinstance(value, list) or not value:
                    raise ConfigError(f"{key}: expected a non-empty list")
                axes[name] = value
            else:
                base_lines.append(raw)
    from .config import parse_config_text

    base = parse_config_text("\n".join(base_lines), base=PRESETS[preset]())
    for gf in axes["grid_features"]:
        if gf not in ("on", "off"):
            raise ConfigError(f"ablation.grid_features values must be on/off, got {gf!r}")
    return base, axes


def _cell_config(base: GraphormerConfig, grid, encoders, design, kind, seed_value):
    # The cell seed is the seeds-axis value itself, so a one-cell spec is
    # exactly cmd_train + cmd_eval with that seed; data stays on base.data.seed.
    model = replace(
        base.model,
        grid_features=(grid == "on"),
        grb_encoders=list(encoders),
        grb_design=design,
        grb_kind=kind,
    )
    train = replace(base.train, seed=int(seed_value))
    return replace(base, model=model, train=train).validate()


def _run_cell(cell):
    """Train and evaluate one ablation cell; returns the result row."""
    cfg, row = cell
    try:
        template = _template(cfg)
        train_samples, test_samples = _datasets(cfg, template)
        result = train_loop(cfg, train_samples, test_samples, template=template)
        final = evaluate(result.model, test_samples)
        row.update(
            pa_mpjpe=final["pa_mpjpe"],
            params=count_params_from_config(cfg)["total"],
            status="ok",
        )
    except Exception as exc:  # cell failures stay in-row; remaining cells run
        row.update(pa_mpjpe=float("nan"), params=0, status=f"error: {exc}")
    return row


def cmd_ablate(args) -> int:
    base, axes = _parse_ablation_file(args.config, args.preset)
    combos = list(
        itertools.product(
            axes["grid_features"],
            [tuple(e) for e in axes["grb_encoders"]],
            axes["grb_design"],
            axes["grb_kind"],
            axes["seeds"],
        )
    )
    print(f"ablation: {len(combos)} cells")
    cells = []
    for grid, encoders, design, kind, seed_value in combos:
        cfg = _cell_config(base, grid, encoders, design, kind, seed_value)
        row = {
            "grid_features": grid,
            "grb_encoders": "+".join(map(str, encoders)) or "none",
            "grb_design": design,
            "grb_kind": kind,
            "seed": seed_value,
        }
        cells.append((cfg, row))
    if args.workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]

    os.makedirs(args.out, exist_ok=True)
    columns = ["grid_features", "grb_encoders", "grb_design", "grb_kind", "seed", "pa_mpjpe", "params", "status"]
    csv_lines = [",".join(columns)]
    for row in rows:  # assembled in spec order regardless of completion order
        csv_lines.append(",".join(str(row[c]) for c in columns))
    csv_text = "\n".join(csv_lines) + "\n"
    with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text)
    widths = [max(len(str(r.get(c, ""))) for r in rows + [dict(zip(columns, columns))]) for c in columns]
    table = [" | ".join(c.ljust(w) for c, w in zip(columns, widths))]
    table.append("-+-".join("-" * w for w in widths))
    for row in rows:
        table.append(" | ".join(str(row[c]).ljust(w) for c, w in zip(columns, widths)))
    table_text = "\n".join(table) + "\n"
    with open(os.path.join(args.out, "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write(table_text)
    print(table_text, end="")
    return 0


def _token_index(name: str, cfg: GraphormerConfig) -> int:
    valid = (
        f"grid0..grid{cfg.n_grid_tokens - 1}, " if cfg.n_grid_tokens else ""
    ) + f"joint0..joint{cfg.n_joints - 1}, vertex0..vertex{cfg.n_coarse - 1}"
    for prefix, base, count in (
        ("grid", 0, cfg.n_grid_tokens),
        ("joint", cfg.n_grid_tokens, cfg.n_joints),
        ("vertex", cfg.n_grid_tokens + cfg.n_joints, cfg.n_coarse),
    ):
        if name.startswith(prefix) and name[len(prefix) :].isdigit():
            idx = int(name[len(prefix) :])
            if idx >= count:
                raise ConfigError(f"token {name!r} out of range; valid tokens: {valid}")
            return base + idx
    raise ConfigError(f"unknown token {name!r}; valid tokens: {valid}")


def cmd_attn(args) -> int:
    model, _, _ = storage.load_model(args.checkpoint)
    cfg = model.config
    _, samples = _datasets(cfg, model.template)
    if not 0 <= args.sample < len(samples):
        raise ConfigError(
            f"sample index {args.sample} out of range (test split has {len(samples)} samples)"
        )
    token_idx = _token_index(args.token, cfg)
    out = model.forward(
        samples[args.sample].silhouette, training=False, sample_key=args.sample, collect_attn=True
    )
    averaged = out.attn.mean(axis=0)
    written = storage.export_attention(
        args.out, out.attn_all, averaged, row_name=args.token, row=averaged[token_idx]
    )
    print(f"wrote {len(written)} attention files to {args.out}")
    return 0


def cmd_count_params(args) -> int:
    cfg = _load_config(args)
    counts = count_params_from_config(cfg)
    baseline_cfg = replace(cfg, model=replace(cfg.model, grb_encoders=[])).validate()
    baseline = count_params_from_config(baseline_cfg)
    flops = flops_estimate(cfg)
    flops_base = flops_estimate(baseline_cfg)
    print(f"{'module':<18}{'parameters':>14}")
    for module in sorted(counts["per_module"]):
        print(f"{module:<18}{counts['per_module'][module]:>14}")
    print(f"{'total':<18}{counts['total']:>14}")
    delta = counts["total"] - baseline["total"]
    print(f"graph-unit parameter delta vs grb-off: {delta} ({delta / 1e6:.4f}M)")
    print(f"closed-form graph-unit delta: {grb_param_delta(cfg)}")
    fdelta = flops["total"] - flops_base["total"]
    pct = 100.0 * fdelta / flops_base["total"] if flops_base["total"] else 0.0
    print(f"forward multiply-adds: {flops['total']} (baseline {flops_base['total']})")
    print(f"graph-unit multiply-add delta: {fdelta} ({pct:.4f}%)")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if getattr(args, "seed", None) is not None:
        cfg = apply_overrides(cfg, {"data.seed": args.seed}).validate()
    template = _template(cfg)
    train_samples, test_samples = _datasets(cfg, template)
    os.makedirs(args.out, exist_ok=True)
    storage.save_dataset(os.path.join(args.out, "train.bin"), train_samples)
    storage.save_dataset(os.path.join(args.out, "test.bin"), test_samples)
    storage.export_template_obj(os.path.join(args.out, "template.obj"), template)
    print(
        f"wrote {len(train_samples)} train / {len(test_samples)} test samples "
        f"(J={template.n_joints}, V_fine={template.n_fine}, V_coarse={template.n_coarse})"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphormer",
        description="Graph-convolution-reinforced transformer for articulated mesh regression",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="config file (key = value lines)")
        p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="train a model and write checkpoint + CSV log")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation matrix from a spec file")
    common(p, config_required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attn", help="export attention maps for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--token", default="joint0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("count-params", help="per-module parameter and FLOP accounting")
    common(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gen-data", help="generate and export a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
