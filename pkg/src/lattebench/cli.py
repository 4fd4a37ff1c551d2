"""Command-line entry points: world generation, source pretraining, headless
adaptation runs, the live service and log evaluation."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import synth
from .adapt import build_itta_state, run_adaptation
from .config import ConfigError, RunConfig, load_config
from .itta import SimulatedPrompter, init_head, warmup_head
from .models import ModelPair
from .persist import persist_run, read_run_log

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load(config_path) -> RunConfig:
    if config_path is None:
        return RunConfig()
    return load_config(config_path)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Streaming multi-modal test-time adaptation benchmark."""


@main.command("gen-world")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Run configuration (JSON). Defaults apply when omitted.")
@click.option("--out", "out_path", type=click.Path(), required=True)
def gen_world(config_path, out_path):
    """Generate the synthetic world and write its layout as JSONL."""
    try:
        cfg = _load(config_path)
        world = synth.generate_world(cfg.world_config())
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except Exception as exc:
        _fail(EXIT_RUNTIME, str(exc))
    lines = [json.dumps({
        "kind": "world", "seed": cfg.seed, "extent": world.config.extent,
        "classes": list(world.config.class_set.names),
        "interest": list(world.config.class_set.interest),
        "n_instances": len(world.instances),
    }, sort_keys=True)]
    for inst in world.instances:
        lines.append(json.dumps({
            "kind": "instance", "class_id": int(inst.class_id),
            "center": [round(float(v), 6) for v in inst.center],
            "velocity": [round(float(v), 6) for v in inst.velocity],
            "n_surface_points": int(inst.template.shape[0]),
        }, sort_keys=True))
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    click.echo(f"wrote {len(lines)} records to {out_path}")


def _pretrain(cfg: RunConfig) -> dict:
    spec = cfg.stream_spec()
    return synth.pretrain_source(spec, cfg.model_config_obj(),
                                 steps=cfg.model.pretrain_steps,
                                 seed=cfg.seed, frame_pool=cfg.model.pretrain_pool)


@main.command("pretrain")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
def pretrain(config_path, out_path):
    """Pretrain per-modality source models and save their parameters."""
    try:
        cfg = _load(config_path)
        models = _pretrain(cfg)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except Exception as exc:
        _fail(EXIT_RUNTIME, str(exc))
    arrays = {}
    for m, pair in models.items():
        for k, v in pair.student.items():
            arrays[f"{m}/student/{k}"] = v
        for k, v in pair.teacher.items():
            arrays[f"{m}/teacher/{k}"] = v
    np.savez(out_path, **arrays)
    click.echo(f"saved pretrained models to {out_path}")


def load_pretrained(path) -> dict:
    data = np.load(path)
    models = {}
    for m in ("2d", "3d"):
        student = {k.split("/", 2)[2]: data[k] for k in data.files
                   if k.startswith(f"{m}/student/")}
        teacher = {k.split("/", 2)[2]: data[k] for k in data.files
                   if k.startswith(f"{m}/teacher/")}
        models[m] = ModelPair(student=student, teacher=teacher, modality=m)
    return models


def execute_run(cfg: RunConfig, models: dict = None):
    """Headless adaptation over the configured stream; returns the RunLog."""
    spec = cfg.stream_spec()
    world = synth.generate_world(spec.world)
    if models is None:
        models = _pretrain(cfg)
    adapt_cfg = cfg.adapt_config()
    itta_state, prompt_source = None, None
    if adapt_cfg.with_itta:
        head = init_head(spec.world.feature_dim, adapt_cfg.itta.bottleneck_dim,
                         seed=cfg.seed)
        warmup_head(head, spec, world.config.class_set,
                    iterations=cfg.itta.warmup_iterations, seed=cfg.seed,
                    cfg=adapt_cfg.itta)
        itta_state = build_itta_state(models, head, world.config.class_set,
                                      adapt_cfg.itta, seed=cfg.seed)
        prompt_source = SimulatedPrompter(world.config.class_set,
                                          adapt_cfg.itta, seed=cfg.seed)
    return run_adaptation(synth.render_stream(world, spec), models, adapt_cfg,
                          prompt_source=prompt_source, itta_state=itta_state,
                          config_hash=cfg.config_hash(), seed=cfg.seed)


@main.command("run")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--method", "method", default=None,
              help="Override the configured method (e.g. latte_pp+itta).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--paper-literal", is_flag=True, default=False,
              help="Use the literally-printed exp(+entropy) weighting.")
def run(config_path, method, out_dir, paper_literal):
    """Run one-pass adaptation headless and persist the run log."""
    try:
        cfg = _load(config_path)
        overrides = {}
        if method is not None:
            overrides["name"] = method
        if paper_literal:
            overrides["mode"] = "paper_literal"
        if overrides:
            cfg = cfg.model_copy(
                update={"method": cfg.method.model_copy(update=overrides)})
        cfg.adapt_config()  # validates method/mode before any heavy work
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except ValueError as exc:
        _fail(EXIT_CONFIG, str(exc))
    try:
        log = execute_run(cfg)
        summary = persist_run(log, out_dir, cfg.resolved_json())
    except Exception as exc:
        _fail(EXIT_RUNTIME, str(exc))
    click.echo(json.dumps(summary, sort_keys=True))


@main.command("serve")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--port", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
def serve_cmd(config_path, port, out_dir):
    """Serve a live adaptation run for the operator console."""
    from .service import serve

    try:
        cfg = _load(config_path)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    try:
        serve(cfg, port=port, out_dir=out_dir)
    except Exception as exc:
        _fail(EXIT_RUNTIME, str(exc))


@main.command("eval")
@click.option("--runlog", "runlog_path", type=click.Path(), required=True)
def eval_cmd(runlog_path):
    """Print aggregate statistics of a recorded run log."""
    try:
        records = read_run_log(runlog_path)
    except FileNotFoundError:
        _fail(EXIT_CONFIG, f"run log not found: {runlog_path}")
    except (OSError, json.JSONDecodeError) as exc:
        _fail(EXIT_RUNTIME, f"cannot read {runlog_path}: {exc}")

    def col(key):
        vals = [r[key] for r in records if r.get(key) is not None]
        return float(np.mean(vals)) if vals else float("nan")

    click.echo(f"frames: {len(records)}")
    for key in ("miou_xm", "miou_2d", "miou_3d"):
        click.echo(f"mean {key}: {col(key):.6f}")
    click.echo(f"prompts: {int(sum(r.get('n_prompts', 0) for r in records))}")
    if records and records[0].get("iou"):
        k = len(records[0]["iou"])
        parts = []
        for c in range(k):
            vals = [r["iou"][c] for r in records if r["iou"][c] is not None]
            parts.append(f"{np.mean(vals):.4f}" if vals else "n/a")
        click.echo("per-class IoU: " + " ".join(parts))


if __name__ == "__main__":
    main()
