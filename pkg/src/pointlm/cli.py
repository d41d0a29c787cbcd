"""``pointlm`` command line: gen, embed, pretrain, tune, check, attn-dump, count, bench."""

from __future__ import annotations

import os

# thread caps must be in place before numpy loads its BLAS
_THREADS = os.environ.get("PF_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import tensor as T  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .config import ConfigError, RunConfig, load_config  # noqa: E402
from .data import Vocab, load_cloud, load_teacher, make_dataset, read_dataset, write_dataset  # noqa: E402
from .embedding import prepare_geometry  # noqa: E402
from .flops import flops_count, param_counts  # noqa: E402
from .geometry import grid_schedule  # noqa: E402
from .hga import HgaPlan  # noqa: E402
from .model import TinyLM, attn_export, install_plan  # noqa: E402
from .rng import Rng  # noqa: E402
from .train import build_items, token_accuracy, train_loop  # noqa: E402

SCHEMA_VERSION = 1
COMMANDS = ("gen", "embed", "pretrain", "tune", "check", "attn-dump", "count", "bench")


class UsageError(Exception):
    pass


# -- shared wiring -----------------------------------------------------------------

def resolve(args) -> RunConfig:
    cfg = load_config(args.config, args.preset, args.seed)
    if cfg.run.dtype not in ("float64", "float32"):
        raise ConfigError("[run] dtype must be float64 or float32")
    T.set_default_dtype(np.float64 if cfg.run.dtype == "float64" else np.float32)
    if args.steps is not None:
        if args.steps < 0:
            raise UsageError("--steps must be >= 0")
        cfg.pretrain = replace(cfg.pretrain, steps=args.steps)
        cfg.tune = replace(cfg.tune, steps=args.steps)
    cfg.pretrain = replace(cfg.pretrain, seed=cfg.run.seed)
    cfg.tune = replace(cfg.tune, seed=cfg.run.seed)
    return cfg


def hga_schedule(cfg: RunConfig, plan: HgaPlan | None = None):
    plan = plan or cfg.hga
    thetas = Rng(cfg.run.seed).split("hga.thetas").normal(plan.l)
    s = cfg.schedule
    return grid_schedule(s.alpha, s.s_min, s.s_max, plan.l, thetas)


def dataset(cfg: RunConfig, data_dir: str | None):
    if data_dir:
        return read_dataset(data_dir)
    d = cfg.data
    return make_dataset(d.n_clouds, cfg.run.seed, d.n_points, tuple(d.families), d.noise)


def teachers_for(cfg: RunConfig, samples) -> dict | None:
    if not cfg.data.teacher_dir:
        return None
    return {s.shape_id: load_teacher(Path(cfg.data.teacher_dir) / f"{s.shape_id}.pftf") for s in samples}


def new_model(cfg: RunConfig) -> TinyLM:
    return TinyLM(cfg.model, cfg.embed, cfg.run.seed)


def load_model(cfg: RunConfig, path, with_plan: bool) -> TinyLM:
    model = new_model(cfg)
    arrays = {k: v for k, v in load_checkpoint(path).items() if not k.startswith(("optim.", "train."))}
    if with_plan or any(k.startswith("hga.") for k in arrays):
        install_plan(model, cfg.hga, hga_schedule(cfg))
    for k in [k for k in model.params if k not in arrays]:
        # SSL heads are absent from tuned checkpoints
        if k.startswith("heads.") or k == "learn_token":
            del model.params[k]
    model.load_state_arrays(arrays)
    return model


def emit(report: dict, out: Path | None, fmt: str) -> None:
    report = {"schema_version": SCHEMA_VERSION, **report}
    text = json.dumps(report, indent=1, sort_keys=True, default=float)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"report_{report['command']}.json").write_text(text + "\n")
    if fmt == "json":
        print(text)
    else:
        for k, v in report.items():
            if not isinstance(v, (dict, list)):
                print(f"{k}: {v}")
        for r in report.get("results", []):
            print(f"[{'PASS' if r['passed'] else 'FAIL'}] {r['id']} {r['summary']} ({r['detail']})")


# -- commands ----------------------------------------------------------------------

def cmd_gen(args, cfg: RunConfig) -> dict:
    out = Path(args.out)
    samples = dataset(cfg, None)
    write_dataset(out, samples, cfg.run.seed, cfg.data.n_points)
    cfg.dump(out / "config.json")
    return {"command": "gen", "count": len(samples), "manifest": str(out / "manifest.json")}


def cmd_embed(args, cfg: RunConfig) -> dict:
    if not args.input:
        raise UsageError("embed needs --input <cloud file>")
    cloud = load_cloud(args.input)
    model = load_model(cfg, args.init, False) if args.init else new_model(cfg)
    with T.no_grad():
        ts = model.embed(prepare_geometry(cloud, cfg.embed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "tokens.pfck", {"tokens": ts.tokens.data, "centers": ts.centers, "patches": ts.patches})
    return {"command": "embed", "input": str(args.input), "n_input_points": cloud.N,
            "tokens_shape": list(ts.tokens.shape), "output": str(out / "tokens.pfck")}


def cmd_pretrain(args, cfg: RunConfig) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    samples = dataset(cfg, args.data)
    model = new_model(cfg)
    if args.init:
        model.load_state_arrays({k: v for k, v in load_checkpoint(args.init).items()
                                 if not k.startswith(("optim.", "train."))})
    items = build_items(samples, model, Vocab(), cfg.pretrain.use_qa, teachers_for(cfg, samples))
    trainer = train_loop("pretrain", model, items, cfg.pretrain, out)
    hist = trainer.history
    return {"command": "pretrain", "steps": len(hist), "first_total": hist[0]["total"] if hist else None,
            "last_total": hist[-1]["total"] if hist else None,
            "all_finite": all(np.isfinite(h["total"]) for h in hist),
            "metrics": str(out / "pretrain_metrics.jsonl"), "checkpoint": str(out / "pretrain_last.pfck")}


def cmd_tune(args, cfg: RunConfig) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.json")
    samples = dataset(cfg, args.data)[:cfg.data.tune_split]
    init = args.init or (out / "pretrain_last.pfck" if (out / "pretrain_last.pfck").exists() else None)
    if init:
        model = load_model(cfg, init, False)
    else:
        model = new_model(cfg)
    if not any(k.startswith("hga.") for k in model.params):
        install_plan(model, cfg.hga, hga_schedule(cfg))
    items = build_items(samples, model, Vocab(), cfg.tune.use_qa)
    trainer = train_loop("tune", model, items, cfg.tune, out)
    acc = token_accuracy(model, items, True)
    hist = trainer.history
    return {"command": "tune", "init": str(init) if init else None, "steps": len(hist), "token_accuracy": acc,
            "last_total": hist[-1]["total"] if hist else None, "hga_tokens": hist[-1]["hga_tokens"] if hist else None,
            "metrics": str(out / "tune_metrics.jsonl"), "checkpoint": str(out / "tune_last.pfck")}


def cmd_check(args, cfg: RunConfig) -> dict:
    from .checks import run_suite
    try:
        results = run_suite(args.suite)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    return {"command": "check", "suite": args.suite, "passed": all(r["passed"] for r in results),
            "n_checks": len(results), "results": results}


def cmd_attn_dump(args, cfg: RunConfig) -> dict:
    model = load_model(cfg, args.init, True) if args.init else new_model(cfg)
    if not args.init:
        install_plan(model, cfg.hga, hga_schedule(cfg))
    samples = dataset(cfg, args.data)
    s = samples[args.index]
    item = build_items([s], model, Vocab())[0]
    ts = model.embed(item.geo)
    exp = attn_export(model, ts.tokens, ts.centers, item.text.ids, args.layer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"shape_id": s.shape_id, "caption": s.record.caption, "layer": exp["layer"],
               "n_points": exp["n_points"], "profile": exp["profile"].tolist(), "coords": exp["coords"].tolist()}
    (out / "attention.json").write_text(json.dumps(payload, indent=1) + "\n")
    return {"command": "attn-dump", "layer": exp["layer"], "n_points": exp["n_points"],
            "profile_sum": float(exp["profile"].sum()), "output": str(out / "attention.json")}


def cmd_count(args, cfg: RunConfig) -> dict:
    pc = param_counts(cfg.embed, cfg.model, cfg.hga)
    n_text = 32
    plain = flops_count(cfg.embed, cfg.model, None, n_text)
    with_hga = flops_count(cfg.embed, cfg.model, cfg.hga, n_text)
    return {"command": "count", "preset": cfg.run.preset, "params": pc,
            "point_embedding_params_millions": pc["point_embedding"] / 1e6,
            "embedding_fraction": pc["point_embedding"] / pc["total"],
            "flops_plain": plain, "flops_hga": with_hga,
            "hga_flops_reduction": 1.0 - with_hga["total"] / plain["total"],
            "assumption": "0.5 point tokens kept per aggregation level"}


def cmd_bench(args, cfg: RunConfig) -> dict:
    from .geometry import fps, knn_indices
    rng = Rng(cfg.run.seed).split("bench")
    pos = rng.uniform((cfg.embed.input_points, 3), -1, 1)
    timings = {}

    def timed(name, fn, reps=5):
        fn()
        t = time.perf_counter()
        for _ in range(reps):
            fn()
        timings[name] = (time.perf_counter() - t) / reps

    timed("fps", lambda: fps(pos, cfg.embed.stage_sizes[0]))
    timed("knn", lambda: knn_indices(pos, pos[:cfg.embed.stage_sizes[0]], cfg.embed.group_k))
    a = rng.normal((256, 256))
    timed("matmul_256", lambda: T.Tensor(a) @ T.Tensor(a))
    model = new_model(cfg)
    from .geometry import PointCloud
    geo = prepare_geometry(PointCloud(pos), cfg.embed)
    ids = np.arange(16) % cfg.model.vocab

    def step():
        ts = model.embed(geo)
        res = model.forward(ts.tokens, ts.centers, ids)
        model.text_loss(res, ids, np.ones(16, dtype=bool)).backward()
        model.zero_grad()

    timed("forward_backward", step, reps=2)
    return {"command": "bench", "threads": os.environ.get("OMP_NUM_THREADS", "default"),
            "seconds": timings}


HANDLERS = {"gen": cmd_gen, "embed": cmd_embed, "pretrain": cmd_pretrain, "tune": cmd_tune, "check": cmd_check,
            "attn-dump": cmd_attn_dump, "count": cmd_count, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointlm", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI or JSON run config")
    p.add_argument("--preset", choices=("desk", "paper"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--steps", type=int)
    p.add_argument("--suite", default="all")
    p.add_argument("--format", choices=("json", "text"), default="text")
    p.add_argument("--data", help="dataset directory written by gen")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--input", help="cloud file for embed (.xyz or .pfpc)")
    p.add_argument("--layer", type=int, default=-1, help="attn-dump layer (default last)")
    p.add_argument("--index", type=int, default=0, help="attn-dump sample index")
    return p


def main(argv=None) -> int:
    if _THREADS is not None and (not _THREADS.isdigit() or int(_THREADS) < 1):
        print("error: PF_THREADS must be a positive integer", file=sys.stderr)
        return 2
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        out = Path(args.out) if args.command not in ("check", "count", "bench") or args.out != "runs/latest" else None
        report = HANDLERS[args.command](args, cfg)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    emit(report, out, args.format)
    if args.command == "check" and not report["passed"]:
        return 1
    if args.command == "pretrain" and not report["all_finite"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
