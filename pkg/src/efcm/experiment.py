"""Experiment orchestration behind the ``efcm`` CLI.

Each invocation creates a fresh timestamped run directory (never reused) and
writes ``config.yaml`` (the validated config echo), ``env.json`` (host,
versions, seed, wall times), ``metrics.json`` and ``metrics.csv`` plus
command-specific artifacts. ``metrics.json`` holds no timings, so reruns
with the same config and seed reproduce it byte for byte (``profile``
excepted: FPS is a measurement).
"""

from __future__ import annotations

import copy
import csv
import datetime as _dt
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config
from .costs import count_params
from .data.synth import (
    PatchDataConfig,
    SlideDataConfig,
    generate_patches,
    generate_slides,
    load_patch_dataset,
    load_slide_dataset,
    save_patch_dataset,
)
from .distill import distill_train, load_checkpoint
from .io import save_arrays
from .mil import (
    attention_weights,
    bags_from_dataset,
    export_heatmap,
    extract_features,
    ib_select,
    run_strategy,
    train_head,
    train_scorer,
)
from .models import RandomTeacher
from .profiler import efficiency_report

COMMANDS = ("synth-data", "distill", "finetune", "mil-run", "profile", "report")
METRICS_VERSION = 1


def make_run_dir(out, command: str, seed: int) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{command}-{stamp}-s{seed}"
    path, i = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{i}")
        i += 1
    path.mkdir(parents=True)
    return path


def _env(cfg: RunConfig, command: str) -> dict:
    import PIL
    import scipy

    return {
        "command": command,
        "argv": sys.argv,
        "seed": cfg.seed,
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pillow": PIL.__version__,
    }


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict]) -> None:
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (json.dumps(v, sort_keys=True) if isinstance(v, (dict, list)) else v) for k, v in r.items()})


def run_experiment(command: str, cfg: RunConfig, log=print) -> Path:
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}; expected one of {COMMANDS}")
    run = make_run_dir(cfg.out, command, cfg.seed)
    (run / "config.yaml").write_text(dump_config(cfg))
    env = _env(cfg, command)
    env["started"] = _dt.datetime.now().isoformat(timespec="seconds")
    t0 = time.perf_counter()
    _write_json(run / "env.json", env)
    handler = {
        "synth-data": cmd_synth_data,
        "distill": cmd_distill,
        "finetune": cmd_finetune,
        "mil-run": cmd_mil_run,
        "profile": cmd_profile,
        "report": cmd_report,
    }[command]
    metrics, rows = handler(cfg, run, log)
    metrics = {"version": METRICS_VERSION, "command": command, "seed": cfg.seed, **metrics}
    _write_json(run / "metrics.json", metrics)
    _write_csv(run / "metrics.csv", rows)
    env["finished"] = _dt.datetime.now().isoformat(timespec="seconds")
    env["wall_seconds"] = round(time.perf_counter() - t0, 3)
    _write_json(run / "env.json", env)
    log(f"results in {run}")
    return run


# -- datasets ----------------------------------------------------------------------------------


def _patch_data(section, seed: int, run: Path, log):
    if section.root:
        return load_patch_dataset(section.root), section.root
    ds = generate_patches(PatchDataConfig(**_tupled(section.params)), seed)
    root = run / "data" / "patches"
    save_patch_dataset(ds, root)
    log(f"generated patch dataset in {root}")
    return ds, str(root)


def _slide_data(section, seed: int, run: Path, log):
    if section.root:
        return load_slide_dataset(section.root), section.root
    root = run / "data" / "slides"
    log(f"generating slide dataset in {root}")
    return generate_slides(SlideDataConfig(**_tupled(section.params)), root, seed), str(root)


def _tupled(params: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}


def _rel(path, run: Path) -> str:
    p = Path(path)
    try:
        return str(p.relative_to(run))
    except ValueError:
        return str(p)


# -- commands -----------------------------------------------------------------------------------


def cmd_synth_data(cfg: RunConfig, run: Path, log):
    sec = cfg.dataset
    if sec.root and (Path(sec.root) / "manifest.json").exists():
        raise FileExistsError(f"{sec.root} already holds a dataset; refusing to overwrite it")
    params = _tupled(sec.params)
    if sec.kind == "patch-level":
        ds = generate_patches(PatchDataConfig(**params), cfg.seed)
        root = Path(sec.root) if sec.root else run / "data" / "patches"
        save_patch_dataset(ds, root)
        counts = {s: int(sum(1 for x in ds.splits if x == s)) for s in ("train", "val", "test")}
        labels = {str(c): int((ds.labels == c).sum()) for c in np.unique(ds.labels)}
        rows = [{"split": s, "count": n} for s, n in counts.items()]
        metrics = {"kind": sec.kind, "root": _rel(root, run), "samples": len(ds.ids), "splits": counts, "labels": labels}
    else:
        root = Path(sec.root) if sec.root else run / "data" / "slides"
        ds = generate_slides(SlideDataConfig(**params), root, cfg.seed)
        rows = [
            {"id": r["id"], "label": r["label"], "split": r["split"], "num_patches": r["num_patches"], "num_tumor": r["num_tumor"]}
            for r in ds.slides
        ]
        counts = {s: sum(1 for r in ds.slides if r["split"] == s) for s in ("train", "val", "test")}
        labels = {str(c): sum(1 for r in ds.slides if r["label"] == c) for c in (0, 1)}
        metrics = {
            "kind": sec.kind,
            "root": _rel(root, run),
            "slides": len(ds.slides),
            "splits": counts,
            "labels": labels,
            "patches": int(sum(r["num_patches"] for r in ds.slides)),
            "tumor_patches": int(sum(r["num_tumor"] for r in ds.slides)),
        }
    metrics["channel_means"] = [float(m) for m in ds.channel_means]
    return metrics, rows


def _distill(cfg: RunConfig, run: Path, section, log):
    spec = cfg.model.spec()
    ds, root = _patch_data(section, cfg.seed, run, log)
    dcfg = cfg.distill.config(cfg.seed)
    res = distill_train(spec, ds, dcfg, out_dir=run / "checkpoints", log=log)
    sm = res.smoothed
    metrics = {
        "dataset": _rel(root, run),
        "model_spec": spec.to_dict(),
        "params": count_params(spec),
        "trainable_params": int(sum(p.size for p in res.model.trainable_parameters())),
        "steps": len(res.losses),
        "initial_loss": res.losses[0],
        "final_smoothed_loss": float(sm[-1]),
        "reduction": float(res.reduction()),
        "checkpoints": [_rel(c, run) for c in res.checkpoints],
        "final_checkpoint": _rel(res.checkpoints[-1], run),
    }
    rows = [{"step": i + 1, "loss": l, "smoothed": float(s), "lr": lr} for i, (l, s, lr) in enumerate(zip(res.losses, sm, res.lrs))]
    return res, metrics, rows


def cmd_distill(cfg: RunConfig, run: Path, log):
    _, metrics, rows = _distill(cfg, run, cfg.dataset, log)
    return metrics, rows


def _teacher_for(student_meta: dict, spec):
    dc = student_meta.get("distill_config") or {}
    return RandomTeacher(spec.with_(variant="teacher-frozen-random"), rng=np.random.default_rng(dc.get("teacher_seed", 1234)))


def _finetune(cfg: RunConfig, run: Path, student, meta: dict, ds, strategies, log, tag_dirs: bool):
    spec = student.spec
    mean = ds.channel_means
    bags = bags_from_dataset(ds)
    teacher = _teacher_for(meta, spec)
    extract_features(teacher, bags, mean, spec.input_size, "teacher")
    train = [b for b in bags if b.split == "train"]
    val = [b for b in bags if b.split == "val"]
    test = [b for b in bags if b.split == "test"]
    base = cfg.strategy.config(cfg.seed)
    teacher_head = scorer = None
    if "reuse" in strategies:
        teacher_head, _ = train_head(train, "teacher", base, val, seed=cfg.seed + 1)
    if "etc" in strategies and any(len(b) > base.k for b in train):
        scorer = train_scorer(train, base, val)

    out, rows = {}, []
    for strat in strategies:
        scfg = cfg.strategy.config(cfg.seed, strat)
        log(f"strategy {strat}")
        res = run_strategy(scfg, copy.deepcopy(student), bags, mean, teacher_head=copy.deepcopy(teacher_head), scorer=scorer, log=log)
        sub = run / strat if tag_dirs else run
        ckpt = save_arrays(sub / "checkpoints" / "head", res.head.state_dict(), {"kind": "mil-head", "strategy": strat, "in_dim": res.head.in_dim})
        if strat == "etc":
            save_arrays(sub / "checkpoints" / "student", res.student.state_dict(), {"kind": "student-checkpoint", "model_spec": spec.to_dict(), "distill_config": meta.get("distill_config"), "step": meta.get("step")})
        hits, heat = [], []
        for b in test:
            w = attention_weights(res.head, b)
            if b.label == 1 and b.tumor is not None:
                hits.append(bool(b.tumor[int(np.argmax(w))]))
            if cfg.strategy.heatmaps:
                heat.append(_rel(export_heatmap(b, w, sub / "heatmaps" / b.slide_id), run))
        best_epoch = getattr(res.head, "best_epoch", None)
        rec = {
            "metrics": res.metrics,
            "best_epoch": best_epoch,
            "history": res.history,
            "audit": res.audit,
            "argmax_attention_tumor_rate": float(np.mean(hits)) if hits else None,
            "head_checkpoint": _rel(ckpt, run),
            "heatmaps": heat,
        }
        if strat == "etc" and res.selected:
            pos = [b for b in train if b.label == 1 and b.tumor is not None]
            rec["selected_tumor_fraction"] = float(np.mean([b.tumor[res.selected[b.slide_id]].mean() for b in pos])) if pos else None
        out[strat] = rec
        for split, m in res.metrics.items():
            rows.append({"strategy": strat, **m, "epoch": best_epoch if split == "val" else m.get("epoch"), "checkpoint": _rel(ckpt, run)})
    return out, rows


def cmd_finetune(cfg: RunConfig, run: Path, log):
    if not cfg.student_checkpoint:
        raise ValueError("finetune needs student_checkpoint (a distillation checkpoint)")
    student, meta = load_checkpoint(cfg.student_checkpoint)
    ds, root = _slide_data(cfg.dataset, cfg.seed, run, log)
    out, rows = _finetune(cfg, run, student, meta, ds, [cfg.strategy.strategy], log, tag_dirs=False)
    return {"dataset": _rel(root, run), "student_checkpoint": cfg.student_checkpoint, **out[cfg.strategy.strategy], "strategy": cfg.strategy.strategy}, rows


def cmd_mil_run(cfg: RunConfig, run: Path, log):
    patch_section = cfg.patch_dataset or type(cfg.dataset)(kind="patch-level")
    res, dmetrics, _ = _distill(cfg, run, patch_section, log)
    student, meta = load_checkpoint(run / dmetrics["final_checkpoint"])
    ds, root = _slide_data(cfg.dataset, cfg.seed, run, log)
    strategies = cfg.strategy.strategies or ["reuse", "retrain", "etc"]
    out, rows = _finetune(cfg, run, student, meta, ds, strategies, log, tag_dirs=True)
    return {"dataset": _rel(root, run), "distill": dmetrics, "strategies": out}, rows


def cmd_profile(cfg: RunConfig, run: Path, log):
    specs = {name: m.spec() for name, m in cfg.profile.models.items()}
    rows = efficiency_report(specs, cfg.profile.protocol(), run, cfg.profile.measure, cfg.profile.memory, cfg.seed)
    recs = []
    for r in rows:
        d = {"model": r.model, "params": r.params, "mac": r.mac, "gflops": r.gflops, "fps": r.fps, "input_shape": list(r.input_shape)}
        if cfg.profile.memory:
            d["mem_bytes"] = r.mem_bytes
        recs.append(d)
        log(f"{r.model}: params={r.params} mac={r.mac} gflops={r.gflops:.4f} fps={r.fps}")
    return {"rows": recs, "protocol": cfg.profile.protocol().__dict__, "gflops_convention": "2*mac/1e9"}, recs


def cmd_report(cfg: RunConfig, run: Path, log):
    runs = [Path(p) for p in cfg.runs] or sorted(p for p in Path(cfg.out).glob("*-s*") if (p / "metrics.json").exists() and p != run)
    rows = []
    for p in runs:
        m = json.loads((p / "metrics.json").read_text())
        rows.extend(_summary_rows(p.name, m))
    lines = ["| run | command | item | value |", "|---|---|---|---|"]
    lines += [f"| {r['run']} | {r['command']} | {r['item']} | {r['value']} |" for r in rows]
    (run / "report.md").write_text("\n".join(lines) + "\n")
    return {"runs": [str(p) for p in runs], "rows": rows}, rows


def _summary_rows(name: str, m: dict) -> list[dict]:
    cmd = m.get("command")
    out = []

    def add(item, value):
        out.append({"run": name, "command": cmd, "item": item, "value": value})

    if cmd == "distill":
        add("reduction", m["reduction"])
        add("final_smoothed_loss", m["final_smoothed_loss"])
    elif cmd == "finetune":
        add(f"{m['strategy']}.test_auc", m["metrics"]["test"]["auc"])
        add(f"{m['strategy']}.test_acc", m["metrics"]["test"]["acc"])
    elif cmd == "mil-run":
        add("distill.reduction", m["distill"]["reduction"])
        for s, rec in m["strategies"].items():
            add(f"{s}.test_auc", rec["metrics"]["test"]["auc"])
            add(f"{s}.test_acc", rec["metrics"]["test"]["acc"])
    elif cmd == "profile":
        for r in m["rows"]:
            add(f"{r['model']}.params", r["params"])
            add(f"{r['model']}.gflops", r["gflops"])
            add(f"{r['model']}.fps", r["fps"])
    elif cmd == "synth-data":
        add("kind", m["kind"])
    return out
