"""Command-line entry point: ``hearbc <subcommand>``.

Every stage writes into a name-addressed directory under the output root
(``$HEARBC_OUT``, else ``out_root`` from the config)::

    data/<task>/                 demonstrations (+ data/scoop-extra/ pool)
    pretrain/avid/               avid_style audio + visual encoders
    pretrain/byol-<task>/        byol_style audio encoder
    train/<method>-<task>[-s<seed>]/
    eval/<train run name>/
    report/
    ablate/<kind>/
    tsne/<train run name>/

A stage directory holds ``config.json`` (the stage's inputs) and
``run_config.json`` (the full resolved config) once the stage has finished. Rerunning
with the same inputs is a no-op; different inputs are refused unless
``--force`` is given.

Exit codes: 0 success, 2 usage error, 3 missing prerequisite, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import config as C
from . import datastore as ds
from . import simworld as sw
from .bctrain import METHODS, MissingPrerequisiteError, TrainConfig
from .dsp import InvalidInputError

log = logging.getLogger("hearbc.cli")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
MARKER = ".hearbc"
POOL_NAME = "scoop-extra"
POOL_SEED_OFFSET = 1_000_003
AUDIO_METHODS = {"ours": "avid", "mlp_ablation": "avid", "frozen_audio": "avid", "byol": "byol"}

# Small budgets for the end-to-end smoke run; any key can be overridden with --config.
DEMO_CONFIG = {
    "scale": "tiny",
    "tasks": ["zip"],
    "methods": ["ours", "vision_only"],
    "seeds": [0],
    "data": {"episodes": {"zip": 30}},
    "pretrain": {"avid_pairs": 1000, "avid_epochs": 8, "avid_batch_size": 64},
    "train": {"max_epochs": 40, "patience": 10},
    "eval": {"n_episodes": 10},
    "tsne": {"n_episodes": 2, "max_iter": 1000},
}


class UsageError(ValueError):
    pass


# -- helpers -------------------------------------------------------------------

class Context:
    def __init__(self, cfg: C.RunConfig, root: Path, force: bool = False, jobs: int = 1):
        self.cfg = cfg
        self.root = root
        self.force = force
        self.jobs = jobs

    def data_dir(self, task: str) -> Path:
        return self.root / "data" / task

    def pool_dir(self) -> Path:
        return self.root / "data" / POOL_NAME

    def pretrain_dir(self, method: str, task: str | None = None) -> Path:
        return self.root / "pretrain" / ("avid" if method == "avid" else f"byol-{task}")

    def run_name(self, method: str, task: str, seed: int) -> str:
        return f"{method}-{task}" + (f"-s{seed}" if seed else "")

    def train_dir(self, method: str, task: str, seed: int) -> Path:
        return self.root / "train" / self.run_name(method, task, seed)


def resolve_root(cfg: C.RunConfig) -> Path:
    return Path(os.environ.get("HEARBC_OUT") or cfg.out_root)


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _require(path: Path, what: str) -> Path:
    if not Path(path, "config.json").is_file():
        raise MissingPrerequisiteError(f"missing {what}: {path} (run the producing stage first)")
    return path


def begin_stage(out: Path, echo: dict, force: bool) -> bool:
    """Prepare ``out`` for a stage run. Returns False when it already holds this exact result."""
    echo = json.loads(json.dumps(echo, default=str))
    stamp = out / "config.json"
    if out.exists() and any(out.iterdir()):
        if stamp.is_file() and json.loads(stamp.read_text()) == echo and not force:
            log.info("%s is up to date", out)
            print(f"up to date: {out}")
            return False
        if not force:
            raise UsageError(f"{out} already holds a different or incomplete run; pass --force to overwrite")
        if not (out / MARKER).exists():
            raise UsageError(f"refusing to delete {out}: not a hearbc output directory")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / MARKER).write_text(__version__ + "\n")
    return True


def finish_stage(out: Path, echo: dict, cfg: C.RunConfig | None = None) -> None:
    if cfg is not None:
        C.dump_config(cfg, out / "run_config.json")
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True, default=str))
    print(f"wrote {out}")


def train_config(cfg: C.RunConfig, method: str, seed: int, audio_ckpt: str | None = None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(batch_size=t.batch_size, max_epochs=t.max_epochs, patience=t.patience, lr=t.lr,
                       aug_prob=t.aug_prob, horizon=t.horizon, val_fraction=t.val_fraction,
                       scale=cfg.scale, seed=seed, method=method, audio_ckpt=audio_ckpt)


def audio_checkpoint(ctx: Context, method: str, task: str) -> str | None:
    kind = AUDIO_METHODS.get(method)
    if kind is None:
        return None
    d = _require(ctx.pretrain_dir(kind, task), f"{kind} pretraining for {method}")
    return str(d / "audio")


# -- stages --------------------------------------------------------------------

def stage_gen_data(ctx: Context, task: str, episodes: int | None, seed: int | None,
                   out: Path | None = None, pool: bool = False) -> Path:
    cfg = ctx.cfg
    if task not in sw.TASKS:
        raise UsageError(f"unknown task {task!r}")
    n = episodes if episodes is not None else (cfg.data.extra_pool if pool else cfg.data.episodes.get(task))
    if n is None or n < 1:
        raise UsageError(f"--episodes must be >= 1 (got {n})")
    seed = cfg.data.seed if seed is None else seed
    if pool:
        seed += POOL_SEED_OFFSET
    out = Path(out) if out is not None else (ctx.pool_dir() if pool else ctx.data_dir(task))
    size = C.render_size(cfg.scale)
    echo = {"stage": "gen-data", "task": task, "episodes": n, "seed": seed, "image_size": list(size),
            "noise_sigma": cfg.data.noise_sigma}
    if begin_stage(out, echo, ctx.force):
        eps = sw.collect_demonstrations(task, n, seed=seed, image_size=size, noise_sigma=cfg.data.noise_sigma,
                                        progress=lambda i, k: log.info("%s demo %d/%d", task, i, k))
        ds.save_dataset(eps, out)
        manifest = {k: v for k, v in ds.dataset_manifest(out).items() if k.startswith("episode_")}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        finish_stage(out, echo, ctx.cfg)
    return out


def stage_pretrain(ctx: Context, method: str, task: str | None = None) -> Path:
    from .pretrain import PretrainConfig, run_pretraining

    cfg = ctx.cfg
    p = cfg.pretrain
    if method == "avid":
        pcfg = PretrainConfig.for_method("avid_style", scale=cfg.scale, seed=p.seed, epochs=p.avid_epochs,
                                         batch_size=p.avid_batch_size, lr=p.avid_lr, n_pairs=p.avid_pairs)
        out = ctx.pretrain_dir("avid")
        episodes = None
    elif method == "byol":
        if task is None:
            raise UsageError("byol pretraining needs --task (its spectrograms come from that task's demos)")
        data = _require(ctx.data_dir(task), f"{task} demonstrations")
        pcfg = PretrainConfig.for_method("byol_style", scale=cfg.scale, seed=p.seed, epochs=p.byol_epochs,
                                         batch_size=p.byol_batch_size, lr=p.byol_lr)
        out = ctx.pretrain_dir("byol", task)
        episodes = data
    else:
        raise UsageError(f"unknown pretraining method {method!r}")
    echo = {"stage": "pretrain", "method": method, "task": task, "pretrain": asdict(pcfg),
            "data": _stamp(episodes) if episodes else None}
    if begin_stage(out, echo, ctx.force):
        eps = ds.load_dataset(episodes) if episodes else None
        _, plog, _ = run_pretraining(pcfg.method, pcfg, out, episodes=eps)
        log.info("pretraining %s finished in %.1fs", method, plog.wall_time)
        finish_stage(out, echo, ctx.cfg)
    return out


def _stamp(path: Path) -> dict:
    """The producing stage's echo, so downstream stages rerun when their inputs change."""
    return json.loads((Path(path) / "config.json").read_text())


def stage_train(ctx: Context, method: str, task: str, seed: int | None = None) -> Path:
    from .bctrain import train

    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {METHODS}")
    seed = ctx.cfg.seeds[0] if seed is None else seed
    data = _require(ctx.data_dir(task), f"{task} demonstrations")
    audio = audio_checkpoint(ctx, method, task)
    tcfg = train_config(ctx.cfg, method, seed, audio)
    out = ctx.train_dir(method, task, seed)
    echo = {"stage": "train", "method": method, "task": task, "seed": seed, "train": asdict(tcfg),
            "data": _stamp(data), "audio_pretrain": _stamp(Path(audio).parent) if audio else None}
    if begin_stage(out, echo, ctx.force):
        _, tlog = train(method, ds.load_dataset(data), tcfg, out_dir=out)
        log.info("trained %s on %s: best epoch %d, stopped %d", method, task, tlog.best_epoch, tlog.stopped_epoch)
        finish_stage(out, echo, ctx.cfg)
    return out


def _run_info(ckpt: Path) -> tuple[Path, Path, dict]:
    """(run dir, checkpoint dir, train echo) for a train run dir or its checkpoint/ subdir."""
    ckpt = Path(ckpt)
    run = ckpt if (ckpt / "checkpoint").is_dir() else ckpt.parent
    ck = run / "checkpoint" if (run / "checkpoint").is_dir() else ckpt
    if not (ck / "manifest.json").is_file():
        raise MissingPrerequisiteError(f"missing policy checkpoint: {ck}")
    echo = _stamp(run) if (run / "config.json").is_file() else {}
    return run, ck, echo


def _eval_cell(args: tuple):
    from .evalsuite import evaluate

    ck, task, config_id, n, seed, method, ts, h = args
    import torch
    torch.set_num_threads(1)
    return evaluate(str(ck), task, config_id, n, seed, method=method, train_seed=ts, h=h)


def stage_eval(ctx: Context, ckpt: Path, task: str | None = None, configs=None,
               n_episodes: int | None = None, seed: int | None = None, name: str | None = None) -> Path:
    from .evalsuite import EvalReport, emit_report

    run, ck, tr = _run_info(ckpt)
    task = task or tr.get("task")
    if task not in sw.TASKS:
        raise UsageError(f"cannot tell which task {ck} was trained on; pass --task")
    method = tr.get("method") or (tr.get("train") or {}).get("method") or "policy"
    ts = int(tr.get("seed", 0))
    e = ctx.cfg.eval
    configs = list(configs or e.configs)
    n = n_episodes if n_episodes is not None else e.n_episodes
    if n < 1:
        raise UsageError("--episodes must be >= 1")
    seed = e.seed if seed is None else seed
    out = ctx.root / "eval" / (name or run.name)
    echo = {"stage": "eval", "checkpoint": str(ck), "train": tr, "task": task, "method": method,
            "configs": configs, "n_episodes": n, "seed": seed, "h": e.h}
    if begin_stage(out, echo, ctx.force):
        jobs = [(ck, task, c, n, seed, method, ts, e.h) for c in configs]
        report = EvalReport()
        if ctx.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(ctx.jobs, len(jobs))) as pool:
                parts = list(pool.map(_eval_cell, jobs))
        else:
            parts = [_eval_cell(j) for j in jobs]
        for p in parts:
            report.extend(p)
        emit_report(report, out, {k: v for k, v in echo.items() if k != "train"}, [seed, ts],
                    {f"{method}/{task}/{ts}": ck})
        for c in report.cells:
            print(f"{method:>13} {task:>5} {c.config_id:>6}: success {c.success_rate:.2f} "
                  f"reward {c.mean_reward:.2f} ({c.n_episodes} episodes)")
        finish_stage(out, echo, ctx.cfg)
    return out


def collect_reports(runs_dir: Path):
    from .evalsuite import EvalReport

    paths = sorted(Path(runs_dir).glob("*/report.json"))
    if not paths:
        raise MissingPrerequisiteError(f"missing evaluation reports: no */report.json under {runs_dir}")
    report = EvalReport()
    for p in paths:
        report.extend(EvalReport.load(p))
    return report, paths


def stage_report(ctx: Context, runs_dir: Path | None = None) -> Path:
    from .evalsuite import emit_report, summarize_gaps

    runs_dir = Path(runs_dir) if runs_dir is not None else ctx.root / "eval"
    report, paths = collect_reports(runs_dir)
    out = ctx.root / "report"
    echo = {"stage": "report", "runs": {p.parent.name: _stamp(p.parent) for p in paths}}
    if begin_stage(out, echo, ctx.force):
        files = emit_report(report, out, {"runs": sorted(echo["runs"])}, ctx.cfg.seeds, {})
        if len(report.methods()) >= 2:
            gaps = summarize_gaps(report)
            (out / "gaps.json").write_text(json.dumps(gaps, indent=2, sort_keys=True))
        print(Path(files["results"]).read_text(), end="")
        finish_stage(out, echo, ctx.cfg)
    return out


def stage_ablate(ctx: Context, kind: str, runs_dir: Path | None = None) -> Path:
    from .evalsuite import AblationConfig, ablation_runs

    cfg = ctx.cfg
    out = ctx.root / "ablate" / kind
    acfg = AblationConfig(train_cfg=train_config(cfg, "ours", cfg.seeds[0]), n_episodes=cfg.eval.n_episodes,
                          seed=cfg.eval.seed, train_seeds=tuple(cfg.seeds), configs=tuple(cfg.eval.configs),
                          out_dir=str(out))
    inputs: dict = {}
    if kind == "generalization":
        report, paths = collect_reports(Path(runs_dir) if runs_dir else ctx.root / "eval")
        acfg.report = report
        inputs["runs"] = {p.parent.name: _stamp(p.parent) for p in paths}
    elif kind in ("zero_shot", "scaling", "architecture"):
        task = "zip" if kind == "zero_shot" else "scoop"
        if kind == "scaling":
            # The pool is checked first so a missing pool is always reported by its path.
            pool = ctx.pool_dir()
            base = len(ds.episode_dirs(ctx.data_dir(task))) or cfg.data.episodes.get(task, 0)
            needed = base // 2
            have = len(ds.episode_dirs(pool)) if (pool / "config.json").is_file() else 0
            if have < needed or have == 0:
                raise MissingPrerequisiteError(
                    f"missing {base + needed}-demo scoop pool: {pool} holds {have} of the {needed} extra demos "
                    f"needed (run `hearbc gen-data --task scoop --pool`)")
        data = _require(ctx.data_dir(task), f"{task} demonstrations")
        if kind == "scaling":
            acfg.extra_pool = {task: ds.load_dataset(pool)}
            acfg.extra_pool_path = str(pool)
            inputs["pool"] = _stamp(pool)
        acfg.audio_ckpt = audio_checkpoint(ctx, "ours", task)
        acfg.data = {task: ds.load_dataset(data)}
        inputs["data"] = _stamp(data)
        inputs["audio_pretrain"] = _stamp(Path(acfg.audio_ckpt).parent)
    else:
        raise UsageError(f"unknown ablation kind {kind!r}")
    echo = {"stage": "ablate", "kind": kind, "train": asdict(acfg.train_cfg), "eval": asdict(cfg.eval),
            "seeds": cfg.seeds, "inputs": inputs}
    if begin_stage(out, echo, ctx.force):
        result = ablation_runs(kind, acfg)
        for row in result["rows"]:
            print(", ".join(f"{k}={v}" for k, v in row.items()))
        finish_stage(out, echo, ctx.cfg)
    return out


def stage_tsne(ctx: Context, ckpt: Path, task: str | None = None) -> Path:
    from .evalsuite import evaluate, tsne_project

    run, ck, tr = _run_info(ckpt)
    task = task or tr.get("task")
    if task not in sw.TASKS:
        raise UsageError(f"cannot tell which task {ck} was trained on; pass --task")
    t = ctx.cfg.tsne
    out = ctx.root / "tsne" / run.name
    echo = {"stage": "tsne", "checkpoint": str(ck), "train": tr, "task": task, "tsne": asdict(t),
            "configs": list(ctx.cfg.eval.configs), "h": ctx.cfg.eval.h}
    if begin_stage(out, echo, ctx.force):
        traces: list = []
        for c in ctx.cfg.eval.configs:
            evaluate(str(ck), task, c, t.n_episodes, t.seed, h=ctx.cfg.eval.h, traces=traces)
        tsne_project(traces, seed=t.seed, perplexity=t.perplexity, max_iter=t.max_iter,
                     learning_rate=t.learning_rate, out_dir=out)
        finish_stage(out, echo, ctx.cfg)
    return out


def stage_demo(ctx: Context) -> Path:
    """gen-data, avid pretraining, train every configured method, eval, report and t-SNE."""
    cfg = ctx.cfg
    t0 = time.perf_counter()
    for task in cfg.tasks:
        stage_gen_data(ctx, task, None, None)
    if any(AUDIO_METHODS.get(m) == "avid" for m in cfg.methods):
        stage_pretrain(ctx, "avid")
    for task in cfg.tasks:
        if "byol" in cfg.methods:
            stage_pretrain(ctx, "byol", task)
    runs = []
    for task in cfg.tasks:
        for m in cfg.methods:
            for s in cfg.seeds:
                runs.append(stage_train(ctx, m, task, s))
    for run in runs:
        stage_eval(ctx, run)
    out = stage_report(ctx)
    tsne_run = next((r for r in runs if r.name.startswith("ours-")), runs[0])
    stage_tsne(ctx, tsne_run)
    print(f"demo finished in {time.perf_counter() - t0:.0f}s under {ctx.root}")
    return out


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML or JSON run config")
    common.add_argument("--force", action="store_true", help="overwrite an existing stage directory")
    common.add_argument("--jobs", type=_positive_int, default=1, help="worker processes for evaluation cells")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hearbc", description="Audio-visual behaviour cloning pipeline.")
    p.add_argument("--version", action="version", version=f"hearbc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="collect expert demonstrations")
    g.add_argument("--task", required=True, choices=sw.TASKS)
    g.add_argument("--episodes", type=_positive_int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", type=Path, help="dataset directory (default <root>/data/<task>)")
    g.add_argument("--pool", action="store_true", help="write the extra scoop pool used by the scaling ablation")

    pt = sub.add_parser("pretrain", parents=[common], help="pretrain the audio encoder")
    pt.add_argument("--method", required=True, choices=("avid", "byol"))
    pt.add_argument("--task", choices=sw.TASKS, help="task whose demos feed byol")

    t = sub.add_parser("train", parents=[common], help="behaviour-clone one policy")
    t.add_argument("--method", required=True, choices=METHODS)
    t.add_argument("--task", required=True, choices=sw.TASKS)
    t.add_argument("--seed", type=int)

    e = sub.add_parser("eval", parents=[common], help="roll out a trained policy")
    e.add_argument("--ckpt", required=True, type=Path, help="train run directory or its checkpoint/")
    e.add_argument("--task", choices=sw.TASKS)
    e.add_argument("--configs", nargs="+", choices=sw.CONFIG_IDS)
    e.add_argument("--episodes", type=_positive_int)
    e.add_argument("--seed", type=int)
    e.add_argument("--name", help="output name under <root>/eval/ (default: the train run name)")

    r = sub.add_parser("report", parents=[common], help="collate evaluation reports")
    r.add_argument("--runs-dir", type=Path)

    a = sub.add_parser("ablate", parents=[common], help="run one ablation study")
    a.add_argument("--kind", required=True, choices=("zero_shot", "scaling", "generalization", "architecture"))
    a.add_argument("--runs-dir", type=Path, help="evaluation reports for the generalization split")

    ts = sub.add_parser("tsne", parents=[common], help="t-SNE of fusion embeddings along rollouts")
    ts.add_argument("--ckpt", required=True, type=Path)
    ts.add_argument("--task", choices=sw.TASKS)

    sub.add_parser("demo", parents=[common], help="run the whole pipeline with small budgets")
    return p


def load_run_config(args) -> C.RunConfig:
    if args.command == "demo":
        doc = json.loads(json.dumps(DEMO_CONFIG))
        if args.config is not None:
            doc = C.merge(doc, C.read_document(args.config))
        return C.from_dict(doc)
    return C.load_config(args.config) if args.config is not None else C.from_dict({})


def dispatch(args, ctx: Context):
    cmd = args.command
    if cmd == "gen-data":
        return stage_gen_data(ctx, args.task, args.episodes, args.seed, args.out, args.pool)
    if cmd == "pretrain":
        return stage_pretrain(ctx, args.method, args.task)
    if cmd == "train":
        return stage_train(ctx, args.method, args.task, args.seed)
    if cmd == "eval":
        return stage_eval(ctx, args.ckpt, args.task, args.configs, args.episodes, args.seed, args.name)
    if cmd == "report":
        return stage_report(ctx, args.runs_dir)
    if cmd == "ablate":
        return stage_ablate(ctx, args.kind, args.runs_dir)
    if cmd == "tsne":
        return stage_tsne(ctx, args.ckpt, args.task)
    if cmd == "demo":
        return stage_demo(ctx)
    raise UsageError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports bad usage with status 2
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args)
        root = resolve_root(cfg)
        if args.command == "demo":
            root = root / "demo"
        dispatch(args, Context(cfg, root, args.force, args.jobs))
    except (UsageError, InvalidInputError) as exc:
        print(f"hearbc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"hearbc {args.command}: missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.debug("failure", exc_info=True)
        print(f"hearbc {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
