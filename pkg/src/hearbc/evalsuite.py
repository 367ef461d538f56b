"""Rollout evaluation, experiment matrix, report tables, ablations and t-SNE.

Report shapes follow the results table (Flipping success; Scooping and
Zipping reward plus success) and the per-configuration bar chart. Every file
written here is accompanied by a run manifest with the config hash, seeds and
content hashes of the checkpoints involved.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import simworld as sw
from .dsp import InvalidInputError
from .encoders import SCALES

log = logging.getLogger(__name__)

TASK_LABELS = {"flip": "Flipping", "scoop": "Scooping", "zip": "Zipping"}
REWARD_TASKS = ("scoop", "zip")
METHOD_LABELS = {"ours": "Ours", "byol": "BYOL-A", "scratch": "Scratch", "vision_only": "Vision-Only",
                 "mlp_ablation": "MLP", "frozen_audio": "Frozen-Audio"}

# Reference success and reward table; used for format and gap tests only.
REFERENCE_TABLE = {
    "Ours": {"flip": {"success": 50.0}, "scoop": {"reward": 15.4, "success": 78.1},
             "zip": {"reward": 8.9, "success": 88.9}},
    "BYOL-A": {"flip": {"success": 25.0}, "scoop": {"reward": 2.3, "success": 25.0},
               "zip": {"reward": 3.8, "success": 66.7}},
    "Scratch": {"flip": {"success": 15.4}, "scoop": {"reward": 7.7, "success": 50.0},
                "zip": {"reward": 6.9, "success": 72.2}},
    "Vision-Only": {"flip": {"success": 0.0}, "scoop": {"reward": 2.5, "success": 28.1},
                    "zip": {"reward": 4.4, "success": 44.4}},
}


class MissingCheckpointError(FileNotFoundError):
    pass


# -- reports -------------------------------------------------------------------

@dataclass
class EpisodeLog:
    episode_seed: int
    success: bool
    reward: float
    length: int
    n_inferences: int


@dataclass
class CellResult:
    method: str
    task: str
    config_id: str
    train_seed: int
    episodes: list[EpisodeLog] = field(default_factory=list)

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)

    @property
    def successes(self) -> int:
        return sum(e.success for e in self.episodes)

    @property
    def success_rate(self) -> float:
        return self.successes / self.n_episodes if self.episodes else 0.0

    @property
    def mean_reward(self) -> float:
        return float(np.mean([e.reward for e in self.episodes])) if self.episodes else 0.0


@dataclass
class EvalReport:
    cells: list[CellResult] = field(default_factory=list)

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.cells.extend(other.cells)
        return self

    def methods(self) -> list[str]:
        return list(dict.fromkeys(c.method for c in self.cells))

    def select(self, method=None, task=None, configs=None) -> list[CellResult]:
        return [c for c in self.cells if (method is None or c.method == method)
                and (task is None or c.task == task) and (configs is None or c.config_id in configs)]

    def aggregate(self, method: str, task: str, configs=None) -> dict | None:
        """Pooled over episodes of every matching cell (configs and training seeds)."""
        cells = self.select(method, task, configs)
        episodes = [e for c in cells for e in c.episodes]
        if not episodes:
            return None
        successes = sum(e.success for e in episodes)
        return {"success_rate": successes / len(episodes), "mean_reward": float(np.mean([e.reward for e in episodes])),
                "n_episodes": len(episodes), "successes": successes,
                "seeds": sorted({c.train_seed for c in cells})}

    def table(self) -> dict:
        """Method label -> task -> {"success": %, "reward": mean} (reward only for scoop/zip)."""
        out = {}
        for m in self.methods():
            row = {}
            for task in sw.TASKS:
                agg = self.aggregate(m, task)
                if agg is None:
                    continue
                row[task] = {"success": 100.0 * agg["success_rate"]}
                if task in REWARD_TASKS:
                    row[task]["reward"] = agg["mean_reward"]
            out[METHOD_LABELS.get(m, m)] = row
        return out

    def to_dict(self) -> dict:
        return {"cells": [{**{k: v for k, v in asdict(c).items() if k != "episodes"},
                           "success_rate": c.success_rate, "mean_reward": c.mean_reward,
                           "n_episodes": c.n_episodes, "episodes": [asdict(e) for e in c.episodes]}
                          for c in self.cells]}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        cells = []
        for c in d["cells"]:
            cells.append(CellResult(c["method"], c["task"], c["config_id"], c["train_seed"],
                                    [EpisodeLog(**e) for e in c["episodes"]]))
        return cls(cells)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def results_columns(tasks=sw.TASKS) -> list[str]:
    cols = ["Method"]
    for task in tasks:
        if task in REWARD_TASKS:
            cols.append(f"{TASK_LABELS[task]} Reward")
        cols.append(f"{TASK_LABELS[task]} Success (%)")
    return cols


def table_rows(table: dict, tasks=sw.TASKS) -> list[list]:
    rows = []
    for method, row in table.items():
        out = [method]
        for task in tasks:
            cell = row.get(task, {})
            if task in REWARD_TASKS:
                out.append(_fmt(cell.get("reward")))
            out.append(_fmt(cell.get("success")))
        rows.append(out)
    return rows


def _fmt(v):
    return "" if v is None else f"{v:.1f}"


def write_results_csv(table: dict, path, tasks=sw.TASKS) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(results_columns(tasks))
        w.writerows(table_rows(table, tasks))
    return path


PER_CONFIG_COLUMNS = ["method", "task", "config_id", "success_rate", "mean_reward", "n_episodes", "seeds"]


def write_per_config_csv(report: EvalReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PER_CONFIG_COLUMNS)
        for m in report.methods():
            for task in sw.TASKS:
                for cfg_id in sw.CONFIG_IDS:
                    agg = report.aggregate(m, task, [cfg_id])
                    if agg is None:
                        continue
                    reward = f"{agg['mean_reward']:.4f}" if task in REWARD_TASKS else ""
                    w.writerow([m, task, cfg_id, f"{100 * agg['success_rate']:.1f}", reward,
                                agg["n_episodes"], " ".join(map(str, agg["seeds"]))])
    return path


def plot_per_config(csv_path, out_path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    tasks = [t for t in sw.TASKS if any(r["task"] == t for r in rows)]
    methods = list(dict.fromkeys(r["method"] for r in rows))
    fig, axes = plt.subplots(1, max(len(tasks), 1), figsize=(4 * max(len(tasks), 1), 3), squeeze=False)
    width = 0.8 / max(len(methods), 1)
    for ax, task in zip(axes[0], tasks):
        for j, m in enumerate(methods):
            vals = [next((float(r["success_rate"]) for r in rows
                          if r["method"] == m and r["task"] == task and r["config_id"] == c), 0.0)
                    for c in sw.CONFIG_IDS]
            ax.bar(np.arange(len(sw.CONFIG_IDS)) + j * width, vals, width, label=METHOD_LABELS.get(m, m))
        ax.set_xticks(np.arange(len(sw.CONFIG_IDS)) + 0.4 - width / 2, sw.CONFIG_IDS)
        ax.set_title(TASK_LABELS[task])
        ax.set_ylim(0, 100)
        ax.set_ylabel("success (%)")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(out_path)


# -- gaps ----------------------------------------------------------------------

def summarize_gaps(report) -> dict:
    """Best method vs per-task next best.

    The best method is the one with the highest mean success over the tasks it
    covers. Success gaps are in points; reward increases are relative
    (best / next best - 1) for the reward tasks. All pairwise differences are
    returned under ``pairwise`` so other aggregations can be recomputed.
    """
    table = report.table() if isinstance(report, EvalReport) else report
    if len(table) < 2:
        raise InvalidInputError("summarize_gaps needs at least two methods")
    tasks = [t for t in sw.TASKS if all(t in row for row in table.values())]
    best = max(table, key=lambda m: np.mean([table[m][t]["success"] for t in tasks]))
    others = [m for m in table if m != best]
    out = {"best": best, "success_gap": {}, "next_best_success": {}, "reward_increase": {},
           "next_best_reward": {}, "pairwise": {}}
    for t in tasks:
        nb = max(others, key=lambda m: table[m][t]["success"])
        out["next_best_success"][t] = nb
        out["success_gap"][t] = table[best][t]["success"] - table[nb][t]["success"]
        if t in REWARD_TASKS and "reward" in table[best][t]:
            nbr = max(others, key=lambda m: table[m][t]["reward"])
            out["next_best_reward"][t] = nbr
            base = table[nbr][t]["reward"]
            out["reward_increase"][t] = table[best][t]["reward"] / base - 1.0 if base > 0 else float("nan")
        for m in others:
            pair = {"success_diff": table[best][t]["success"] - table[m][t]["success"]}
            if t in REWARD_TASKS and "reward" in table[m][t] and table[m][t]["reward"] > 0:
                pair["reward_ratio_minus_one"] = table[best][t]["reward"] / table[m][t]["reward"] - 1.0
            out["pairwise"][f"{best} vs {m} / {t}"] = pair
    out["mean_success_gap"] = float(np.mean(list(out["success_gap"].values()))) if tasks else 0.0
    incs = list(out["reward_increase"].values())
    out["mean_reward_increase"] = float(np.mean(incs)) if incs else 0.0
    for k, v in out["pairwise"].items():
        log.info("gap %s: %s", k, v)
    return out


# -- policies for evaluation -----------------------------------------------------

class RandomPolicy:
    """Uniform random actions within the per-step limit."""

    def __init__(self, seed: int = 0, horizon: int = 8):
        self.rng = np.random.default_rng(seed)
        self.horizon = horizon

    def __call__(self, window) -> np.ndarray:
        return self.rng.uniform(-sw.MAX_DELTA, sw.MAX_DELTA, (self.horizon, 6))


class ExpertPolicy:
    """The scripted expert behind the policy interface.

    Each call plans H actions on a copy of the environment. Between calls the
    executor runs some prefix of that plan; the expert's internal state is
    taken from the matching point of the plan.
    """

    def __init__(self, env: sw.ContactEnv, task: str, noise_sigma: float = 0.0, horizon: int = 8, seed: int = 0):
        self.env, self.horizon = env, horizon
        self.expert = sw.ScriptedExpert(task, noise_sigma, seed)
        self._plan_start = None
        self._snapshots: list[sw.ScriptedExpert] = []

    def __call__(self, window) -> np.ndarray:
        t = self.env.state.time_step
        if self._plan_start is not None and 0 < t - self._plan_start < len(self._snapshots):
            self.expert = self._snapshots[t - self._plan_start]
        elif t == 0:
            self.expert.reset()
        sim = copy.deepcopy(self.env)
        expert = copy.deepcopy(self.expert)
        actions, snaps = [], [copy.deepcopy(expert)]
        done = False
        for _ in range(self.horizon):
            if done:
                actions.append(np.zeros(6))
                continue
            a = expert(sim.state)
            actions.append(a)
            _, _, done, _ = sim.step(a)
            snaps.append(copy.deepcopy(expert))
        self._plan_start, self._snapshots = t, snaps
        return np.stack(actions)


# -- evaluation ----------------------------------------------------------------

def _checkpoint_hash(path) -> str:
    h = hashlib.sha256()
    for name in ("manifest.json", "tensors.bin"):
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()


def episode_seed(seed: int, task: str, config_id: str, i: int) -> int:
    return sw.hash_seed(seed, sw.TASKS.index(task), sw.CONFIG_IDS.index(config_id), i)


def evaluate(policy_ckpt, task: str, config_id: str = "train", n_episodes: int = 20, seed: int = 0,
             method: str | None = None, train_seed: int = 0, h: int = 2,
             traces: list | None = None, max_steps: int | None = None) -> EvalReport:
    """Roll out ``n_episodes`` seeded episodes with re-planning every ``h`` steps.

    ``policy_ckpt`` is a checkpoint directory, a loaded policy model, or a
    factory ``env -> callable`` (used for the expert and random baselines).
    When ``traces`` is a list, one :class:`EmbeddingTrace` per episode is
    appended to it.
    """
    from .bctrain import load_policy
    from .policy import AVPolicy, PolicyRunner, quasi_open_loop_rollout

    if n_episodes < 1:
        raise InvalidInputError("n_episodes must be >= 1")
    model = None
    if isinstance(policy_ckpt, (str, Path)):
        if not (Path(policy_ckpt) / "manifest.json").is_file():
            raise MissingCheckpointError(f"no policy checkpoint at {policy_ckpt}")
        model = load_policy(policy_ckpt)
    elif isinstance(policy_ckpt, AVPolicy):
        model = policy_ckpt
    image_size = SCALES[model.cfg.scale].render_size if model is not None else (64, 64)
    env_cfg = sw.TaskConfig(task, config_id, image_size=image_size)
    cell = CellResult(method or ("policy" if model is not None else "scripted"), task, config_id, train_seed)
    for i in range(n_episodes):
        env = sw.ContactEnv(env_cfg)
        ep_seed = episode_seed(seed, task, config_id, i)
        if model is not None:
            policy = PolicyRunner(model, record_embeddings=traces is not None)
        else:
            policy = policy_ckpt(env, ep_seed)
        traj = quasi_open_loop_rollout(policy, env, h=h, seed=ep_seed, max_steps=max_steps,
                                       horizon=getattr(policy, "horizon", None))
        cell.episodes.append(EpisodeLog(ep_seed, traj.success, traj.final_reward, len(traj), traj.n_inferences))
        if traces is not None and model is not None:
            traces.append(EmbeddingTrace(np.stack(policy.embeddings), config_id, traj.inference_steps,
                                         f"{task}/{config_id}/{i}"))
    return EvalReport([cell])


def expert_factory(task: str, noise_sigma: float = 0.0):
    return lambda env, ep_seed: ExpertPolicy(env, task, noise_sigma, seed=ep_seed)


def random_factory(seed: int = 0):
    return lambda env, ep_seed: RandomPolicy(sw.hash_seed(seed, ep_seed))


# -- matrix --------------------------------------------------------------------

def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out_dir, config: dict, seeds, checkpoints: dict, files) -> Path:
    ck = {k: _checkpoint_hash(v) for k, v in sorted(checkpoints.items()) if (Path(v) / "manifest.json").is_file()}
    manifest = {"config_hash": config_hash(config), "config": config, "seeds": list(seeds),
                "checkpoints": ck,
                "files": {Path(f).name: hashlib.sha256(Path(f).read_bytes()).hexdigest() for f in files}}
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def run_matrix(methods, tasks, configs, checkpoints: dict, out_dir=None, n_episodes: int = 20,
               seed: int = 0, train_seeds=(0,)) -> EvalReport:
    """Evaluate every (method, task, config, training seed) cell.

    ``checkpoints`` maps (method, task, train_seed) to a checkpoint directory.
    Missing checkpoints skip their cells with a warning.
    """
    report = EvalReport()
    used = {}
    for m in methods:
        for task in tasks:
            for ts in train_seeds:
                path = checkpoints.get((m, task, ts))
                if path is None or not (Path(path) / "manifest.json").is_file():
                    warnings.warn(f"skipping {m}/{task}/seed {ts}: no checkpoint at {path}")
                    continue
                used[f"{m}/{task}/{ts}"] = path
                for c in configs:
                    report.extend(evaluate(path, task, c, n_episodes, seed, method=m, train_seed=ts))
    if out_dir is not None:
        emit_report(report, out_dir, {"methods": list(methods), "tasks": list(tasks), "configs": list(configs),
                                      "n_episodes": n_episodes, "seed": seed, "train_seeds": list(train_seeds)},
                    [seed, *train_seeds], used)
    return report


def emit_report(report: EvalReport, out_dir, config: dict, seeds, checkpoints: dict) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    files = [write_results_csv(report.table(), out / "results.csv"),
             write_per_config_csv(report, out / "per_config.csv")]
    files.append(plot_per_config(files[1], out / "per_config.png"))
    write_manifest(out, config, seeds, checkpoints, files + [out / "report.json"])
    return {"results": files[0], "per_config": files[1], "plot": files[2]}


# -- ablations -----------------------------------------------------------------

@dataclass
class AblationConfig:
    """Inputs for :func:`ablation_runs`.

    ``data`` maps task -> training episodes; ``extra_pool`` maps task ->
    additional episodes for the 1.5x scaling point; ``train_cfg`` is a
    bctrain.TrainConfig template; ``report`` is an existing matrix report
    (generalization split).
    """
    data: dict = field(default_factory=dict)
    extra_pool: dict = field(default_factory=dict)
    train_cfg: object = None
    audio_ckpt: str | None = None
    n_episodes: int = 20
    seed: int = 0
    train_seeds: tuple = (0,)
    configs: tuple = sw.CONFIG_IDS
    report: EvalReport | None = None
    scaling_methods: tuple = ("ours",)
    out_dir: str | None = None
    extra_pool_path: str | None = None


def _train_and_eval(method, task, episodes, acfg: AblationConfig, ts: int, tag: str):
    from dataclasses import replace

    from .bctrain import TrainConfig, train

    base = acfg.train_cfg or TrainConfig()
    cfg = replace(base, seed=ts, audio_ckpt=acfg.audio_ckpt or base.audio_ckpt)
    out = Path(acfg.out_dir) / "runs" / f"{tag}-{method}-{task}-{ts}" if acfg.out_dir else None
    model, _ = train(method, episodes, cfg, out_dir=out)
    rep = EvalReport()
    for c in acfg.configs:
        rep.extend(evaluate(model, task, c, acfg.n_episodes, acfg.seed, method=method, train_seed=ts))
    return model, rep


def ablation_runs(kind: str, cfg: AblationConfig) -> dict:
    """Run one ablation; returns {"rows": [...], "columns": [...]} and writes ablations/<kind>.csv."""
    from .datastore import subsample
    from .encoders import count_parameters

    rows: list[dict] = []
    if kind == "zero_shot":
        task = "zip" if "zip" in cfg.data else next(iter(cfg.data))
        for method in ("ours", "frozen_audio"):
            rep = EvalReport()
            for ts in cfg.train_seeds:
                rep.extend(_train_and_eval(method, task, cfg.data[task], cfg, ts, kind)[1])
            agg = rep.aggregate(method, task)
            rows.append({"method": method, "task": task, "success_rate": agg["success_rate"],
                         "mean_reward": agg["mean_reward"], "n_episodes": agg["n_episodes"]})
    elif kind == "scaling":
        task = "scoop"
        if task not in cfg.data:
            raise InvalidInputError("scaling ablation needs scoop demonstrations")
        pool = cfg.extra_pool.get(task)
        needed = len(cfg.data[task]) // 2
        if pool is None or len(pool) < needed:
            where = f" at {cfg.extra_pool_path}" if cfg.extra_pool_path else ""
            raise MissingCheckpointError(
                f"scaling 1.5x needs an extended pool of {needed} extra scoop demos{where}")
        for method in cfg.scaling_methods:
            for frac in (0.5, 1.0, 1.5):
                rep = EvalReport()
                for ts in cfg.train_seeds:
                    eps = subsample(cfg.data[task], frac, seed=ts, extra_pool=pool)
                    rep.extend(_train_and_eval(method, task, eps, cfg, ts, f"{kind}{frac}")[1])
                agg = rep.aggregate(method, task)
                rows.append({"method": method, "fraction": frac, "n_demos": int(round(frac * len(cfg.data[task]))),
                             "success_rate": agg["success_rate"], "mean_reward": agg["mean_reward"]})
    elif kind == "generalization":
        if cfg.report is None:
            raise InvalidInputError("generalization ablation needs an evaluation report")
        for m in cfg.report.methods():
            for split, ids in (("train", ("train",)), ("test", tuple(c for c in sw.CONFIG_IDS if c != "train"))):
                episodes = [e for c in cfg.report.select(m, configs=ids) for e in c.episodes]
                if not episodes:
                    continue
                rows.append({"method": m, "split": split, "success_rate": float(np.mean([e.success for e in episodes])),
                             "n_episodes": len(episodes)})
    elif kind == "architecture":
        task = "scoop" if "scoop" in cfg.data else next(iter(cfg.data))
        for method in ("ours", "mlp_ablation"):
            rep = EvalReport()
            n_params = None
            for ts in cfg.train_seeds:
                model, r = _train_and_eval(method, task, cfg.data[task], cfg, ts, kind)
                n_params = count_parameters(model)
                rep.extend(r)
            agg = rep.aggregate(method, task)
            rows.append({"method": method, "task": task, "parameters": n_params,
                         "success_rate": agg["success_rate"], "mean_reward": agg["mean_reward"]})
    else:
        raise InvalidInputError(f"unknown ablation kind {kind!r}")
    result = {"kind": kind, "rows": rows, "columns": list(rows[0]) if rows else []}
    if cfg.out_dir is not None:
        d = Path(cfg.out_dir) / "ablations"
        d.mkdir(parents=True, exist_ok=True)
        with open(d / f"{kind}.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=result["columns"])
            w.writeheader()
            w.writerows(rows)
    return result


# -- t-SNE ---------------------------------------------------------------------

@dataclass
class EmbeddingTrace:
    embeddings: np.ndarray  # [T, D] fusion outputs, one per inference call
    config_id: str
    timesteps: list
    label: str = ""


@dataclass
class TSNEResult:
    points: np.ndarray
    config_ids: list
    trajectory: list
    timesteps: list
    time_fraction: np.ndarray
    perplexity: float


def pca_init(x: np.ndarray) -> np.ndarray:
    """First two principal components, each axis sign-fixed so its largest-magnitude loading is positive.

    Scaled like scikit-learn's own PCA initialisation (std of the first axis = 1e-4).
    """
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    signs = np.sign(comps[np.arange(2), np.argmax(np.abs(comps), axis=1)])
    comps = comps * signs[:, None]
    proj = xc @ comps.T
    scale = np.std(proj[:, 0])
    return proj / (scale if scale > 0 else 1.0) * 1e-4


def tsne_project(traces: list[EmbeddingTrace], seed: int = 0, perplexity: float = 30.0,
                 max_iter: int = 1000, learning_rate: float = 200.0, out_dir=None) -> TSNEResult:
    """2-D t-SNE of all trace points.

    Points are put into a canonical order (lexicographic on their values)
    before fitting and mapped back afterwards, so a permutation of the input
    permutes the output identically.
    """
    from sklearn.manifold import TSNE

    x = np.concatenate([np.asarray(t.embeddings, dtype=np.float64) for t in traces]) if traces else np.zeros((0, 2))
    if len(x) < 10:
        raise InvalidInputError(f"t-SNE needs at least 10 points, got {len(x)}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("embeddings contain non-finite values")
    configs, traj, steps, frac = [], [], [], []
    for k, t in enumerate(traces):
        n = len(t.embeddings)
        configs += [t.config_id] * n
        traj += [t.label or str(k)] * n
        steps += list(t.timesteps)
        frac += list(np.linspace(0.0, 1.0, n) if n > 1 else [0.0])
    if len(x) < 3 * perplexity:
        new = max(1.0, (len(x) - 1) / 3.0)
        warnings.warn(f"{len(x)} points is too few for perplexity {perplexity}; using {new:.2f}")
        perplexity = new
    order = np.lexsort(x.T[::-1])
    xs = x[order]
    tsne = TSNE(n_components=2, perplexity=perplexity, max_iter=max_iter, learning_rate=learning_rate,
                init=pca_init(xs), random_state=seed, method="barnes_hut")
    ys = tsne.fit_transform(xs)
    points = np.empty_like(ys)
    points[order] = ys
    result = TSNEResult(points, configs, traj, steps, np.asarray(frac), perplexity)
    if out_dir is not None:
        write_tsne(result, out_dir, {"seed": seed, "perplexity": perplexity, "max_iter": max_iter,
                                     "learning_rate": learning_rate, "n_points": len(x)})
    return result


CONFIG_CMAPS = {"train": "Blues", "test_a": "Oranges", "test_b": "Greens"}


def write_tsne(result: TSNEResult, out_dir, config: dict) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "tsne_points.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "config_id", "trajectory", "timestep", "time_fraction", "x", "y"])
        for i, (p, c, tr, st, f) in enumerate(zip(result.points, result.config_ids, result.trajectory,
                                                  result.timesteps, result.time_fraction)):
            w.writerow([i, c, tr, st, f"{f:.6f}", repr(float(p[0])), repr(float(p[1]))])
    fig, ax = plt.subplots(figsize=(5, 5))
    for c in dict.fromkeys(result.config_ids):
        mask = np.array([k == c for k in result.config_ids])
        # Lighter at the start of each trajectory, darker towards the end.
        shade = 0.25 + 0.75 * result.time_fraction[mask]
        ax.scatter(result.points[mask, 0], result.points[mask, 1], c=shade, cmap=CONFIG_CMAPS.get(c, "Greys"),
                   vmin=0.0, vmax=1.0, s=8, label=c)
    ax.legend(fontsize=7)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    png = out / "tsne.png"
    fig.savefig(png, dpi=100, metadata={"Software": None})
    plt.close(fig)
    write_manifest(out, config, [config.get("seed", 0)], {}, [csv_path, png])
    return {"points": csv_path, "plot": png}
