import csv
import json
import math

import numpy as np
import pytest
import torch

from hearbc import evalsuite as ev
from hearbc import simworld as sw
from hearbc.bctrain import TrainConfig, build_policy, save_policy
from hearbc.dsp import InvalidInputError


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory):
    torch.manual_seed(0)
    model = build_policy(TrainConfig(scale="tiny", method="scratch"))
    return save_policy(model.eval(), tmp_path_factory.mktemp("ck") / "scratch")


def synthetic_report(methods=("ours", "byol", "scratch", "vision_only"), n=4):
    rep = ev.EvalReport()
    for k, m in enumerate(methods):
        for task in sw.TASKS:
            for c in sw.CONFIG_IDS:
                cell = ev.CellResult(m, task, c, 0)
                for i in range(n):
                    win = i < n - k
                    cell.episodes.append(ev.EpisodeLog(i, win, 10.0 * win, 300, 150))
                rep.cells.append(cell)
    return rep


# -- scripted baselines --------------------------------------------------------

@pytest.mark.parametrize("task", sw.TASKS)
def test_expert_policy_succeeds(task):
    rep = ev.evaluate(ev.expert_factory(task), task, "train", n_episodes=20, seed=0)
    assert rep.cells[0].success_rate >= 0.95


def test_random_policy_fails():
    rep = ev.evaluate(ev.random_factory(0), "zip", "train", n_episodes=20, seed=0)
    assert rep.cells[0].success_rate <= 0.05


# -- evaluate ------------------------------------------------------------------

def test_evaluate_deterministic_and_read_only(tiny_ckpt):
    before = ev._checkpoint_hash(tiny_ckpt)
    a = ev.evaluate(tiny_ckpt, "zip", "test_a", n_episodes=2, seed=3, max_steps=40)
    b = ev.evaluate(tiny_ckpt, "zip", "test_a", n_episodes=2, seed=3, max_steps=40)
    assert a.to_dict() == b.to_dict()
    assert ev._checkpoint_hash(tiny_ckpt) == before
    assert all(e.length == 40 and e.n_inferences == 20 for e in a.cells[0].episodes)


def test_evaluate_errors(tmp_path, tiny_ckpt):
    with pytest.raises(ev.MissingCheckpointError):
        ev.evaluate(tmp_path / "nothing", "zip")
    with pytest.raises(InvalidInputError):
        ev.evaluate(tiny_ckpt, "zip", n_episodes=0)


def test_episode_seeds_distinct_across_cells():
    seeds = {ev.episode_seed(0, t, c, i) for t in sw.TASKS for c in sw.CONFIG_IDS for i in range(20)}
    assert len(seeds) == 3 * 3 * 20


def test_run_matrix_skips_missing_and_writes_outputs(tmp_path, tiny_ckpt):
    ckpts = {("scratch", "zip", 0): tiny_ckpt}
    with pytest.warns(UserWarning, match="skipping vision_only"):
        rep = ev.run_matrix(["scratch", "vision_only"], ["zip"], ["train"], ckpts, out_dir=tmp_path,
                            n_episodes=1)
    assert len(rep.cells) == 1
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert set(manifest["files"]) == {"results.csv", "per_config.csv", "per_config.png", "report.json"}
    assert manifest["checkpoints"]["scratch/zip/0"] == ev._checkpoint_hash(tiny_ckpt)
    assert ev.EvalReport.load(tmp_path / "report.json").to_dict() == rep.to_dict()


# -- report shape --------------------------------------------------------------

def test_results_columns_have_reward_only_for_scoop_and_zip():
    assert ev.results_columns() == ["Method", "Flipping Success (%)", "Scooping Reward", "Scooping Success (%)",
                                    "Zipping Reward", "Zipping Success (%)"]


def test_full_matrix_report(tmp_path):
    rep = synthetic_report()
    assert len(rep.cells) == 36
    files = ev.emit_report(rep, tmp_path, {"x": 1}, [0], {})
    with open(files["results"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ev.results_columns()
    assert [r[0] for r in rows[1:]] == ["Ours", "BYOL-A", "Scratch", "Vision-Only"]
    # Ours wins 4/4, BYOL-A 3/4 ... in every cell.
    assert rows[1][1:] == ["100.0", "10.0", "100.0", "10.0", "100.0"]
    assert rows[2][1:] == ["75.0", "7.5", "75.0", "7.5", "75.0"]
    with open(files["per_config"]) as fh:
        per = list(csv.DictReader(fh))
    assert len(per) == 36
    assert {r["config_id"] for r in per} == set(sw.CONFIG_IDS)
    assert all(r["mean_reward"] == "" for r in per if r["task"] == "flip")
    assert files["plot"].stat().st_size > 0


def test_aggregate_pools_seeds():
    rep = ev.EvalReport([ev.CellResult("ours", "zip", "train", s,
                                       [ev.EpisodeLog(i, s == 0, 0.0, 1, 1) for i in range(5)]) for s in range(3)])
    agg = rep.aggregate("ours", "zip")
    assert agg["n_episodes"] == 15 and agg["success_rate"] == pytest.approx(1 / 3) and agg["seeds"] == [0, 1, 2]
    assert rep.aggregate("ours", "flip") is None


# -- gaps ----------------------------------------------------------------------

def test_gaps_on_reference_table():
    g = ev.summarize_gaps(ev.REFERENCE_TABLE)
    assert g["best"] == "Ours"
    # Hand-computed: next best per task is BYOL-A (flip), Scratch (scoop, zip).
    assert g["next_best_success"] == {"flip": "BYOL-A", "scoop": "Scratch", "zip": "Scratch"}
    assert g["success_gap"]["flip"] == pytest.approx(25.0)
    assert g["success_gap"]["scoop"] == pytest.approx(28.1)
    assert g["success_gap"]["zip"] == pytest.approx(16.7)
    assert g["mean_success_gap"] == pytest.approx((25.0 + 28.1 + 16.7) / 3)
    assert abs(g["mean_success_gap"] - 23.3) < 0.05
    assert g["reward_increase"]["scoop"] == pytest.approx(15.4 / 7.7 - 1)
    assert g["reward_increase"]["zip"] == pytest.approx(8.9 / 6.9 - 1)
    assert len(g["pairwise"]) == 3 * 3


def test_gaps_identical_methods_are_zero():
    row = {"flip": {"success": 40.0}, "scoop": {"success": 40.0, "reward": 3.0}, "zip": {"success": 40.0, "reward": 3.0}}
    g = ev.summarize_gaps({"A": row, "B": json.loads(json.dumps(row))})
    assert g["mean_success_gap"] == 0.0 and g["mean_reward_increase"] == 0.0


def test_gaps_need_two_methods():
    with pytest.raises(InvalidInputError):
        ev.summarize_gaps({"Ours": ev.REFERENCE_TABLE["Ours"]})


def test_gaps_from_report():
    g = ev.summarize_gaps(synthetic_report())
    assert g["best"] == "Ours" and g["mean_success_gap"] == pytest.approx(25.0)


# -- ablations -----------------------------------------------------------------

def test_scaling_without_pool_names_the_path(tmp_path):
    acfg = ev.AblationConfig(data={"scoop": [object()] * 60}, extra_pool_path=str(tmp_path / "pool"))
    with pytest.raises(ev.MissingCheckpointError, match="extended pool of 30") as exc:
        ev.ablation_runs("scaling", acfg)
    assert str(tmp_path / "pool") in str(exc.value)


def test_generalization_split(tmp_path):
    rep = synthetic_report(("ours", "vision_only"))
    out = ev.ablation_runs("generalization", ev.AblationConfig(report=rep, out_dir=str(tmp_path)))
    rows = {(r["method"], r["split"]): r for r in out["rows"]}
    assert rows[("ours", "train")]["n_episodes"] == 12 and rows[("ours", "test")]["n_episodes"] == 24
    assert rows[("vision_only", "test")]["success_rate"] == pytest.approx(0.75)
    assert (tmp_path / "ablations" / "generalization.csv").is_file()


def test_unknown_ablation():
    with pytest.raises(InvalidInputError):
        ev.ablation_runs("bogus", ev.AblationConfig())


# -- t-SNE ---------------------------------------------------------------------

def clustered_traces(seed=0, per=40, dim=32):
    rng = np.random.default_rng(seed)
    traces = []
    for k, c in enumerate(sw.CONFIG_IDS):
        centre = rng.normal(0, 1, dim) * 6
        for j in range(2):
            x = centre + rng.normal(0, 1, (per // 2, dim))
            traces.append(ev.EmbeddingTrace(x, c, list(range(0, per, 2)), f"{c}/{j}"))
    return traces


def test_tsne_separates_clusters():
    from sklearn.metrics import silhouette_score

    res = ev.tsne_project(clustered_traces(), seed=0, perplexity=15, max_iter=500)
    assert res.points.shape == (120, 2)
    assert silhouette_score(res.points, res.config_ids) > 0.5


def test_tsne_deterministic(tmp_path):
    a = ev.tsne_project(clustered_traces(), seed=1, perplexity=15, max_iter=300, out_dir=tmp_path / "a")
    b = ev.tsne_project(clustered_traces(), seed=1, perplexity=15, max_iter=300, out_dir=tmp_path / "b")
    assert np.array_equal(a.points, b.points)
    for name in ("tsne_points.csv", "tsne.png", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_tsne_permutation_equivariant():
    traces = clustered_traces()
    x = np.concatenate([t.embeddings for t in traces])
    perm = np.random.default_rng(5).permutation(len(x))
    one = [ev.EmbeddingTrace(x, "train", list(range(len(x))))]
    shuffled = [ev.EmbeddingTrace(x[perm], "train", list(range(len(x))))]
    a = ev.tsne_project(one, seed=0, perplexity=15, max_iter=300).points
    b = ev.tsne_project(shuffled, seed=0, perplexity=15, max_iter=300).points
    assert np.allclose(a[perm], b, atol=1e-9)


def test_tsne_time_fraction_and_metadata():
    res = ev.tsne_project(clustered_traces(per=20), seed=0, perplexity=5, max_iter=250)
    assert res.time_fraction[0] == 0.0 and res.time_fraction[9] == 1.0
    assert res.trajectory[0] == "train/0" and res.timesteps[:3] == [0, 2, 4]


def test_tsne_too_few_points():
    x = np.random.default_rng(0).normal(size=(12, 4))
    with pytest.warns(UserWarning, match="too few"):
        res = ev.tsne_project([ev.EmbeddingTrace(x, "train", list(range(12)))], perplexity=30, max_iter=250)
    assert res.perplexity == pytest.approx(11 / 3)
    with pytest.raises(InvalidInputError):
        ev.tsne_project([ev.EmbeddingTrace(x[:5], "train", list(range(5)))])
    with pytest.raises(InvalidInputError):
        ev.tsne_project([ev.EmbeddingTrace(np.full((12, 4), math.nan), "train", list(range(12)))])


def test_pca_init_sign_and_scale():
    x = np.random.default_rng(0).normal(size=(50, 6))
    a, b = ev.pca_init(x), ev.pca_init(-x)
    assert np.std(a[:, 0]) == pytest.approx(1e-4)
    assert np.allclose(a, -b)
