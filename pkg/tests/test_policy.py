import math

import numpy as np
import pytest
import torch

from hearbc import policy as pol
from hearbc import simworld as sw
from hearbc.datastore import ObservationWindow
from hearbc.dsp import InvalidInputError, MultiChannelWaveform
from hearbc.encoders import count_parameters


def tiny_policy(**kw):
    torch.manual_seed(0)
    return pol.AVPolicy(pol.PolicyConfig(scale="tiny", **kw))


def batch(b=2, crop=56):
    g = torch.Generator().manual_seed(1)
    return torch.rand(b, 4, 3, crop, crop, generator=g), torch.randn(b, 80, 198, generator=g)


def test_token_counts():
    x, spec = batch()
    assert tiny_policy().build_tokens(x, spec).shape == (2, 5, 512)
    assert tiny_policy(use_audio=False).build_tokens(x).shape == (2, 4, 512)
    assert pol.PolicyConfig().n_tokens == 5 and pol.PolicyConfig(use_audio=False).n_tokens == 4


def test_zero_slot_embeddings_are_identity():
    m = tiny_policy(pos_init="zeros")
    x, spec = batch()
    assert torch.equal(m.build_tokens(x, spec), m.features(x, spec))


def test_block_constants():
    m = pol.AVPolicy(pol.PolicyConfig(scale="tiny"))
    blk = m.fusion.block
    assert blk.dim == 512 and blk.attn.heads == 8
    assert blk.ffn[0].out_features == 512
    assert m.fusion.head[0].in_features == 5 * 512 and m.fusion.head[0].out_features == 512
    assert m.fusion.head[2].p == 0.5


def test_block_shape_and_attention_rows():
    blk = pol.PreLNBlock()
    x = torch.randn(3, 5, 512)
    assert blk(x).shape == x.shape
    w = blk.attn.last_weights
    assert w.shape == (3, 8, 5, 5)
    assert torch.allclose(w.sum(-1), torch.ones(3, 8, 5), atol=1e-6)
    with pytest.raises(InvalidInputError):
        blk(torch.randn(1, 5, 64))


def test_token_permutation_changes_output():
    torch.manual_seed(0)
    head = pol.FusionHead(5, 512, 8, 1, 512, 8, 0.5).eval()
    feats = torch.randn(1, 5, 512)
    perm = feats[:, [1, 0, 2, 3, 4]]
    a, b = head.embed(feats), head.embed(perm)
    # Without slot embeddings the block is permutation-equivariant; with them it is not.
    a_tokens, b_tokens = a.view(5, 512), b.view(5, 512)
    assert not torch.allclose(a_tokens[[1, 0, 2, 3, 4]], b_tokens, atol=1e-6)


def test_head_output_and_dropout_modes():
    m = tiny_policy()
    x, spec = batch()
    m.eval()
    a, b = m(x, spec), m(x, spec)
    assert a.shape == (2, 8, 6) and torch.equal(a, b)
    m.train()
    torch.manual_seed(1)
    c = m(x, spec)
    torch.manual_seed(2)
    assert not torch.equal(c, m(x, spec))


def test_vision_only_shape():
    m = tiny_policy(use_audio=False).eval()
    assert m(batch()[0]).shape == (2, 8, 6)


def test_audio_policy_requires_spectrogram():
    with pytest.raises(InvalidInputError):
        tiny_policy()(batch()[0])


def test_bc_loss_cases():
    t = torch.randn(4, 8, 6)
    assert pol.bc_loss(t, t).item() == 0.0
    assert pol.bc_loss(t + 1, t).item() == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        pol.bc_loss(torch.zeros(8, 6), torch.zeros(7, 6))


def test_bc_loss_double_loop_oracle():
    rng = np.random.default_rng(0)
    p, t = rng.standard_normal((8, 6)), rng.standard_normal((8, 6))
    total = 0.0
    for j in range(8):
        step = 0.0
        for d in range(6):
            step += (p[j, d] - t[j, d]) ** 2
        total += step / 6
    oracle = total / 8
    assert abs(pol.bc_loss(p, t) - oracle) <= 1e-12
    assert abs(pol.bc_loss(torch.from_numpy(p), torch.from_numpy(t)).item() - oracle) <= 1e-12
    assert pol.bc_loss(p, t) >= 0


def test_mlp_ablation_parameter_match():
    for scale in ("tiny", "desk", "paper"):
        tr = count_parameters(pol.AVPolicy(pol.PolicyConfig(scale=scale)))
        mlp = count_parameters(pol.AVPolicy(pol.PolicyConfig(scale=scale, fusion="mlp")))
        assert abs(mlp - tr) / tr <= 0.05
    m = tiny_policy(fusion="mlp")
    assert not any("block" in n or "pos_embedding" in n for n, _ in m.named_parameters())
    x, spec = batch()
    assert m.eval()(x, spec).shape == (2, 8, 6)


# -- executor ------------------------------------------------------------------

class CountingPolicy:
    """Zero actions; records the latest frame index reachable by each call."""

    def __init__(self, H=8):
        self.horizon = H
        self.calls = 0

    def __call__(self, window):
        self.calls += 1
        return np.zeros((self.horizon, 6))


@pytest.mark.parametrize("h,expected", [(2, 150), (1, 300), (8, 38)])
def test_inference_cadence(h, expected):
    env = sw.ContactEnv(sw.TaskConfig("zip", image_size=(16, 16)))
    p = CountingPolicy()
    traj = pol.quasi_open_loop_rollout(p, env, h=h, seed=0)
    assert len(traj) == 300
    assert p.calls == traj.n_inferences == expected == math.ceil(300 / h)


def test_h_greater_than_H_rejected():
    env = sw.ContactEnv(sw.TaskConfig("zip", image_size=(16, 16)))
    with pytest.raises(InvalidInputError):
        pol.quasi_open_loop_rollout(CountingPolicy(4), env, h=5)


def test_executor_causality():
    """Each window's newest audio sample belongs to the chunk of its own call step."""
    env = sw.ContactEnv(sw.TaskConfig("zip", image_size=(16, 16), max_steps=40))
    seen = []

    def spy(window: ObservationWindow):
        seen.append(window.audio.samples.copy())
        return np.full((8, 6), 0.01)

    traj = pol.quasi_open_loop_rollout(spy, env, h=2, seed=0, horizon=8)
    # Replay the same actions and check the window at each inference step ends at that step's chunk.
    env2 = sw.ContactEnv(sw.TaskConfig("zip", image_size=(16, 16), max_steps=40))
    chunks = [env2.reset(0).audio_chunk.samples]
    for a in traj.actions:
        chunks.append(env2.step(a)[0].audio_chunk.samples)
    for t, window in zip(traj.inference_steps, seen):
        np.testing.assert_array_equal(window[:, -sw.CHUNK_SAMPLES:], chunks[t])


def test_policy_runner_scales_actions():
    m = tiny_policy().eval()
    runner = pol.PolicyRunner(m, record_embeddings=True)
    window = ObservationWindow(np.zeros((4, 64, 64, 3), np.uint8),
                               MultiChannelWaveform(np.zeros((4, 64000)), 32000))
    out = runner(window)
    x = pol.images_to_tensor(pol.center_crop(window.images, 56)).unsqueeze(0)
    spec = torch.zeros(1, 80, 198)
    with torch.no_grad():
        ref = m(x, spec)[0].numpy() * pol.ACTION_SCALE
    np.testing.assert_allclose(out, ref, atol=1e-7)
    assert runner.calls == 1 and runner.embeddings[0].shape == (5 * 512,)
