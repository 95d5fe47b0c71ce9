import math

import numpy as np
import pytest
import torch

from tutormotion.diffusion import (
    Batch,
    DenoiserConfig,
    Denoiser,
    DiffusionTrainingError,
    MotionDataset,
    NoiseSchedule,
    SeedPrefix,
    TrainConfig,
    TrainedModel,
    act_accuracy,
    band_mask,
    diffusion_losses,
    fit_window,
    forward_diffuse,
    load_checkpoint,
    loss,
    sample,
    save_checkpoint,
    train,
    with_gains,
)
from tutormotion.policy import ACTS, constant_schedule

MICRO = DenoiserConfig(motion_dim=3, audio_dim=2, text_dim=1, d_model=8, n_blocks=1,
                       n_heads=2, window=1, ff_mult=2)


def inputs(config, T=12, B=1, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn((B, T, config.motion_dim), generator=g, dtype=dtype)
    cond = torch.randn((B, T, config.cond_dim), generator=g, dtype=dtype)
    idx = torch.randint(0, config.n_acts, (B, T), generator=g)
    u_frames = torch.nn.functional.one_hot(idx, config.n_acts).to(dtype)
    u = torch.nn.functional.one_hot(idx[:, 0], config.n_acts).to(dtype)
    s = torch.randint(0, 1000, (B,), generator=g)
    return x, s, cond, u, u_frames


def model(config, seed=0):
    torch.manual_seed(seed)
    return Denoiser(config).double().eval()


def rel_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


class TestSchedule:
    def test_linear_defaults(self):
        s = NoiseSchedule.linear()
        assert s.steps == 1000
        assert s.betas[0] == pytest.approx(1e-4) and s.betas[-1] == pytest.approx(0.02)
        assert s.alpha_bar[0] == pytest.approx(1 - 1e-4)

    def test_alpha_bar_strictly_decreasing(self):
        ab = NoiseSchedule.linear().alpha_bar
        assert np.all(np.diff(ab) < 0)
        assert np.all((ab > 0) & (ab < 1))
        np.testing.assert_allclose(np.sqrt(ab) ** 2 + (1 - ab), 1.0, atol=1e-15)

    def test_infer_steps(self):
        steps = NoiseSchedule.linear().infer_steps(50)
        assert steps.size == 50 and steps[0] == 0 and steps[-1] == 999
        assert np.all(np.diff(steps) > 0)
        with pytest.raises(ValueError):
            NoiseSchedule.linear().infer_steps(1001)

    def test_invalid_betas(self):
        with pytest.raises(ValueError):
            NoiseSchedule(np.array([0.0, 0.1]))


class TestForwardDiffuse:
    def test_zero_signal(self):
        sch = NoiseSchedule.linear()
        eps = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(forward_diffuse(np.zeros((5, 3)), 400, eps, sch),
                                      math.sqrt(1 - sch.alpha_bar[400]) * eps)

    def test_first_step_close_to_clean(self):
        sch = NoiseSchedule.linear()
        rng = np.random.default_rng(1)
        x0, eps = rng.normal(size=(2, 32, 8))
        xs = forward_diffuse(x0, 0, eps, sch)
        # sqrt(abar) x0 differs from x0 by O(beta0), so allow that on top
        bound = math.sqrt(1 - sch.alpha_bar[0]) * np.linalg.norm(eps)
        bound += (1 - math.sqrt(sch.alpha_bar[0])) * np.linalg.norm(x0)
        assert np.linalg.norm(xs - x0) <= bound + 1e-12

    @pytest.mark.parametrize("s", [0, 100, 400, 700, 999])
    def test_monte_carlo_marginal(self, s):
        sch = NoiseSchedule.linear()
        eps = np.random.default_rng(s).standard_normal((10_000, 4))
        xs = forward_diffuse(np.ones_like(eps), s, eps, sch)
        ab = sch.alpha_bar[s]
        se = math.sqrt((1 - ab) / xs.shape[0])
        assert np.all(np.abs(xs.mean(axis=0) - math.sqrt(ab)) < 3 * se)
        np.testing.assert_allclose(xs.var(axis=0), 1 - ab, rtol=0.05)

    def test_errors(self):
        sch = NoiseSchedule.linear(10)
        with pytest.raises(ValueError):
            forward_diffuse(np.zeros(3), 10, np.zeros(3), sch)
        with pytest.raises(ValueError):
            forward_diffuse(np.zeros(3), 0, np.zeros(4), sch)


class TestDenoiser:
    def test_output_shapes(self):
        c = DenoiserConfig()
        eps, logits = model(c)(*inputs(c, T=20, B=3))
        assert eps.shape == (3, 20, c.motion_dim) and logits.shape == (3, c.n_acts)

    def test_band_mask(self):
        m = band_mask(5, 5, 1)
        assert m[2, 1] and m[2, 3] and not m[2, 0] and not m[0, 4]

    @pytest.mark.parametrize("t", [0, 7, 15, 23])
    def test_single_block_locality_is_exact(self, t):
        c = DenoiserConfig(n_blocks=1, window=4)
        net = model(c)
        x, s, cond, u, uf = inputs(c, T=24)
        base, _ = net(x, s, cond, u, uf)
        for tp in range(24):
            if abs(tp - t) <= c.window:
                continue
            pert = cond.clone()
            pert[0, tp] += 100.0
            out, _ = net(x, s, pert, u, uf)
            assert torch.equal(out[0, t], base[0, t])

    def test_receptive_field_bound(self):
        c = DenoiserConfig(n_blocks=3, window=2)
        net = model(c)
        T, t = 30, 15
        x, s, cond, u, uf = inputs(c, T=T)
        base, _ = net(x, s, cond, u, uf)
        reach = []
        for tp in range(T):
            pert = cond.clone()
            pert[0, tp] += 10.0
            out, _ = net(x, s, pert, u, uf)
            if not torch.equal(out[0, t], base[0, t]):
                reach.append(abs(tp - t))
        bound = c.n_blocks * c.window
        assert max(reach) <= bound
        # the bound is attained, not just respected
        assert max(reach) == bound

    def test_act_permutation_symmetry(self):
        c = DenoiserConfig()
        net = model(c)
        x, s, cond, u, uf = inputs(c, T=10)
        base, _ = net(x, s, cond, u, uf)
        perm = torch.randperm(c.n_acts, generator=torch.Generator().manual_seed(3))
        with torch.no_grad():
            net.act_clip.weight[:] = net.act_clip.weight[:, perm]
            net.act_frame.weight[:] = net.act_frame.weight[:, perm]
        out, _ = net(x, s, cond, u[:, perm], uf[..., perm])
        torch.testing.assert_close(out, base, rtol=0, atol=1e-12)

    def test_zero_gains_ignore_acts(self):
        c = DenoiserConfig(lambda_c=0.0, lambda_f=0.0)
        net = model(c)
        x, s, cond, u, uf = inputs(c, T=10)
        a, _ = net(x, s, cond, u, uf)
        b, _ = net(x, s, cond, torch.roll(u, 1, -1), torch.roll(uf, 3, -1))
        assert torch.equal(a, b)

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            Denoiser(DenoiserConfig(d_model=10, n_heads=4))


class TestLoss:
    def test_perfect_prediction(self):
        eps = torch.randn(2, 5, 3, dtype=torch.float64)
        _, l_diff, _ = diffusion_losses(eps, eps.clone(), torch.zeros(2, 8), torch.tensor([0, 1]))
        assert l_diff.item() == 0.0

    def test_uniform_logits_cross_entropy(self):
        eps = torch.zeros(4, 5, 3)
        _, _, l_act = diffusion_losses(eps, eps, torch.zeros(4, 8), torch.tensor([0, 3, 5, 7]))
        assert l_act.item() == pytest.approx(math.log(8), rel=1e-6)

    def test_lambda_act_zero(self):
        eps = torch.randn(2, 5, 3)
        hat = torch.randn(2, 5, 3)
        total, l_diff, _ = diffusion_losses(eps, hat, torch.randn(2, 8), torch.tensor([1, 2]),
                                            lambda_act=0.0)
        assert total.item() == l_diff.item()

    def test_seed_frames_down_weighted(self):
        eps = torch.zeros(1, 4, 1, dtype=torch.float64)
        hat = torch.tensor([[[1.0], [0.0], [0.0], [0.0]]], dtype=torch.float64)
        mask = torch.tensor([[True, False, False, False]])
        _, l_diff, _ = diffusion_losses(eps, hat, torch.zeros(1, 8), torch.tensor([0]), mask, 0.1)
        assert l_diff.item() == pytest.approx(0.1 / 3.1)

    def test_micro_gradient_check(self):
        """Central differences (h = 1e-4, float64) for every trainable tensor."""
        c = MICRO
        net = model(c, seed=1)
        T = 4
        x0, s, cond, u, uf = inputs(c, T=T, B=2, seed=2)
        noise = torch.randn(x0.shape, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
        batch = Batch(x0, cond, u, uf, torch.tensor([[True, False, False, False]] * 2))
        sch = NoiseSchedule.linear()

        def objective():
            return loss(net, batch, sch, s, noise)[0]

        net.zero_grad()
        objective().backward()
        h = 1e-4
        worst = 0.0
        for name, p in net.named_parameters():
            analytic = p.grad.detach().numpy().copy()
            numeric = np.zeros_like(analytic)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                with torch.no_grad():
                    flat[i] = old + h
                    up = objective().item()
                    flat[i] = old - h
                    down = objective().item()
                    flat[i] = old
                numeric.reshape(-1)[i] = (up - down) / (2 * h)
            err = rel_error(analytic, numeric)
            worst = max(worst, err)
            assert err < 1e-4, name
        assert worst < 1e-4


class TestSampling:
    def zero_out_model(self, c):
        net = model(c)
        with torch.no_grad():
            net.out.weight.zero_()
            net.out.bias.zero_()
        return TrainedModel(net, NoiseSchedule.linear())

    def test_untrained_sampler_finite(self):
        c = DenoiserConfig()
        tm = self.zero_out_model(c)
        sch = constant_schedule("explain", 16)
        x = sample(tm, np.zeros((16, c.cond_dim)), sch.clip_level, sch.per_frame, infer_steps=20)
        assert x.shape == (16, c.motion_dim) and np.all(np.isfinite(x))

    def test_seed_region_exact(self):
        c = DenoiserConfig()
        tm = TrainedModel(model(c), NoiseSchedule.linear())
        sch = constant_schedule("hint", 16)
        seed = SeedPrefix(np.random.default_rng(0).normal(size=(5, c.motion_dim)))
        x = sample(tm, np.zeros((16, c.cond_dim)), sch.clip_level, sch.per_frame, seed=seed,
                   infer_steps=10)
        np.testing.assert_array_equal(x[:5], seed.frames)

    def test_deterministic(self):
        c = DenoiserConfig()
        tm = TrainedModel(model(c), NoiseSchedule.linear())
        sch = constant_schedule("praise", 12)
        cond = np.random.default_rng(1).normal(size=(12, c.cond_dim))
        a = sample(tm, cond, sch.clip_level, sch.per_frame, infer_steps=10, rng_seed=7)
        b = sample(tm, cond, sch.clip_level, sch.per_frame, infer_steps=10, rng_seed=7)
        d = sample(tm, cond, sch.clip_level, sch.per_frame, infer_steps=10, rng_seed=8)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, d)

    def test_seed_must_be_shorter(self):
        with pytest.raises(ValueError):
            SeedPrefix(np.zeros((4, 2))).mask(4)

    def test_schedule_length_mismatch(self):
        c = DenoiserConfig()
        tm = TrainedModel(model(c), NoiseSchedule.linear())
        sch = constant_schedule("praise", 10)
        with pytest.raises(ValueError):
            sample(tm, np.zeros((12, c.cond_dim)), sch.clip_level, sch.per_frame)


class TestTraining:
    def test_fit_window(self):
        a = np.arange(10)[:, None]
        np.testing.assert_array_equal(fit_window(a, 4, 3)[:, 0], [3, 4, 5, 6])
        np.testing.assert_array_equal(fit_window(a[:3], 5)[:, 0], [0, 1, 2, 2, 2])

    def test_divergence_raises_with_checkpoint(self):
        rng = np.random.default_rng(0)
        ds = MotionDataset(rng.normal(size=(4, 8, 2)), rng.normal(size=(4, 8, 2)),
                           np.zeros((4, 8), dtype=int))
        c = DenoiserConfig(motion_dim=2, audio_dim=1, text_dim=1, d_model=8, n_heads=2, n_blocks=1)
        with pytest.raises(DiffusionTrainingError) as exc:
            train(ds, c, TrainConfig(window_frames=8, steps=200, batch_size=2, lr=1e30,
                                     grad_clip=0.0, momentum=0.0))
        assert exc.value.checkpoint is not None

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            MotionDataset(np.zeros((0, 4, 2)), np.zeros((0, 4, 2)), np.zeros((0, 4)))

    def test_checkpoint_round_trip(self, tmp_path):
        c = DenoiserConfig(d_model=16, n_heads=2)
        tm = TrainedModel(model(c).float(), NoiseSchedule.linear(), 25.0)
        path = save_checkpoint(tm, tmp_path / "m.ckpt")
        back = load_checkpoint(path)
        assert back.config == c and back.fps == 25.0
        for k, v in tm.model.state_dict().items():
            assert torch.equal(v, back.model.state_dict()[k])
        assert save_checkpoint(back, tmp_path / "m2.ckpt").read_bytes() == path.read_bytes()

    def test_bad_checkpoint(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ValueError):
            load_checkpoint(p)

    def test_with_gains(self):
        c = DenoiserConfig()
        tm = TrainedModel(model(c), NoiseSchedule.linear())
        off = with_gains(tm, lambda_c=0.0, lambda_f=0.0)
        assert off.config.lambda_c == 0.0 and tm.config.lambda_c == 1.0


@pytest.mark.slow
class TestToyTask:
    def test_loss_halves(self, toy_models):
        hist = np.array([h[0] for h in toy_models["conditioned"].history])
        assert hist[-100:].mean() <= 0.5 * hist[:20].mean()

    def test_act_head_accuracy(self, toy_models, toy_data):
        assert act_accuracy(toy_models["conditioned"], toy_data[1]) >= 0.8

    def test_amplitude_separates_acts(self, toy_models, toy_data):
        held = toy_data[2]
        amps = {}
        for act in ("explain", "neutral"):
            vals = []
            for k, clip in enumerate(held.clips[:12]):
                cond = np.concatenate([clip.streams["audio"], clip.streams["text"]], axis=1)
                sch = constant_schedule(act, cond.shape[0])
                x = sample(toy_models["conditioned"], cond, sch.clip_level, sch.per_frame,
                           infer_steps=50, rng_seed=k)
                vals.append(np.abs(np.diff(x, axis=0)).mean())
            amps[act] = np.array(vals)
        gap = amps["explain"].mean() - amps["neutral"].mean()
        spread = max(amps["explain"].std(), amps["neutral"].std())
        assert ACTS.index("explain") != ACTS.index("neutral")
        assert gap > 3 * spread
