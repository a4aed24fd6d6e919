import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch.func import functional_call

from uekit.crafting import (
    CraftConfig,
    CurriculumSchedule,
    craft,
    inner_unroll,
    meta_gradient_direct,
    outer_loss,
    parse_epsilon,
    select_targets,
    surrogate_step,
    unroll_gradient_steps,
)
from uekit.datasets import ImageBatch, SplitDataset
from uekit.models import build_model

EPS = 8.0 / 255.0


def brute_force_target(logits, gt, mode):
    """Scan all classes; lowest index wins ties."""
    best, best_score = None, None
    for j in range(len(logits)):
        if j == gt:
            continue
        score = logits[j] if mode == "hard_negative" else -logits[j]
        if best_score is None or score > best_score:
            best, best_score = j, score
    return best


def toy_batch(rng, n=6, k=3, shape=(1, 2, 2), dtype=torch.float64):
    pixels = torch.from_numpy(rng.uniform(0.3, 0.7, size=(n, *shape))).to(dtype)
    labels = torch.from_numpy(rng.integers(0, k, size=n))
    return ImageBatch(pixels, labels)


def toy_model(k=3, shape=(1, 2, 2), seed=0, dtype=torch.float64):
    state = build_model("linear", k, seed=seed, image_shape=shape)
    module = state.module().to(dtype)
    params = {name: p.detach().clone().requires_grad_(True) for name, p in module.named_parameters()}
    return module, params


class TestParseEpsilon:
    def test_exact_rational(self):
        value, text = parse_epsilon("8/255")
        assert value == 8.0 / 255.0
        assert text == "8/255"

    def test_float(self):
        value, text = parse_epsilon(0.05)
        assert value == pytest.approx(0.05)

    def test_zero_rejected(self):
        with pytest.raises(ValueError):
            parse_epsilon("0")
        with pytest.raises(ValueError):
            parse_epsilon(0.0)


class TestSchedule:
    def test_stage_boundaries(self):
        sched = CurriculumSchedule((2, 3, 1))
        assert [sched.stage_of(e) for e in range(6)] == [1, 1, 2, 2, 2, 3]
        assert sched.total_epochs == 6
        assert sched.mode_of(0) == "hard_negative"
        assert sched.mode_of(2) == "random"
        assert sched.mode_of(5) == "most_dissimilar"

    def test_validation(self):
        with pytest.raises(ValueError):
            CurriculumSchedule((0, 1, 1))
        with pytest.raises(ValueError):
            CurriculumSchedule((1, 1, 1), modes=("bogus", "random", "random"))


class TestCraftConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            CraftConfig(alpha=0.0)
        with pytest.raises(ValueError):
            CraftConfig(epsilon=0.0)
        with pytest.raises(ValueError):
            CraftConfig(unroll_steps=-1)
        with pytest.raises(ValueError):
            CraftConfig(bank_mode="magic")

    def test_digest_stable(self):
        assert CraftConfig().digest() == CraftConfig().digest()
        assert CraftConfig().digest() != CraftConfig(alpha=0.2).digest()


class TestSelectTargets:
    def test_hard_negative_example(self):
        t = select_targets(torch.tensor([[2.0, 0.5, 1.5]]), torch.tensor([0]), "hard_negative")
        assert t.tolist() == [2]

    def test_most_dissimilar_example(self):
        t = select_targets(torch.tensor([[2.0, 0.5, 1.5]]), torch.tensor([0]), "most_dissimilar")
        assert t.tolist() == [1]

    def test_two_class_forced(self):
        for mode in ("hard_negative", "most_dissimilar", "random"):
            t = select_targets(torch.tensor([[0.3, 0.9]]), torch.tensor([1]), mode,
                               np.random.default_rng(0))
            assert t.tolist() == [0]

    def test_tie_breaks_to_lowest_index(self):
        logits = torch.tensor([[1.0, 0.5, 0.5, 0.5]])
        assert select_targets(logits, torch.tensor([0]), "hard_negative").tolist() == [1]
        assert select_targets(logits, torch.tensor([0]), "most_dissimilar").tolist() == [1]

    def test_random_mode_valid_and_seeded(self, rng):
        logits = torch.zeros(50, 5)
        gt = torch.from_numpy(np.random.default_rng(0).integers(0, 5, size=50))
        a = select_targets(logits, gt, "random", np.random.default_rng(7))
        b = select_targets(logits, gt, "random", np.random.default_rng(7))
        assert torch.equal(a, b)
        assert (a != gt).all()
        assert a.min() >= 0 and a.max() < 5

    def test_brute_force_agreement(self, rng):
        for _ in range(500):
            k = int(rng.integers(2, 8))
            logits = rng.normal(size=(1, k))
            if rng.uniform() < 0.3:  # force ties
                logits = np.round(logits, 1)
            gt = int(rng.integers(0, k))
            for mode in ("hard_negative", "most_dissimilar"):
                got = select_targets(logits, np.array([gt]), mode).item()
                assert got == brute_force_target(logits[0], gt, mode)

    def test_unknown_mode_and_small_k(self):
        with pytest.raises(ValueError):
            select_targets(torch.zeros(1, 3), torch.tensor([0]), "nearest")
        with pytest.raises(ValueError):
            select_targets(torch.zeros(1, 1), torch.tensor([0]), "hard_negative")


class TestUnroll:
    def test_quadratic_analytic_step(self):
        params = {"theta": torch.tensor(1.0, dtype=torch.float64, requires_grad=True)}
        out = unroll_gradient_steps(params, lambda p: 0.5 * p["theta"] ** 2, alpha=0.1, steps=1)
        assert float(out["theta"].detach()) == pytest.approx(0.9, abs=1e-15)

    def test_zero_steps_identity(self, rng):
        module, params = toy_model()
        batch = toy_batch(rng)
        out = inner_unroll(module, params, batch, torch.zeros_like(batch.pixels), 0.1, 0)
        assert all(torch.equal(out[k], params[k]) for k in params)

    def test_logistic_toy_matches_hand_stepped_oracle(self, rng):
        """Three GD steps on a linear softmax model vs an independent numpy loop."""
        module, params = toy_model(k=3, seed=4)
        batch = toy_batch(rng, n=8, k=3)
        delta = torch.from_numpy(rng.uniform(-EPS, EPS, size=batch.pixels.shape))
        alpha = 0.2
        out = inner_unroll(module, params, batch, delta, alpha, steps=3,
                           second_order=False, clip_inputs=False)

        w = params["head.weight"].detach().numpy().copy()
        b = params["head.bias"].detach().numpy().copy()
        x = (batch.pixels + delta).reshape(len(batch), -1).numpy()
        y = batch.labels.numpy()
        for _ in range(3):
            z = x @ w.T + b
            p = np.exp(z - z.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(y)), y] -= 1.0
            p /= len(y)
            w = w - alpha * (p.T @ x)
            b = b - alpha * p.sum(axis=0)
        np.testing.assert_allclose(out["head.weight"].detach().numpy(), w, atol=1e-6)
        np.testing.assert_allclose(out["head.bias"].detach().numpy(), b, atol=1e-6)

    def test_input_params_untouched(self, rng):
        module, params = toy_model()
        before = {k: v.detach().clone() for k, v in params.items()}
        batch = toy_batch(rng)
        inner_unroll(module, params, batch, torch.zeros_like(batch.pixels), 0.1, 2)
        assert all(torch.equal(params[k].detach(), before[k]) for k in params)


class TestSurrogateStep:
    def test_alpha_zero_unchanged(self, rng):
        module, params = toy_model()
        batch = toy_batch(rng)
        out = surrogate_step(module, params, batch, torch.zeros_like(batch.pixels), 0.0)
        assert all(torch.equal(out[k], params[k]) for k in params)

    def test_equals_single_unroll_step(self, rng):
        module, params = toy_model()
        batch = toy_batch(rng)
        delta = torch.from_numpy(rng.uniform(-EPS, EPS, size=batch.pixels.shape))
        stepped = surrogate_step(module, params, batch, delta, 0.1)
        unrolled = inner_unroll(module, params, batch, delta, 0.1, 1, second_order=False)
        assert all(torch.allclose(stepped[k], unrolled[k].detach(), atol=0) for k in params)

    def test_zero_bank_equals_clean_step(self, rng):
        module, params = toy_model()
        batch = toy_batch(rng)
        stepped = surrogate_step(module, params, batch, torch.zeros_like(batch.pixels), 0.1)
        loss = F.cross_entropy(functional_call(module, params, (batch.pixels,)), batch.labels)
        grads = torch.autograd.grad(loss, list(params.values()))
        manual = {k: v - 0.1 * g for (k, v), g in zip(params.items(), grads)}
        assert all(torch.equal(stepped[k], manual[k].detach()) for k in params)


class TestOuterLoss:
    def test_rejects_target_equal_to_gt(self, rng):
        module, params = toy_model()
        batch = toy_batch(rng)
        with pytest.raises(ValueError):
            outer_loss(module, params, batch, torch.zeros_like(batch.pixels), batch.labels)


class TestMetaGradient:
    def make_problem(self, rng, n=6, k=3):
        module, params = toy_model(k=k, seed=2)
        batch = toy_batch(rng, n=n, k=k)
        bank = torch.from_numpy(rng.uniform(-EPS / 2, EPS / 2, size=(k, 1, 2, 2)))
        raw = torch.from_numpy(rng.integers(0, k - 1, size=n))
        targets = raw + (raw >= batch.labels).long()
        return module, params, batch, bank, targets

    def test_matches_central_finite_differences(self, rng):
        module, params, batch, bank, targets = self.make_problem(rng)
        loss, grad = meta_gradient_direct(module, params, bank, batch, targets,
                                          alpha=0.1, steps=1)

        def loss_at(b):
            value, _ = meta_gradient_direct(module, params, b, batch, targets,
                                            alpha=0.1, steps=1)
            return value

        h = 1e-6
        flat = bank.flatten()
        for idx in range(0, flat.numel(), 3):  # subsample coordinates
            e = torch.zeros_like(flat)
            e[idx] = h
            fd = (loss_at((flat + e).reshape(bank.shape)) -
                  loss_at((flat - e).reshape(bank.shape))) / (2 * h)
            got = float(grad.flatten()[idx])
            assert got == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_first_order_drops_unroll_term(self, rng):
        module, params, batch, bank, targets = self.make_problem(rng)
        _, grad_second = meta_gradient_direct(module, params, bank, batch, targets, 0.1, 1,
                                              second_order=True)
        _, grad_first = meta_gradient_direct(module, params, bank, batch, targets, 0.1, 1,
                                             second_order=False)
        assert not torch.allclose(grad_second, grad_first)

    def test_outer_descent_with_beta_halving(self, rng):
        """A small enough gradient step on the bank cannot increase the outer loss."""
        module, params, batch, bank, targets = self.make_problem(rng)
        loss0, grad = meta_gradient_direct(module, params, bank, batch, targets, 0.1, 1)
        beta = 0.1
        for _ in range(30):
            loss1, _ = meta_gradient_direct(module, params, bank - beta * grad, batch,
                                            targets, 0.1, 1)
            if loss1 <= loss0 + 1e-12:
                break
            beta /= 2
        assert loss1 <= loss0 + 1e-12


def small_craft_data(seed=0):
    rng = np.random.default_rng(seed)
    k, n = 3, 18
    x = torch.from_numpy(rng.uniform(0.2, 0.8, size=(n, 3, 16, 16)).astype(np.float32))
    y = torch.from_numpy(np.arange(n) % k)
    xt = torch.from_numpy(rng.uniform(0.2, 0.8, size=(6, 3, 16, 16)).astype(np.float32))
    yt = torch.from_numpy(np.arange(6) % k)
    return SplitDataset("craft-toy", x, y, xt, yt, class_count=k)


class TestCraft:
    def test_head_mismatch(self):
        data = small_craft_data()
        surrogate = build_model("rn-mini", 5, seed=0, image_shape=data.image_shape)
        with pytest.raises(ValueError):
            craft(CraftConfig(bank_mode="direct"), surrogate, CurriculumSchedule((1, 1, 1)), data)

    @pytest.mark.parametrize("mode", ["direct", "generator"])
    def test_deterministic_bank(self, mode):
        data = small_craft_data()
        surrogate = build_model("rn-mini", 3, seed=0, image_shape=data.image_shape)
        config = CraftConfig(alpha=0.02, beta=3e-3, batch_size=6, seed=5,
                             bank_mode=mode, generator_width=4)
        sched = CurriculumSchedule((1, 1, 1))
        a = craft(config, surrogate, sched, data)
        b = craft(config, surrogate, sched, data)
        assert torch.equal(a.bank.deltas, b.bank.deltas)
        assert torch.equal(a.surrogate_state.params["head.weight"],
                           b.surrogate_state.params["head.weight"])

    @pytest.mark.parametrize("mode", ["direct", "generator"])
    def test_bank_budget_and_log(self, mode):
        data = small_craft_data()
        surrogate = build_model("rn-mini", 3, seed=0, image_shape=data.image_shape)
        config = CraftConfig(alpha=0.02, beta=3e-3, batch_size=6, seed=5,
                             bank_mode=mode, generator_width=4)
        result = craft(config, surrogate, CurriculumSchedule((1, 2, 1)), data)
        assert result.bank.deltas.abs().max() <= config.epsilon + 1e-7
        assert [r.stage for r in result.log.rows] == [1, 2, 2, 3]
        assert all(0 <= r.acc_clean_train <= 1 for r in result.log.rows)

    def test_regression_anchor_degenerates_to_plain_training(self):
        """unroll 0 + beta 0: craft is exactly surrogate SGD on own-class-perturbed
        (here zero-bank, hence clean) data."""
        data = small_craft_data()
        surrogate = build_model("rn-mini", 3, seed=1, image_shape=data.image_shape)
        config = CraftConfig(alpha=0.05, beta=0.0, unroll_steps=0, batch_size=6,
                             seed=9, bank_mode="direct")
        sched = CurriculumSchedule((1, 1, 1))
        result = craft(config, surrogate, sched, data)
        assert (result.bank.deltas == 0).all()

        module = surrogate.module()
        theta = {k: v.detach().clone().requires_grad_(True) for k, v in surrogate.params.items()}
        order = np.random.default_rng([config.seed, 1])
        for _ in range(sched.total_epochs):
            for batch in data.iter_batches(config.batch_size, order):
                pixels = torch.clamp(batch.pixels, 0, 1)
                loss = F.cross_entropy(functional_call(module, theta, (pixels,)), batch.labels)
                grads = torch.autograd.grad(loss, list(theta.values()))
                theta = {k: (v - config.alpha * g).detach().requires_grad_(True)
                         for (k, v), g in zip(theta.items(), grads)}
        for name in theta:
            assert torch.equal(result.surrogate_state.params[name], theta[name].detach()), name

    def test_craft_log_csv_round_trip(self, tmp_path):
        data = small_craft_data()
        surrogate = build_model("rn-mini", 3, seed=0, image_shape=data.image_shape)
        config = CraftConfig(alpha=0.02, beta=1e-3, batch_size=6, seed=0, bank_mode="direct")
        result = craft(config, surrogate, CurriculumSchedule((1, 1, 1)), data)
        path = tmp_path / "log.csv"
        result.log.to_csv(path)
        from uekit.crafting import CraftLog

        back = CraftLog.from_csv(path)
        assert len(back.rows) == 3
        assert back.rows[0].stage == 1
        assert back.rows[-1].acc_clean_train == pytest.approx(
            result.log.rows[-1].acc_clean_train, abs=1e-6)
