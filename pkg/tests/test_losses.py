import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from teamid.losses import (GradientCheckReport, LossConfig, ProxyBank,
                           gradient_check, nearest_proxy, proxy_nca_loss,
                           triplet_loss)

from oracles import proxy_nca_oracle, triplet_loss_oracle


def make_bank(proxies: np.ndarray, dtype=torch.float32) -> ProxyBank:
    bank = ProxyBank(proxies.shape[0], proxies.shape[1]).to(dtype)
    with torch.no_grad():
        bank.proxies.copy_(torch.as_tensor(proxies, dtype=dtype))
    return bank


class TestTripletLoss:
    def test_all_equal_embeddings_give_margin(self):
        emb = torch.ones(4, 3)
        ids = torch.tensor([0, 0, 1, 1])
        cfg = LossConfig(margin_alpha=0.3)
        assert triplet_loss(emb, ids, cfg).item() == pytest.approx(0.3)

    def test_satisfied_margin_gives_zero(self):
        # d_ap = 0, d_an = 4 >= alpha
        emb = torch.tensor([[0.0, 0], [0.0, 0], [2.0, 0], [2.0, 0]])
        ids = torch.tensor([0, 0, 1, 1])
        cfg = LossConfig(margin_alpha=0.3)
        assert triplet_loss(emb, ids, cfg).item() == 0.0

    def test_matches_exhaustive_enumeration(self):
        emb = torch.tensor([[0.0, 0.0], [0.5, 0.1], [1.0, 1.0], [0.9, 1.2]])
        ids = torch.tensor([0, 0, 1, 1])
        for mining in ("batch_hard", "all_valid"):
            cfg = LossConfig(margin_alpha=0.3, mining=mining)
            expected = triplet_loss_oracle(emb.numpy(), ids.tolist(), 0.3,
                                           mining=mining)
            assert triplet_loss(emb, ids, cfg).item() == pytest.approx(expected, abs=1e-6)

    def test_single_identity_errors(self):
        with pytest.raises(ValueError):
            triplet_loss(torch.randn(4, 2), torch.zeros(4, dtype=torch.long),
                         LossConfig())

    def test_nonnegative_and_zero_iff_satisfied(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            emb = torch.as_tensor(rng.normal(size=(8, 4)))
            ids = torch.as_tensor(rng.integers(0, 3, 8))
            if ids.unique().numel() < 2:
                continue
            cfg = LossConfig(margin_alpha=0.2)
            val = triplet_loss(emb, ids, cfg).item()
            oracle = triplet_loss_oracle(emb.numpy(), ids.tolist(), 0.2)
            assert val >= 0.0
            assert (val == 0.0) == (oracle == 0.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        emb = rng.normal(size=(8, 3))
        ids = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        perm = rng.permutation(8)
        cfg = LossConfig(margin_alpha=0.25)
        a = triplet_loss(torch.as_tensor(emb), torch.as_tensor(ids), cfg)
        b = triplet_loss(torch.as_tensor(emb[perm]), torch.as_tensor(ids[perm]), cfg)
        assert a.item() == pytest.approx(b.item(), abs=1e-9)


class TestProxyNca:
    def test_coincident_proxy_far_other_limit(self):
        proxies = np.array([[1.0, 0.0], [-1.0, 0.0]])
        bank = make_bank(proxies)
        emb = torch.tensor([[1.0, 0.0]])
        cfg = LossConfig(proxy_scale=5.0)
        loss = proxy_nca_loss(emb, torch.tensor([0]), bank, cfg)
        # sample on its proxy, the other proxy at distance sqrt(d_far):
        # -log(exp(0) / exp(-d_far)) = -d_far with d_far = (2*5)^2 = 100
        assert loss.item() == pytest.approx(-math.log(math.exp(0) / math.exp(-100.0)), abs=1e-3)
        assert loss.item() == pytest.approx(-100.0, abs=1e-3)

    def test_equidistant_two_proxies_gives_zero(self):
        proxies = np.array([[1.0, 0.0], [0.0, 1.0]])
        bank = make_bank(proxies)
        emb = torch.tensor([[1.0, 1.0]])  # normalized: equidistant
        cfg = LossConfig(proxy_scale=2.0)
        loss = proxy_nca_loss(emb, torch.tensor([0]), bank, cfg)
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        emb = rng.normal(size=(6, 4))
        proxies = rng.normal(size=(3, 4))
        labels = np.array([0, 1, 2, 0, 1, 2])
        bank = make_bank(proxies, dtype=torch.float64)
        cfg = LossConfig(proxy_scale=3.0)
        loss = proxy_nca_loss(torch.as_tensor(emb), torch.as_tensor(labels),
                              bank, cfg)
        expected = proxy_nca_oracle(emb, labels, proxies, 3.0)
        assert loss.item() == pytest.approx(expected, abs=1e-9)

    def test_label_out_of_range_errors(self):
        bank = make_bank(np.eye(2))
        with pytest.raises(ValueError):
            proxy_nca_loss(torch.randn(1, 2), torch.tensor([5]), bank,
                           LossConfig())

    def test_uniform_scaling_keeps_nearest_proxy(self):
        rng = np.random.default_rng(2)
        emb = torch.as_tensor(rng.normal(size=(10, 4)))
        bank = make_bank(rng.normal(size=(5, 4)))
        base = nearest_proxy(emb, bank)
        assert torch.equal(base, nearest_proxy(emb * 123.0, bank))

    def test_loss_decreases_on_separable_toy_problem(self):
        torch.manual_seed(0)
        emb = torch.nn.Parameter(torch.randn(12, 4, dtype=torch.float64))
        labels = torch.arange(12) % 3
        bank = ProxyBank(3, 4, seed=0).double()
        cfg = LossConfig(proxy_scale=3.0)
        opt = torch.optim.SGD([emb] + list(bank.parameters()), lr=0.01)
        losses = []
        for _ in range(50):
            opt.zero_grad()
            loss = proxy_nca_loss(emb, labels, bank, cfg)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))


class TestGradientCheck:
    def test_triplet_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        cfg = LossConfig(margin_alpha=0.3, mining="batch_hard")
        ids = torch.tensor([0, 0, 1, 1, 2, 2])

        def fn(embeddings):
            return triplet_loss(embeddings, ids, cfg)

        report = gradient_check(
            fn, {"embeddings": torch.as_tensor(rng.normal(size=(6, 3)))})
        assert isinstance(report, GradientCheckReport)
        assert report.passed, report.max_rel_error

    def test_proxynca_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        cfg = LossConfig(proxy_scale=3.0)
        labels = torch.tensor([0, 1, 2, 0])

        def fn(embeddings, proxies):
            bank = ProxyBank(3, 4).double()
            del bank.proxies
            bank.proxies = proxies
            return proxy_nca_loss(embeddings, labels, bank, cfg)

        report = gradient_check(
            fn, {"embeddings": torch.as_tensor(rng.normal(size=(4, 4))),
                 "proxies": torch.as_tensor(rng.normal(size=(3, 4)))})
        assert report.passed, report.per_input

    def test_dead_hinge_gives_exact_zero_gradient(self):
        emb = torch.tensor([[0.0, 0], [0.0, 0], [5.0, 0], [5.0, 0]],
                           requires_grad=True)
        ids = torch.tensor([0, 0, 1, 1])
        loss = triplet_loss(emb, ids, LossConfig(margin_alpha=0.3))
        grad, = torch.autograd.grad(loss, emb)
        assert torch.count_nonzero(grad) == 0
