"""Acceptance gate: the seven desk-scale criteria, one test each.

Every test prints a single `criterion N (...): PASS` line on success; a
failure raises with the measured numbers. Full-scale benchmark runs (real
Cars196 / VeRi-776) are deliberately not part of this suite.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from teamid.data import generate_synthetic
from teamid.losses import LossConfig, ProxyBank, gradient_check, proxy_nca_loss, \
    triplet_loss
from teamid.metrics import ClusterAssignment, map_cmc, nmi, recall_at_k
from teamid.model import (CBAM, AttentionConfig, GlobalAttention,
                          ModelDescriptor, build_model, embed, parameter_count)
from teamid.pipeline import (ablation_nmi, build_team, identify,
                             routing_accuracy)
from teamid.teaming import add_expert, ensemble_embed, route

from oracles import (ap_oracle, cbam_oracle, global_attention_oracle,
                     map_cmc_oracle, nmi_oracle, recall_at_k_oracle)


def _report(n, label):
    print(f"\ncriterion {n} ({label}): PASS")


class TestCriterion1MetricOracles:
    def test_metric_kernels_match_oracles(self):
        rng = np.random.default_rng(0)
        t0 = time.time()
        for trial in range(500):
            n = int(rng.integers(4, 21))
            labels = rng.integers(0, max(2, n // 3), size=n)
            predicted = rng.integers(0, max(2, n // 4), size=n)
            got = nmi(ClusterAssignment(predicted=predicted, truth=labels))
            assert abs(got - nmi_oracle(predicted, labels)) < 1e-9

            emb = rng.normal(size=(n, 4))
            if len(set(labels.tolist())) >= 2 and \
                    all((labels == c).sum() >= 2 for c in set(labels.tolist())):
                ks = [1, 2, 4]
                got_r = recall_at_k(emb, labels, ks)
                exp_r = recall_at_k_oracle(emb, labels, ks)
                for k in ks:
                    assert abs(got_r[k] - exp_r[k]) < 1e-9

            nq = int(rng.integers(2, 8))
            q = rng.normal(size=(nq, 4))
            g = emb
            qids = rng.integers(0, 3, size=nq)
            gids = rng.integers(0, 3, size=n)
            qc = rng.integers(0, 3, size=nq)
            gc = rng.integers(0, 3, size=n)
            gids[0], gc[0] = qids[0], qc[0] + 1  # at least one valid query
            got_m = map_cmc(q, g, qids, gids, qc, gc, protocol="veri776")
            exp_map, exp_cmc = map_cmc_oracle(q, g, qids, gids, qc, gc,
                                              protocol="veri776")
            assert abs(got_m.map_score - exp_map) < 1e-9
            assert np.all(np.abs(got_m.cmc - exp_cmc) < 1e-9)
        elapsed = time.time() - t0
        assert elapsed < 60, f"metric oracle sweep took {elapsed:.1f}s"
        _report(1, "metric-oracle equivalence, 500 instances")


class TestCriterion2Gradients:
    def test_loss_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        worst = 0.0
        for trial in range(50):
            n = int(rng.integers(4, 9))
            ids = torch.as_tensor(
                np.concatenate([rng.integers(0, 3, size=n - 4), [0, 0, 1, 1]]))
            emb = torch.as_tensor(rng.normal(size=(n, 3)))
            if trial % 2 == 0:
                cfg = LossConfig(margin_alpha=0.3,
                                 mining="batch_hard" if trial % 4 == 0
                                 else "all_valid")
                report = gradient_check(
                    lambda embeddings: triplet_loss(embeddings, ids, cfg),
                    {"embeddings": emb})
            else:
                cfg = LossConfig(proxy_scale=3.0)
                labels = torch.as_tensor(rng.integers(0, 3, size=n))

                def fn(embeddings, proxies):
                    bank = ProxyBank(3, 3).double()
                    del bank.proxies
                    bank.proxies = proxies
                    return proxy_nca_loss(embeddings, labels, bank, cfg)

                report = gradient_check(
                    fn, {"embeddings": emb,
                         "proxies": torch.as_tensor(rng.normal(size=(3, 3)))})
            worst = max(worst, report.max_rel_error)
            assert report.passed, (trial, report.per_input)
        assert worst < 1e-4
        _report(2, f"gradient checks, 50 instances, max rel err {worst:.2e}")


class TestCriterion3AttentionInvariants:
    def test_masks_zero_case_and_dense_oracle(self):
        torch.manual_seed(0)
        ga = GlobalAttention(8).double()
        cbam = CBAM(8, reduction=4, spatial_kernel=7).double()
        for _ in range(20):
            x = torch.randn(1, 8, 4, 4, dtype=torch.float64) * 2

            y = ga(x)
            mask = y / torch.where(x == 0, torch.ones_like(x), x)
            inside = mask[x != 0]
            assert torch.all(inside > 0) and torch.all(inside < 1)

            expected = global_attention_oracle(
                x[0].numpy(),
                ga.conv1.weight.detach().numpy(),
                ga.conv1.bias.detach().numpy(),
                ga.conv2.weight.detach().numpy(),
                ga.conv2.bias.detach().numpy())
            assert np.allclose(y[0].detach().numpy(), expected, atol=1e-6)

            yc = cbam(x)
            ratio = (yc / x)[x != 0]
            assert torch.all(ratio.abs() < 1) and torch.all(ratio.abs() > 0)
            expected_c = cbam_oracle(
                x[0].numpy(),
                cbam.mlp[0].weight.detach().numpy()[:, :, 0, 0],
                cbam.mlp[2].weight.detach().numpy()[:, :, 0, 0],
                cbam.spatial.weight.detach().numpy(), kernel=7)
            assert np.allclose(yc[0].detach().numpy(), expected_c, atol=1e-6)

        with torch.no_grad():
            for p in ga.parameters():
                p.zero_()
        x = torch.randn(2, 8, 5, 5, dtype=torch.float64)
        assert torch.equal(ga(x), x / 2)
        _report(3, "attention invariants + dense oracle at 1e-6")


class TestCriterion4StructuralAudit:
    def test_attention_placement_and_size(self):
        first = build_model(ModelDescriptor(attention=AttentionConfig(
            cbam_placement="first_block")))
        cbam_stages = {name.split(".")[1]
                       for name, _ in first.named_parameters()
                       if name.startswith("cbams.")}
        assert cbam_stages == {"0"}, cbam_stages
        assert not any(isinstance(m, torch.nn.Linear) for m in first.modules())

        count = parameter_count(build_model(ModelDescriptor()))
        assert count < 12_000_000
        assert abs(count - 11_000_000) / 11_000_000 < 0.05
        _report(4, f"structural audit, {count:,} params")


class TestCriterion5TeamingInvariants:
    def test_sparsity_onehot_counts_noninterference(self, tmp_path):
        from tests_support_team import build_bench_registry

        view, registry = build_bench_registry(tmp_path)
        samples = view.split("query") + view.split("gallery")

        for s in samples:
            decision = route(registry, s)
            by_dim = {}
            for eid, w in decision.weights.items():
                d = registry.expert(eid).subspace.dimension
                by_dim[d] = by_dim.get(d, 0) + (w > 0)
            assert all(v <= 1 for v in by_dim.values())

        s = samples[0]
        d = route(registry, s)
        assert len(d.selected) == 1
        direct = embed(registry.load_expert(d.selected[0]), [s],
                       normalize=False)[0]
        assert np.array_equal(ensemble_embed(registry, s, d), direct)

        registry.forward_counts.clear()
        for s in samples:
            ensemble_embed(registry, s, route(registry, s))
        assert sum(registry.forward_counts.values()) == len(samples)

        from tests_support_team import make_extra_expert
        unaffected = [s for s in samples if s.brand_id != 3]
        before = [ensemble_embed(registry, s, route(registry, s))
                  for s in unaffected]
        grown = add_expert(registry, make_extra_expert(tmp_path))
        after = [ensemble_embed(grown, s, route(grown, s))
                 for s in unaffected]
        for a, b in zip(before, after):
            assert np.array_equal(a, b)
        _report(5, "teaming invariants on 4-brand benchmark")


@pytest.mark.slow
class TestCriterion6DeskEndToEnd:
    def test_gated_team_beats_thresholds(self, tmp_path):
        view = generate_synthetic(4, 5, 8, seed=7, holdout_ids_per_brand=1)
        registry, mono = build_team(view, tmp_path, seed=0, epochs=20,
                                    reference_mode=True)

        held_out = view.split("query") + view.split("gallery")
        routing = routing_accuracy(registry, held_out)
        teamed = identify(registry, view.split("query"), view.split("gallery"))

        q = embed(mono.model, view.split("query"))
        g = embed(mono.model, view.split("gallery"))
        mono_res = map_cmc(
            q, g,
            np.array([s.identity_id for s in view.split("query")]),
            np.array([s.identity_id for s in view.split("gallery")]))
        # comparison is reported, not thresholded
        print(f"\nmonolithic comparison: R@1 {mono_res.cmc[0]:.3f} "
              f"mAP {mono_res.map_score:.3f} | teamed R@1 {teamed.cmc[0]:.3f} "
              f"mAP {teamed.map_score:.3f} | routing {routing:.3f}")
        assert routing >= 0.95, f"routing accuracy {routing:.3f} < 0.95"
        assert teamed.cmc[0] >= 0.90, f"teamed R@1 {teamed.cmc[0]:.3f} < 0.90"
        _report(6, f"desk e2e, routing {routing:.3f}, R@1 {teamed.cmc[0]:.3f}")


@pytest.mark.slow
class TestCriterion7AblationDirection:
    def test_last_stage_attention_underperforms_first(self):
        rows = []
        for seed in (0, 1, 2):
            first = ablation_nmi("first_block", seed)
            last = ablation_nmi("last_block", seed)
            rows.append((seed, first, last))
            assert last < first, \
                f"seed {seed}: last-stage NMI {last:.3f} >= first-stage {first:.3f}"
        detail = ", ".join(f"s{s}: {f:.3f}>{l:.3f}" for s, f, l in rows)
        _report(7, f"ablation direction, {detail}")
