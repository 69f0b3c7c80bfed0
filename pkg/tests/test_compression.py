import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aligncompress.autodiff import Parameter
from aligncompress.compression import (
    ADDITIVE,
    GLOBAL,
    GROUP_SPARSITY,
    CompressionPlan,
    adapter_indices,
    attach_group_adapter,
    attach_group_adapters,
    compress,
    fold_adapters,
    group_sparsity_compress,
    group_sparsity_regularizer,
    magnitude_prune,
    prune_adapter_columns,
    rewind_compress,
)
from aligncompress.errors import ConfigurationError, DegenerateModelError, DomainError
from aligncompress.harness.datasets import gen_blobs
from aligncompress.losses import CE, MSE, LossBundle
from aligncompress.models import Dense, Network, ReLU, build_classifier, build_segmenter
from aligncompress.training import TrainSchedule
from aligncompress.weighting import WeightingConfig


def vector_net(w):
    w = np.asarray(w, float).reshape(1, -1)
    net = Network([Dense(w.shape[1], 1)], (w.shape[1],), 1)
    net.params = {"0.weight": Parameter(w, prunable=True), "0.bias": Parameter(np.zeros(1))}
    return net


def survivors(net):
    return sum(int(np.count_nonzero(p.mask)) for p in net.prunable().values())


class TestMagnitudePrune:
    def test_smallest_magnitudes(self):
        net = vector_net([0.1, -0.5, 0.3, 0.05])
        magnitude_prune(net, 0.5)
        np.testing.assert_array_equal(net.params["0.weight"].mask, [[0, 1, 1, 0]])
        np.testing.assert_array_equal(net.params["0.weight"].value, [[0, -0.5, 0.3, 0]])

    def test_two_steps_on_100(self):
        net = vector_net(np.arange(1, 101) / 100.0)
        magnitude_prune(net, 0.2)
        assert survivors(net) == 80
        magnitude_prune(net, 0.2)
        assert survivors(net) == 64
        assert net.sparsity() == pytest.approx(0.36)

    def test_tie_rule(self):
        net = vector_net(np.ones(7))
        magnitude_prune(net, 0.5)
        np.testing.assert_array_equal(net.params["0.weight"].mask, [[0, 0, 0, 1, 1, 1, 1]])

    def test_biases_untouched(self):
        net = build_classifier(2, [8], 4, seed=1)
        for p in net.params.values():
            if not p.prunable:
                p.value[:] = 1e-9
        magnitude_prune(net, 0.5)
        for p in net.params.values():
            if not p.prunable:
                assert np.all(p.mask == 1)

    @pytest.mark.parametrize("f", [0.0, 1.0, -0.2, 1.5])
    def test_domain(self, f):
        with pytest.raises(DomainError):
            magnitude_prune(vector_net([1.0, 2.0]), f)

    def test_global_scope_counts_across_layers(self):
        net = build_classifier(2, [8], 4, seed=2)
        total = sum(p.mask.size for p in net.prunable().values())
        magnitude_prune(net, 0.5, GLOBAL)
        assert survivors(net) == total - math.floor(0.5 * total)
        cut = max(np.abs(p.value[p.mask == 0]).max(initial=0) for p in net.prunable().values())
        kept = min(np.abs(p.value[p.mask == 1]).min() for p in net.prunable().values())
        assert cut <= kept

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 8))
    def test_sparsity_arithmetic(self, seed, k):
        net = build_classifier(2, [16, 16], 4, seed=seed)
        groups = len(net.prunable())
        total = sum(p.mask.size for p in net.prunable().values())
        prev = {n: p.mask.copy() for n, p in net.prunable().items()}
        for _ in range(k):
            magnitude_prune(net, 0.2)
            for n, p in net.prunable().items():
                assert np.all(p.mask <= prev[n])  # masks only ever lose entries
                prev[n] = p.mask.copy()
        expected = 1 - 0.8 ** k
        # floor rounding keeps at most one extra weight per group per step
        assert expected - k * groups / total - 1e-12 <= net.sparsity() <= expected + 1e-12


def tiny_task():
    ds = gen_blobs(3, 20, spread=0.3, seed=0)
    ref = build_classifier(2, [8], 3, seed=0)
    return ds, ref


class TestRewind:
    def test_zero_steps_is_identity(self):
        ds, ref = tiny_task()
        plan = CompressionPlan(num_steps=0)
        net, logs = rewind_compress(ref, plan, LossBundle((CE,)), WeightingConfig(),
                                    TrainSchedule(epochs=5), ds.train, ds.eval)
        assert logs == []
        x = ds.eval_inputs
        assert net(x).tobytes() == ref(x).tobytes()

    @pytest.mark.parametrize("steps,expected", [(3, 0.488), (8, 0.832)])
    def test_sparsity_after_steps(self, steps, expected):
        ds, _ = tiny_task()
        ref = build_classifier(2, [64, 64], 3, seed=0)
        plan = CompressionPlan(num_steps=steps, finetune_epochs_per_step=0)
        net, logs = rewind_compress(ref, plan, LossBundle((CE,)), WeightingConfig(),
                                    TrainSchedule(), ds.train)
        assert len(logs) == steps
        assert net.sparsity() == pytest.approx(expected, abs=2e-3)
        assert [r["sparsity"] for r in logs] == sorted(r["sparsity"] for r in logs)

    def test_masks_monotone_and_logs(self):
        ds, ref = tiny_task()
        plan = CompressionPlan(num_steps=3, finetune_epochs_per_step=2)
        net, logs = rewind_compress(ref, plan, LossBundle((CE, MSE)), WeightingConfig(),
                                    TrainSchedule(batch_size=16), ds.train, ds.eval)
        assert {"step", "sparsity", "accuracy", "cie_count", "CE", "MSE"} <= set(logs[-1])
        for p in net.prunable().values():
            assert np.all(p.value[p.mask == 0] == 0)

    def test_additive_schedule(self):
        ds, _ = tiny_task()
        ref = build_classifier(2, [32], 3, seed=0)
        plan = CompressionPlan(num_steps=3, finetune_epochs_per_step=0, schedule=ADDITIVE)
        net, _ = rewind_compress(ref, plan, LossBundle((CE,)), WeightingConfig(),
                                 TrainSchedule(), ds.train)
        assert net.sparsity() == pytest.approx(0.6, abs=0.02)

    def test_deterministic(self):
        ds, ref = tiny_task()
        plan = CompressionPlan(num_steps=2, finetune_epochs_per_step=2)
        run = lambda: compress(ref, plan, LossBundle((CE, MSE)), WeightingConfig("random"),
                               TrainSchedule(batch_size=16), ds.train, seed=3)[0]
        assert run()(ds.eval_inputs).tobytes() == run()(ds.eval_inputs).tobytes()


class TestAdapters:
    def test_identity_adapter(self):
        net = build_classifier(3, [6, 5], 4, seed=1)
        adapted = attach_group_adapters(net, [0, 2])
        assert [s.kind for s in adapted.layers].count("group_adapter") == 2
        x = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_allclose(adapted(x), net(x), rtol=0, atol=1e-12)

    def test_double_scales_linear_output(self):
        net = build_classifier(3, [], 2, seed=1)
        adapted = attach_group_adapter(net, 0)
        adapted.params["1.A"].value[:] = 2 * np.eye(2)
        x = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_allclose(adapted(x), 2 * net(x), rtol=1e-14)

    def test_hand_product(self):
        gen = np.random.default_rng(2)
        W, A = gen.normal(size=(2, 2)), gen.normal(size=(2, 2))
        net = Network([Dense(2, 2)], (2,), 2)
        net.params = {"0.weight": Parameter(W.copy(), prunable=True), "0.bias": Parameter(np.zeros(2))}
        adapted = attach_group_adapter(net, 0)
        adapted.params["1.A"].value[:] = A
        X = gen.normal(size=(3, 2))
        # weights are stored [out, in], so the layer is X @ W.T
        np.testing.assert_allclose(adapted(X), X @ W.T @ A, rtol=1e-13)

    def test_bad_host(self):
        with pytest.raises(ConfigurationError):
            attach_group_adapter(build_classifier(2, [4], 2), 1)


class TestRegularizer:
    def test_identity(self):
        v, g = group_sparsity_regularizer(np.eye(3))
        assert v == 3.0
        np.testing.assert_array_equal(g, np.eye(3))

    def test_pythagoras(self):
        A = np.zeros((2, 2))
        A[:, 1] = [3, 4]
        v, g = group_sparsity_regularizer(A)
        assert v == 5.0
        np.testing.assert_allclose(g[:, 1], [0.6, 0.8])
        assert np.all(g[:, 0] == 0)

    def test_zero(self):
        v, g = group_sparsity_regularizer(np.zeros((3, 3)))
        assert v == 0.0 and np.all(g == 0)


def random_adapter_net(seed, conv=False):
    gen = np.random.default_rng(seed)
    if conv:
        base = build_segmenter(2, [4, 3], 2, 6, 6, seed=seed)
        adapted = attach_group_adapters(base, [0, 2])
    else:
        base = build_classifier(3, [5, 4], 3, seed=seed)
        adapted = attach_group_adapters(base, [0, 2, 4])
    for k in adapter_indices(adapted):
        p = adapted.params[f"{k}.A"]
        p.value[:] = gen.normal(size=p.value.shape)
    for name, p in adapted.params.items():
        if name.endswith("bias"):
            p.value[:] = gen.normal(size=p.value.shape)
    return adapted, gen


class TestFold:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("conv", [False, True])
    def test_fold_equivalence(self, seed, conv):
        adapted, gen = random_adapter_net(seed, conv)
        folded, removed = fold_adapters(adapted)
        assert not adapter_indices(folded)
        assert sum(removed) == 0
        x = gen.normal(size=(4, *adapted.input_shape))
        np.testing.assert_allclose(folded(x), adapted(x), rtol=0, atol=1e-9)

    def test_zero_column_drops_channel(self):
        net = build_classifier(3, [5], 3, seed=4)
        adapted = attach_group_adapter(net, 0)
        adapted.params["1.A"].value[:, 2] = 0
        folded, removed = fold_adapters(adapted)
        assert removed == [1]
        assert folded.layers[0].n_out == 4 and folded.layers[2].n_in == 4
        x = np.random.default_rng(0).normal(size=(6, 3))
        np.testing.assert_allclose(folded(x), adapted(x), atol=1e-12)

    def test_zero_column_without_drop_is_bias_only(self):
        net = build_classifier(3, [5], 3, seed=4)
        adapted = attach_group_adapter(net, 0)
        adapted.params["1.A"].value[:, 2] = 0
        folded, _ = fold_adapters(adapted, drop=False)
        assert np.all(folded.params["0.weight"].value[2] == 0)
        assert folded.params["0.bias"].value[2] == 0

    def test_all_columns_pruned(self):
        adapted = attach_group_adapter(build_classifier(3, [5], 3), 0)
        adapted.params["1.A"].value[:] = 0
        with pytest.raises(DegenerateModelError):
            fold_adapters(adapted)

    def test_relative_column_threshold(self):
        adapted = attach_group_adapter(build_classifier(3, [4], 3), 0)
        adapted.params["1.A"].value[:] = np.diag([1.0, 1.0, 1.0, 1e-4])
        assert prune_adapter_columns(adapted.copy(), 0.0) == {1: []}
        assert prune_adapter_columns(adapted, 1e-2) == {1: [3]}


class TestGroupSparsityCompress:
    def test_defaults(self):
        plan = CompressionPlan()
        assert plan.lam == 2e-4 and plan.lr_ratio == 0.01

    def test_threshold_zero_fold_identity(self):
        ds, ref = tiny_task()
        plan = CompressionPlan(method=GROUP_SPARSITY, finetune_epochs_per_step=2, column_threshold=0.0)
        folded, info = group_sparsity_compress(ref, [0], plan, LossBundle((CE, MSE)), WeightingConfig(),
                                               TrainSchedule(batch_size=16), ds.train, seed=0)
        assert info["removed_channels"] == [0]
        x = ds.eval_inputs
        np.testing.assert_allclose(folded(x), info["adapter_net"](x), atol=1e-9)

    def test_strong_penalty_removes_channels(self):
        ds, _ = tiny_task()
        ref = build_classifier(2, [16], 3, seed=0)
        plan = CompressionPlan(method=GROUP_SPARSITY, finetune_epochs_per_step=20, lam=0.5,
                               lr_ratio=1.0, column_threshold=0.5)
        folded, info = group_sparsity_compress(ref, [0], plan, LossBundle((CE,)), WeightingConfig(),
                                               TrainSchedule(lr=0.05, batch_size=16), ds.train)
        assert info["removed_channels"][0] > 0
        assert folded.layers[0].n_out == 16 - info["removed_channels"][0]

    def test_compress_dispatch(self):
        ds, ref = tiny_task()
        plan = CompressionPlan(method=GROUP_SPARSITY, finetune_epochs_per_step=1)
        net, logs = compress(ref, plan, LossBundle((CE,)), WeightingConfig(),
                             TrainSchedule(batch_size=16), ds.train, ds.eval)
        assert not adapter_indices(net)
        assert "cie_count" in logs[0]

    def test_adapter_lr_ratio(self):
        ds, ref = tiny_task()
        plan = CompressionPlan(method=GROUP_SPARSITY, finetune_epochs_per_step=1, lr_ratio=0.01)
        _, info = group_sparsity_compress(ref, [0], plan, LossBundle((CE,)), WeightingConfig(),
                                          TrainSchedule(batch_size=16), ds.train)
        assert info["adapter_net"].params["1.A"].lr_scale == 0.01


def test_plan_validation():
    with pytest.raises(ConfigurationError):
        CompressionPlan(method="svd")
    with pytest.raises(DomainError):
        CompressionPlan(per_step_fraction=1.0)
    with pytest.raises(DomainError):
        CompressionPlan(schedule=ADDITIVE, num_steps=6)
