import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from aligncompress.autodiff import Parameter
from aligncompress.errors import DomainError, MissingClassError
from aligncompress.metrics import (
    MisalignmentReport,
    Predictions,
    build_report,
    count_cie_u,
    count_cies,
    count_cips,
    dice,
    fairness_metrics,
    max_min_gap,
    mean_dice,
    read_pgm,
    saliency,
    soft_iou,
    write_class_table,
    write_index_list,
    write_pgm,
)
from aligncompress.models import Dense, Network, build_classifier, build_segmenter


def random_records(seed, n=1000, C=5, p_flip=0.2):
    gen = np.random.default_rng(seed)
    y = gen.integers(0, C, n)
    r = np.where(gen.random(n) < 0.7, y, gen.integers(0, C, n))
    c = np.where(gen.random(n) < p_flip, gen.integers(0, C, n), r)
    return Predictions(y, r, c)


class TestCIE:
    def test_identity(self):
        assert count_cies(Predictions([0, 1, 2], [0, 1, 2], [0, 1, 2])) == (0, [])

    def test_single_flip(self):
        assert count_cies(Predictions([0, 1, 2], [0, 1, 2], [0, 2, 2])) == (1, [1])

    def test_brute_force_seed_11(self):
        rec = random_records(11)
        assert count_cies(rec) == oracles.cies(rec.labels, rec.reference, rec.compressed)

    def test_cie_u_hand(self):
        rec = Predictions([1, 1], [0, 1], [1, 0])
        assert count_cies(rec)[0] == 2
        assert count_cie_u(rec) == (1, [1])

    def test_perfect_reference(self):
        rec = random_records(2)
        rec = Predictions(rec.labels, rec.labels, rec.compressed)
        assert count_cie_u(rec) == count_cies(rec)

    def test_cie_u_brute_force(self):
        rec = random_records(12)
        assert count_cie_u(rec) == oracles.cie_us(rec.labels, rec.reference, rec.compressed)

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            Predictions([0, 1], [0, 1], [0])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_symmetry_and_subset(self, seed):
        rec = random_records(seed, n=200, C=3, p_flip=0.4)
        swapped = Predictions(rec.labels, rec.compressed, rec.reference)
        assert count_cies(rec) == count_cies(swapped)
        _, cie = count_cies(rec)
        _, cie_u = count_cie_u(rec)
        assert set(cie_u) <= set(cie)


class TestCIP:
    def test_identical(self):
        m = np.zeros((2, 16, 16), int)
        assert count_cips(Predictions(m, m, m)).count == 0

    def test_three_flips(self):
        r = np.zeros((1, 16, 16), int)
        c = r.copy()
        c[0, [0, 5, 9], [3, 3, 15]] = 1
        out = count_cips(Predictions(r, r, c))
        assert out.count == 3 and out.per_image == [3]
        assert out.u_count == 3

    def test_brute_force_seed_3(self):
        gen = np.random.default_rng(3)
        y = gen.integers(0, 2, (10, 16, 16))
        r = np.where(gen.random(y.shape) < 0.9, y, 1 - y)
        c = np.where(gen.random(y.shape) < 0.05, 1 - r, r)
        out = count_cips(Predictions(y, r, c))
        assert (out.count, out.per_image) == oracles.cips(r, c)

    def test_rank_checked(self):
        with pytest.raises(DomainError):
            count_cips(Predictions([0, 1], [0, 1], [0, 1]))


class TestFairness:
    def test_perfect(self):
        y = np.array([0, 1, 2, 0, 1, 2])
        f = fairness_metrics(Predictions(y, y, y))
        assert f.error_compressed == [0.0, 0.0, 0.0] and f.gap_compressed == 0.0
        assert f.accuracy_delta == [0.0, 0.0, 0.0]

    def test_gap(self):
        assert max_min_gap([0.1, 0.4]) == pytest.approx(0.3)

    def test_hand_case(self):
        y = np.array([0] * 10 + [1] * 5)
        r = y.copy()
        c = y.copy()
        c[0] = 1  # class 0 error 0.1
        c[10:12] = 0  # class 1 error 0.4
        f = fairness_metrics(Predictions(y, r, c), 2)
        assert f.error_compressed == pytest.approx([0.1, 0.4])
        assert f.gap_compressed == pytest.approx(0.3)
        assert f.accuracy_delta == pytest.approx([0.1, 0.4])

    def test_missing_class(self):
        with pytest.raises(MissingClassError) as exc:
            fairness_metrics(Predictions([0, 0, 2], [0, 0, 2], [0, 0, 2]), 3)
        assert exc.value.classes == [1]

    def test_brute_force(self):
        rec = random_records(4)
        f = fairness_metrics(rec, 5)
        errs = oracles.class_errors(rec.labels, rec.compressed, 5)
        assert f.error_compressed == pytest.approx(errs, abs=1e-15)
        assert f.gap_compressed == pytest.approx(oracles.gap(errs), abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.permutations(range(5)))
    def test_gap_relabel_invariant(self, seed, perm):
        rec = random_records(seed, n=300)
        p = np.array(perm)
        moved = Predictions(p[rec.labels], p[rec.reference], p[rec.compressed])
        assert fairness_metrics(moved, 5).gap_compressed == pytest.approx(
            fairness_metrics(rec, 5).gap_compressed, abs=1e-15)


class TestSoftIoU:
    def test_identity(self):
        a = np.array([0.0, 0.3, 1.0])
        assert soft_iou(a, a) == 1.0

    def test_disjoint(self):
        assert soft_iou([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_arithmetic(self):
        assert soft_iou([0.2, 0.8], [0.4, 0.4]) == pytest.approx(0.5, abs=1e-15)

    def test_mean_mode(self):
        assert soft_iou([0.2, 0.8, 0.0], [0.4, 0.4, 0.0], mode="mean") == pytest.approx((0.5 + 0.5 + 1) / 3)

    def test_negative(self):
        with pytest.raises(DomainError):
            soft_iou([-0.1, 1.0], [0.1, 1.0])

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, 6, elements=st.floats(0, 10)),
           arrays(np.float64, 6, elements=st.floats(0, 10)),
           st.floats(1e-3, 1e3))
    def test_properties(self, a, b, k):
        assert soft_iou(a, b) == soft_iou(b, a)
        assert 0.0 <= soft_iou(a, b) <= 1.0
        if a.any():
            assert soft_iou(a, a) == 1.0
            assert soft_iou(k * a, k * a) == 1.0


class TestDice:
    def test_identical(self):
        m = np.array([[1, 0], [1, 1]])
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        assert dice([1, 1, 0, 0], [0, 0, 1, 1]) == 0.0

    def test_arithmetic(self):
        p = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0])
        t = np.array([0, 1, 1, 1, 1, 1, 1, 0, 0])
        assert dice(p, t) == pytest.approx(0.6, abs=1e-15)

    def test_non_binary(self):
        with pytest.raises(DomainError):
            dice([0, 2], [0, 1])

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.int64, (4, 4), elements=st.integers(0, 1)),
           arrays(np.int64, (4, 4), elements=st.integers(0, 1)))
    def test_symmetric(self, a, b):
        assert dice(a, a) == 1.0
        assert dice(a, b) == dice(b, a) == pytest.approx(oracles.dice(a, b))

    def test_mean_is_per_image(self):
        p = np.array([[[1, 1]], [[0, 0]]])
        t = np.array([[[1, 1]], [[1, 0]]])
        assert mean_dice(p, t) == 0.5


class TestSaliency:
    def linear(self, w):
        w = np.asarray(w, float)
        net = Network([Dense(len(w), 2)], (len(w),), 2)
        net.params = {"0.weight": Parameter(np.stack([w, np.zeros_like(w)]), prunable=True),
                      "0.bias": Parameter(np.zeros(2))}
        return net

    def test_linear_map(self):
        s = saliency(self.linear([1.0, -4.0, 2.0]), [1.0, 1.0, 1.0], cls=0)
        np.testing.assert_allclose(s, [0.25, 1.0, 0.5])

    def test_dead_input(self):
        net = build_classifier(3, [6], 3, seed=1)
        net.params["0.weight"].value[:, 1] = 0
        s = saliency(net, [0.3, -1.0, 2.0])
        assert s[1] == 0.0 and s.max() == 1.0

    def test_matches_finite_differences(self):
        net = build_classifier(4, [8, 8], 3, seed=5)
        x = np.random.default_rng(5).normal(size=4)
        cls = int(np.argmax(net(x[None])))
        h = 1e-6
        fd = np.empty(4)
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            fd[i] = (net((x + e)[None])[0, cls] - net((x - e)[None])[0, cls]) / (2 * h)
        fd = np.abs(fd) / np.abs(fd).max()
        np.testing.assert_allclose(saliency(net, x), fd, atol=1e-7)

    def test_image_map_shape(self):
        net = build_segmenter(1, [3], 2, 8, 8, seed=0)
        s = saliency(net, np.random.default_rng(0).normal(size=(1, 8, 8)))
        assert s.shape == (8, 8) and s.max() == 1.0


class TestReport:
    def test_identity(self):
        net = build_classifier(2, [8], 3, seed=0)
        X = np.random.default_rng(0).normal(size=(60, 2))
        y = np.arange(60) % 3
        rep = build_report(net, net.copy(), X, y)
        assert rep.cie_count == 0 and rep.cie_u_count == 0
        assert rep.gap_delta == 0.0 and rep.mean_iou == 1.0
        assert rep.accuracy_identity_holds()

    def test_segmentation_identity(self):
        net = build_segmenter(1, [3], 2, 8, 8, seed=0)
        gen = np.random.default_rng(0)
        X = gen.normal(size=(4, 1, 8, 8))
        y = gen.integers(0, 2, (4, 8, 8))
        rep = build_report(net, net.copy(), X, y)
        assert rep.cip_count == 0 and rep.dice_reference == rep.dice_compressed
        assert rep.mean_iou == 1.0

    def test_planted_disagreement(self):
        ref = Network([Dense(1, 2)], (1,), 2)
        ref.params = {"0.weight": Parameter(np.array([[1.0], [-1.0]]), prunable=True),
                      "0.bias": Parameter(np.zeros(2))}
        cmp_ = ref.copy()
        cmp_.params["0.bias"].value[:] = [-2.5, 0.0]  # flips only x in (0, 1.25)
        X = np.array([[-2.0], [-1.0], [1.0], [3.0]])
        y = np.array([1, 1, 0, 0])
        rep = build_report(ref, cmp_, X, y)
        assert rep.cie_indices == [2] and rep.cie_u_indices == [2]
        assert rep.accuracy_identity_holds()

    def test_brute_force_seed_13(self):
        gen = np.random.default_rng(13)
        X = gen.normal(size=(500, 2))
        y = gen.integers(0, 3, 500)
        ref = build_classifier(2, [8], 3, seed=13)
        cmp_ = build_classifier(2, [8], 3, seed=14)
        rep = build_report(ref, cmp_, X, y, iou_sample=50, seed=13)
        r = np.argmax(ref(X), axis=1)
        c = np.argmax(cmp_(X), axis=1)
        assert (rep.cie_count, rep.cie_indices) == oracles.cies(y, r, c)
        assert (rep.cie_u_count, rep.cie_u_indices) == oracles.cie_us(y, r, c)
        assert rep.error_compressed == pytest.approx(oracles.class_errors(y, c, 3), abs=1e-15)
        assert rep.fixed_count == oracles.fixed(y, r, c)
        assert rep.accuracy_identity_holds()
        assert len(rep.per_image_iou) == 50

    def test_json_round_trip(self, tmp_path):
        net = build_classifier(2, [8], 3, seed=0)
        X = np.random.default_rng(0).normal(size=(30, 2))
        rep = build_report(net, build_classifier(2, [8], 3, seed=1), X, np.arange(30) % 3)
        rep.to_json(tmp_path / "r.json")
        assert MisalignmentReport.from_json(tmp_path / "r.json") == rep


def test_pgm_round_trip(tmp_path):
    a = np.random.default_rng(0).random((5, 7))
    path = write_pgm(a, tmp_path / "a.pgm")
    assert path.read_text().startswith("P2\n7 5\n255\n")
    np.testing.assert_allclose(read_pgm(path), a, atol=0.5 / 255 + 1e-12)


def test_table_writers(tmp_path):
    net = build_classifier(2, [8], 3, seed=0)
    X = np.random.default_rng(0).normal(size=(30, 2))
    rep = build_report(net, build_classifier(2, [8], 3, seed=1), X, np.arange(30) % 3)
    lines = write_class_table(rep, tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "class,error_reference,error_compressed,accuracy_delta" and len(lines) == 4
    idx = write_index_list(rep.cie_indices, tmp_path / "i.csv").read_text().split()
    assert idx[1:] == [str(i) for i in rep.cie_indices]
