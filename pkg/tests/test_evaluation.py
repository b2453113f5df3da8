import json

import numpy as np
import pytest

from sslcrop import evaluation as E
from sslcrop import model as M
from sslcrop.dataio import CropClass, Dataset, Sample
from conftest import make_dataset
from test_model import tiny_state


class TestOverallAccuracy:
    def test_all_correct(self):
        assert E.overall_accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_two_thirds(self):
        assert abs(E.overall_accuracy([1, 2, 3], [1, 2, 2]) - 2 / 3) < 1e-15

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            E.overall_accuracy([1, 2], [1, 2, 3])

    def test_matches_confusion_trace(self):
        rng = np.random.default_rng(0)
        truth = rng.integers(1, 7, 100)
        pred = rng.integers(1, 7, 100)
        conf = E.confusion_matrix(truth, pred)
        assert E.overall_accuracy(pred, truth) == conf.trace() / conf.sum()


class TestPublishedTableRows:
    """The two winter-barley rows reported for the contrastive classifier."""

    def test_all_years_row(self):
        pred = [2] * 84 + [3] * 1 + [4] * 5 + [5] * 10
        truth = [2] * 100
        conf = E.confusion_matrix(truth, pred)
        assert conf[1].tolist() == [0, 84, 1, 5, 10, 0]
        assert E.per_class_accuracy(conf)[1] == 0.84

    def test_unseen_year_row(self):
        pred = [1] * 1 + [2] * 53 + [3] * 2 + [4] * 3 + [5] * 41
        truth = [2] * 100
        conf = E.confusion_matrix(truth, pred)
        assert conf[1].tolist() == [1, 53, 2, 3, 41, 0]
        assert E.per_class_accuracy(conf)[1] == 0.53

    def test_empty_row_reported_absent(self):
        conf = np.zeros((6, 6), dtype=int)
        conf[0, 0] = 3
        acc = E.per_class_accuracy(conf)
        assert acc[0] == 1.0
        assert acc[1] is None


class TestContrastiveClassify:
    def test_duplicate_reference_wins(self):
        # reference holds the query itself under class 2 and near-orthogonal
        # embeddings for the other classes, so class 2 must win
        state = tiny_state(seed=5, head_out=6)
        query = make_dataset(n_per_class=1, years=(2016,), n_bands=3, n_steps=5, seed=1).samples[0]
        z, p = E._heads_values(state, query.reflectance.T[None] / 10000.0)
        z_hat, p_hat = E._unit_rows(z)[0], E._unit_rows(p)[0]
        assert float(z_hat @ p_hat) > 0  # seed chosen so self-similarity is attractive
        basis = [z_hat, p_hat]
        others = []
        rng = np.random.default_rng(9)
        while len(others) < 2:
            v = rng.normal(size=6)
            for b in basis + others:
                v -= (v @ b) * b / (b @ b)
            others.append(v / np.linalg.norm(v))
        ref = E.ReferenceEmbeddings(
            z_hat=np.stack([others[0], z_hat, others[1]]),
            p_hat=np.stack([others[0], p_hat, others[1]]),
            labels=np.array([1, 2, 3]),
        )
        pred, losses = E.contrastive_classify(state, query, ref)
        assert pred == 2
        assert losses[2] < losses[1] and losses[2] < losses[3]

    def test_single_class_reference(self):
        state = tiny_state(seed=4, head_out=6)
        pool = make_dataset(n_per_class=3, years=(2016,), n_bands=3, n_steps=5, seed=2)
        corn_only = Dataset(
            tuple(s for s in pool.samples if s.label is CropClass.CORN),
            pool.band_ids, pool.n_steps,
        )
        x1 = pool.samples[-1]  # a potato sample
        pred, losses = E.contrastive_classify(state, x1, corn_only)
        assert pred == 1
        assert set(losses) == {1}

    def test_agrees_with_brute_force_double_loop(self):
        state = tiny_state(seed=5, head_out=6)
        reference = make_dataset(n_per_class=5, years=(2016,), n_bands=3, n_steps=5, seed=3)
        queries = make_dataset(n_per_class=4, years=(2017,), n_bands=3, n_steps=5, seed=4)
        dn = 10000.0
        for sample in queries.samples[:20]:
            pred, _ = E.contrastive_classify(state, sample, reference, dn_scale=dn)
            per_class: dict[int, list[float]] = {}
            for ref_sample in reference.samples:
                loss = M.simsiam_loss(
                    state,
                    sample.reflectance.T[None] / dn,
                    ref_sample.reflectance.T[None] / dn,
                    training=False,
                ).item()
                per_class.setdefault(int(ref_sample.label), []).append(loss)
            means = {c: float(np.mean(v)) for c, v in per_class.items()}
            brute = min(means, key=lambda c: (means[c], c))
            assert pred == brute

    def test_reference_permutation_invariance(self):
        state = tiny_state(seed=6, head_out=6)
        reference = make_dataset(n_per_class=4, years=(2016,), n_bands=3, n_steps=5, seed=5)
        shuffled = Dataset(
            tuple(np.random.default_rng(0).permutation(np.array(reference.samples, dtype=object))),
            reference.band_ids, reference.n_steps,
        )
        query = make_dataset(n_per_class=1, years=(2017,), n_bands=3, n_steps=5, seed=6).samples[0]
        a, la = E.contrastive_classify(state, query, reference)
        b, lb = E.contrastive_classify(state, query, shuffled)
        assert a == b
        for c in la:
            assert abs(la[c] - lb[c]) < 1e-12

    def test_unlabeled_reference_rejected(self):
        state = tiny_state(seed=1, head_out=6)
        pool = make_dataset(n_per_class=2, years=(2016,), n_bands=3, n_steps=5)
        stripped = Dataset(
            tuple(Sample(s.field_id, s.year, None, s.reflectance) for s in pool.samples),
            pool.band_ids, pool.n_steps,
        )
        with pytest.raises(ValueError):
            E.contrastive_classify(state, pool.samples[0], stripped)


class TestPca:
    def test_collinear_points_put_all_variance_first(self):
        t = np.linspace(-2, 2, 40)
        direction = np.array([1.0, -2.0, 0.5, 3.0, 1.0])
        X = np.outer(t, direction)
        _, ratios = E.pca_project(X, k=2)
        assert ratios[0] >= 0.999
        assert ratios[1] <= 1e-6

    def test_rotated_plane_preserves_distances(self):
        rng = np.random.default_rng(1)
        flat = rng.normal(size=(200, 2))
        basis, _ = np.linalg.qr(rng.normal(size=(10, 10)))
        X = flat @ basis[:2, :]
        coords, ratios = E.pca_project(X, k=2)
        d_orig = np.linalg.norm(flat[:, None] - flat[None, :], axis=-1)
        d_proj = np.linalg.norm(coords[:, None] - coords[None, :], axis=-1)
        assert np.abs(d_orig - d_proj).max() < 1e-6
        assert ratios.sum() > 0.999

    def test_centering_invariance(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(50, 6))
        a, _ = E.pca_project(X, k=2)
        b, _ = E.pca_project(X + 7.5, k=2)
        assert np.abs(a - b).max() < 1e-8

    def test_ratios_non_increasing_and_bounded(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(80, 7)) * np.array([5, 3, 2, 1, 1, 0.5, 0.1])
        _, ratios = E.pca_project(X, k=3)
        assert ratios[0] >= ratios[1] >= ratios[2]
        assert ratios.sum() <= 1.0 + 1e-12

    def test_sign_convention(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(60, 4))
        coords1, _ = E.pca_project(X, k=2)
        coords2, _ = E.pca_project(-X, k=2)
        assert np.abs(np.abs(coords1) - np.abs(coords2)).max() < 1e-8

    def test_non_convergence_raises_with_iteration_count(self):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(40, 8)) * np.linspace(3, 1, 8)
        with pytest.raises(E.PowerIterationError) as err:
            E.pca_project(X, k=1, max_iters=2)
        assert err.value.iterations == 2

    def test_too_few_rows_rejected(self):
        with pytest.raises(ValueError):
            E.pca_project(np.ones((1, 3)))


class TestReport:
    def test_overall_equals_trace_over_total(self):
        d = make_dataset(n_per_class=2, years=(2016,))
        truth = d.labels_array()
        pred = truth.copy()
        pred[0] = (pred[0] % 6) + 1
        report = E.build_report("e1", "RF", d, pred, truth)
        conf = np.array(report.confusion)
        assert report.overall == conf.trace() / conf.sum()

    def test_json_round_trips_and_is_stable(self):
        d = make_dataset(n_per_class=2, years=(2016,))
        truth = d.labels_array()
        report = E.build_report("e2", "TF", d, truth, truth, seeds={"master": 3})
        doc = json.loads(report.to_json())
        assert doc["scenario"] == "e2"
        assert doc["method"] == "TF"
        assert doc["overall_accuracy"] == 1.0
        assert doc["class_index_mapping"]["2"] == "winter barley"
        assert doc["preprocessing"]["bands"] == list(d.band_ids)
        assert report.to_json() == E.build_report("e2", "TF", d, truth, truth, seeds={"master": 3}).to_json()
