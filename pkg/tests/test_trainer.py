import json

import numpy as np
import pytest

from dknn.exceptions import NonFiniteError, ValidationError
from dknn.features import FeaturizerConfig, fit_featurizer
from dknn.harness import Dataset
from dknn.mathcore import softmax_rows
from dknn.model import Gradients, LLConfig, ModelParams
from dknn.rng import Rng
from dknn.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    evaluate,
    init_params,
    save_history,
    train,
)

CLASS_TOKENS = [
    ["apple", "pear", "plum", "grape", "melon"],
    ["zebra", "lion", "tiger", "rhino", "hyena"],
]


def separable_dataset(n_per_class: int = 30, seed: int = 0) -> Dataset:
    """Two classes with disjoint vocabularies: linearly separable."""
    rng = Rng(seed)
    texts, labels = [], []
    for i in range(n_per_class * 2):
        label = i % 2
        tokens = [
            CLASS_TOKENS[label][rng.bounded(len(CLASS_TOKENS[label]))]
            for _ in range(8)
        ]
        texts.append(" ".join(tokens))
        labels.append(label)
    return Dataset(texts=texts, labels=labels, label_names=["fruit", "animal"])


def small_featurizer():
    return fit_featurizer([], FeaturizerConfig(dim=64))


def ce_only_config(**kw) -> TrainConfig:
    ll = LLConfig(enable_kl=False, enable_cl=False)
    return TrainConfig(batch_size=16, epochs=30, embed_dim=8, seed=7, ll=ll, **kw)


class TestAdam:
    def _params(self):
        return init_params(3, 2, 2, Rng(0))

    def test_zero_gradients_no_change(self):
        params = self._params()
        before = {k: t.copy() for k, t in params.tensors().items()}
        grads = Gradients(**{k: np.zeros_like(t) for k, t in params.tensors().items()})
        adam_step(params, grads, AdamState.for_params(params), TrainConfig())
        for k, t in params.tensors().items():
            assert np.array_equal(t, before[k])

    def test_first_step_magnitude_is_learning_rate(self):
        params = self._params()
        before = params.w1.copy()
        grads = Gradients(
            w1=np.full_like(params.w1, 0.37),
            b1=np.zeros_like(params.b1),
            w2=np.zeros_like(params.w2),
            b2=np.zeros_like(params.b2),
            label_emb=np.zeros_like(params.label_emb),
        )
        cfg = TrainConfig(learning_rate=1e-3)
        adam_step(params, grads, AdamState.for_params(params), cfg)
        delta = params.w1 - before
        # closed form first step: -lr * g / (|g| + eps)
        expected = -cfg.learning_rate * 0.37 / (0.37 + cfg.adam_eps)
        np.testing.assert_allclose(delta, expected, rtol=1e-12)

    def test_non_finite_gradient_aborts_with_diagnostics(self):
        params = self._params()
        grads = Gradients(**{k: np.zeros_like(t) for k, t in params.tensors().items()})
        grads.w2[0, 0] = np.nan
        state = AdamState.for_params(params)
        state.step = 41
        with pytest.raises(NonFiniteError, match="w2.*step 42"):
            adam_step(params, grads, state, TrainConfig())


class TestInit:
    def test_draw_order_prefix_property(self):
        # w1/w2 draws must not depend on label_emb being drawn afterwards
        a = init_params(5, 3, 2, Rng(11))
        rng = Rng(11)
        w1 = rng.normals(15).reshape(5, 3)
        w1 /= np.sqrt(5)
        w2 = rng.normals(6).reshape(3, 2)
        w2 /= np.sqrt(3)
        assert np.array_equal(a.w1, w1)
        assert np.array_equal(a.w2, w2)
        assert np.all(a.b1 == 0.0) and np.all(a.b2 == 0.0)

    def test_scales(self):
        params = init_params(400, 100, 10, Rng(12))
        assert abs(params.w1.std() - 1 / np.sqrt(400)) < 0.003
        assert abs(params.w2.std() - 1 / np.sqrt(100)) < 0.01


class TestTrain:
    def test_separable_reaches_high_train_accuracy(self):
        ds = separable_dataset()
        feat = small_featurizer()
        params, _ = train(ds, None, feat, ce_only_config())
        assert evaluate(params, feat, ds) >= 0.99

    def test_zero_epochs_returns_init(self):
        ds = separable_dataset()
        feat = small_featurizer()
        cfg = ce_only_config()
        cfg.epochs = 0
        params, history = train(ds, None, feat, cfg)
        expected = init_params(feat.dim, cfg.embed_dim, 2, Rng(cfg.seed))
        assert history == []
        for k, t in params.tensors().items():
            assert np.array_equal(t, expected.tensors()[k])

    def test_same_seed_identical_runs(self):
        ds = separable_dataset()
        feat = small_featurizer()
        cfg = ce_only_config()
        cfg.epochs = 5
        p1, h1 = train(ds, ds, feat, cfg)
        p2, h2 = train(ds, ds, feat, cfg)
        for k in p1.tensors():
            assert np.array_equal(p1.tensors()[k], p2.tensors()[k])
        assert h1 == h2

    def test_history_shape_and_dev_accuracy(self):
        ds = separable_dataset()
        feat = small_featurizer()
        cfg = ce_only_config()
        cfg.epochs = 3
        _, history = train(ds, ds, feat, cfg)
        assert [r.epoch for r in history] == [1, 2, 3]
        for rec in history:
            assert rec.total == rec.ce + rec.kl + rec.cl
            assert rec.kl == 0.0 and rec.cl == 0.0
            assert 0.0 <= rec.dev_accuracy <= 1.0

    def test_empty_train_set_rejected(self):
        ds = Dataset(texts=[], labels=[], label_names=["a"])
        with pytest.raises(ValidationError):
            train(ds, None, small_featurizer(), ce_only_config())

    def test_monotone_ce_after_epoch_3_most_seeds(self):
        ds = separable_dataset()
        feat = small_featurizer()
        good = 0
        for seed in range(1, 6):
            cfg = ce_only_config()
            cfg.seed = seed
            cfg.epochs = 12
            _, history = train(ds, None, feat, cfg)
            ce = [r.ce for r in history]
            if all(ce[t + 1] <= ce[t] + 1e-12 for t in range(3, len(ce) - 1)):
                good += 1
        assert good >= 4

    def test_flags_off_matches_independent_ce_loop_bitwise(self):
        """Training with both LL losses off must equal a from-scratch CE-only
        implementation, including every Adam update."""
        ds = separable_dataset(n_per_class=12)
        feat = small_featurizer()
        cfg = ce_only_config()
        cfg.epochs = 4
        cfg.batch_size = 8
        params, _ = train(ds, None, feat, cfg)

        # independent plain-CE loop (no label-embedding machinery at all)
        x_all = feat.transform_many(ds.texts)
        y_all = np.asarray(ds.labels)
        f, d, c = feat.dim, cfg.embed_dim, 2
        rng = Rng(cfg.seed)
        w1 = rng.normals(f * d).reshape(f, d)
        w1 /= np.sqrt(f)
        b1 = np.zeros(d)
        w2 = rng.normals(d * c).reshape(d, c)
        w2 /= np.sqrt(d)
        b2 = np.zeros(c)
        m = {n: np.zeros_like(t) for n, t in zip("abcd", (w1, b1, w2, b2))}
        v = {n: np.zeros_like(t) for n, t in zip("abcd", (w1, b1, w2, b2))}
        step = 0
        for epoch in range(cfg.epochs):
            order = Rng(cfg.seed ^ epoch).permutation(ds.n)
            for start in range(0, ds.n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                xb, yb = x_all[idx], y_all[idx]
                nb = len(idx)
                z1 = xb @ w1 + b1
                h = np.tanh(z1)
                p = softmax_rows(h @ w2 + b2)
                onehot = np.zeros((nb, c))
                onehot[np.arange(nb), yb] = 1.0
                live = (p[np.arange(nb), yb] >= 1e-12)[:, None]
                dz2 = np.where(live, (p - onehot) * (1.0 / nb), 0.0)
                dh = dz2 @ w2.T
                dz1 = dh * (1.0 - h * h)
                grads = {
                    "a": xb.T @ dz1,
                    "b": dz1.sum(axis=0),
                    "c": h.T @ dz2,
                    "d": dz2.sum(axis=0),
                }
                step += 1
                bc1 = 1.0 - cfg.beta1**step
                bc2 = 1.0 - cfg.beta2**step
                for name, tensor in zip("abcd", (w1, b1, w2, b2)):
                    g = grads[name]
                    m[name] *= cfg.beta1
                    m[name] += (1.0 - cfg.beta1) * g
                    v[name] *= cfg.beta2
                    v[name] += (1.0 - cfg.beta2) * (g * g)
                    tensor -= cfg.learning_rate * (m[name] / bc1) / (
                        np.sqrt(v[name] / bc2) + cfg.adam_eps
                    )

        # bitwise identical forward predictions
        h_pkg = np.tanh(x_all @ params.w1 + params.b1)
        p_pkg = softmax_rows(h_pkg @ params.w2 + params.b2)
        h_ref = np.tanh(x_all @ w1 + b1)
        p_ref = softmax_rows(h_ref @ w2 + b2)
        assert np.array_equal(p_pkg, p_ref)


class TestEvaluate:
    def _forced_params(self, winner: int) -> ModelParams:
        b2 = np.zeros(2)
        b2[winner] = 10.0
        return ModelParams(
            w1=np.zeros((64, 4)), b1=np.zeros(4), w2=np.zeros((4, 2)), b2=b2,
            label_emb=np.zeros((2, 4)),
        )

    def test_all_correct(self):
        ds = Dataset(texts=["x", "y"], labels=[0, 0], label_names=["a", "b"])
        assert evaluate(self._forced_params(0), small_featurizer(), ds) == 1.0

    def test_all_wrong(self):
        ds = Dataset(texts=["x", "y"], labels=[1, 1], label_names=["a", "b"])
        assert evaluate(self._forced_params(0), small_featurizer(), ds) == 0.0

    def test_half(self):
        ds = Dataset(texts=["x", "y"], labels=[0, 1], label_names=["a", "b"])
        assert evaluate(self._forced_params(0), small_featurizer(), ds) == 0.5

    def test_tie_breaks_to_lowest_index(self):
        ds = Dataset(texts=["x"], labels=[0], label_names=["a", "b"])
        params = self._forced_params(0)
        params.b2 = np.zeros(2)  # exact tie
        assert evaluate(params, small_featurizer(), ds) == 1.0

    def test_empty_dataset_rejected(self):
        ds = Dataset(texts=[], labels=[], label_names=["a"])
        with pytest.raises(ValidationError):
            evaluate(self._forced_params(0), small_featurizer(), ds)


def test_history_jsonl_round_trip(tmp_path):
    ds = separable_dataset(n_per_class=8)
    feat = small_featurizer()
    cfg = ce_only_config()
    cfg.epochs = 2
    _, history = train(ds, ds, feat, cfg)
    path = tmp_path / "history.jsonl"
    save_history(history, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert set(rec) == {"epoch", "ce", "kl", "cl", "total", "dev_accuracy"}
