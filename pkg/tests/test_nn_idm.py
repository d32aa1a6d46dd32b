import numpy as np
import pytest
from hypothesis import given, strategies as st

from primil.collector import IdmDataset
from primil.idm import (
    best_library_action,
    classification_accuracy,
    idm_score,
    load_model,
    save_model,
    train_idm,
    train_param_idm,
    train_primitive_idm,
)
from primil.nn import (
    Classifier,
    DimensionMismatch,
    Diverged,
    MixtureModel,
    TrainConfig,
    adam_fit,
    fit_model,
    logsumexp,
)
from primil.primitives import MAX_PARAM_DIM, PrimitiveType as P
from primil.records import CorruptFile
from primil.verify import gradient_check


def _synthetic(n, d, labels, x=None, seed=0):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(n, d))
    s2 = rng.normal(size=(n, d))
    p = np.asarray(labels(s, s2))
    xs = np.full((n, MAX_PARAM_DIM), np.nan)
    if x is not None:
        v = x(s, s2)
        xs[:, : v.shape[1]] = v
    w = np.zeros(n)
    for c in np.unique(p):
        w[p == c] = 1.0 / np.sum(p == c)
    return IdmDataset(s, s2, p, xs, w, np.zeros(n, int))


@pytest.mark.parametrize("seed", range(4))
def test_classifier_gradient(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(4, 6))
    mask = np.array([True, True, False, True, True])
    m = Classifier.create(6, 5, (8, 7), rng, X=X, class_mask=mask)
    y = rng.choice([0, 1, 3, 4], size=4)
    assert gradient_check(m, X, y, rng.uniform(0.1, 1, 4)) < 1e-4


@pytest.mark.parametrize("seed", range(4))
def test_mixture_gradient(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(4, 5))
    Y = rng.normal(size=(4, 3))
    m = MixtureModel.create(5, 3, 3, (8, 6), rng, X=X, Y=Y)
    m.theta = m.theta + rng.normal(0, 0.3, m.theta.shape)
    assert gradient_check(m, X, Y, rng.uniform(0.1, 1, 4)) < 1e-4


@given(seed=st.integers(0, 2**32))
def test_simplex_and_sigma_floor(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(scale=10.0, size=(16, 6))
    c = Classifier.create(6, 5, (8, 8), rng)
    lp = c.log_probs(X)
    assert np.all(np.abs(logsumexp(lp, axis=1)) <= 1e-6)
    m = MixtureModel.create(6, 4, 5, (8, 8), rng)
    m.theta = m.theta * 5
    lw, mu, sd = m.mixture(X)
    assert np.allclose(np.exp(lw).sum(axis=1), 1.0, atol=1e-6)
    assert np.all(sd >= 1e-3 * (1 - 1e-12))


def test_masked_class_never_argmax():
    rng = np.random.default_rng(0)
    c = Classifier.create(3, 5, (8,), rng, class_mask=[True, False, True, True, True])
    c.theta[-5:] = 0.0
    c.theta[-4] = 1e6  # bias of the masked class
    assert np.all(c.predict(rng.normal(size=(50, 3))) != 1)
    assert np.all(np.exp(c.log_probs(rng.normal(size=(5, 3))))[:, 1] == 0)


def test_separable_two_class():
    ds = _synthetic(600, 4, lambda s, s2: np.where(s[:, 0] + s2[:, 1] > 0, int(P.GRASP), int(P.OTHER)))
    train, held = ds.split(0.2, 0)
    m, _ = train_primitive_idm(train, TrainConfig(epochs=60, batch_size=64))
    pred = m.predict(np.hstack([held.s, held.s_prime]))
    assert np.mean(pred == held.p) >= 0.99
    assert set(np.unique(pred)) <= {int(P.GRASP), int(P.OTHER)}


def test_single_class_rejected():
    ds = _synthetic(20, 3, lambda s, s2: np.full(len(s), int(P.OTHER)))
    with pytest.raises(ValueError):
        train_primitive_idm(ds, TrainConfig(epochs=1))


def test_linear_param_recovery():
    A = np.array([[0.3, -0.2, 0.1, 0.0], [0.0, 0.1, 0.2, -0.3]])
    ds = _synthetic(1500, 2, lambda s, s2: np.full(len(s), int(P.GRASP)),
                    x=lambda s, s2: np.hstack([s, s2]) @ A.T @ np.ones((2, 4)) * 0.25 + 0.5)
    train, held = ds.split(0.2, 0)
    m, res = train_param_idm(train, P.GRASP, TrainConfig(epochs=200, batch_size=64, lr=3e-3, lr_final=1e-4))
    X, Y, _ = held.params_for(P.GRASP)
    xs, _ = m.mode(X)
    assert np.all(np.mean(np.abs(xs - Y), axis=0) < 0.01)


def test_param_nll_improves(small_pp_data):
    train, held = small_pp_data.split(0.2, 0)
    m, _ = train_param_idm(train, P.GRASP, TrainConfig(epochs=1, lr=1e-12, lr_final=1e-12))
    X, Y, _ = held.params_for(P.GRASP)
    before = m.loss(X, Y, np.ones(len(X)))
    m, _ = train_param_idm(train, P.GRASP, TrainConfig(epochs=30, batch_size=64))
    assert m.loss(X, Y, np.ones(len(X))) < before


def test_weighted_loss_decreases(small_pp_data):
    _, res = train_primitive_idm(small_pp_data, TrainConfig(epochs=5, seed=2))
    assert all(b < a for a, b in zip(res.curve, res.curve[1:]))


def test_training_determinism(small_pp_data):
    sub = small_pp_data.subset(np.arange(2000))
    a, _ = train_primitive_idm(sub, TrainConfig(epochs=2, seed=4))
    b, _ = train_primitive_idm(sub, TrainConfig(epochs=2, seed=4))
    assert np.array_equal(a.theta, b.theta)


def test_diverged():
    with pytest.raises(Diverged):
        adam_fit(lambda th, idx: (np.nan, np.zeros_like(th)), np.zeros(3), 4, TrainConfig(epochs=1))


def test_score_definitions(small_pp_idm, small_pp_data):
    X, X2 = small_pp_data.s[:50], small_pp_data.s_prime[:50]
    sc = idm_score(small_pp_idm, X, X2)
    assert np.all(np.abs(logsumexp(sc.log_prim, axis=1)) <= 1e-6)
    assert np.array_equal(sc.log_score, sc.log_prim)
    sb = idm_score(small_pp_idm, X, X2, beta=0.5)
    assert np.allclose(sb.log_score[:, int(P.GRASP)], sc.log_prim[:, int(P.GRASP)] + 0.5 * sb.log_q[P.GRASP])
    assert np.array_equal(sb.log_score[:, int(P.OTHER)], sc.log_prim[:, int(P.OTHER)])


def test_mode_is_best_component_mean(small_pp_idm, small_pp_data):
    m = small_pp_idm.param_models[P.REACH]
    X = np.hstack([small_pp_data.s[:20], small_pp_data.s_prime[:20]])
    lw, mu, sd = m.mixture(X)
    best = np.argmax(lw - np.log(sd).sum(axis=2), axis=1)
    xs, lq = m.mode(X)
    assert np.array_equal(xs, mu[np.arange(20), best])
    assert np.allclose(lq, m.log_density(X, xs))


def test_heldout_grasp_accuracy(small_pp_idm, small_pp_data):
    g = small_pp_data.subset(np.flatnonzero(small_pp_data.p == int(P.GRASP)))
    sc = idm_score(small_pp_idm, g.s, g.s_prime)
    assert np.mean(np.argmax(sc.log_score, axis=1) == int(P.GRASP)) >= 0.9


def test_best_library_action_excludes_other(small_pp_idm, small_pp_data):
    ps, xs, _ = best_library_action(small_pp_idm, small_pp_data.s[:30], small_pp_data.s_prime[:30])
    assert P.OTHER not in ps and all(x is not None for x in xs)


def test_model_roundtrip(tmp_path, small_pp_idm):
    save_model(small_pp_idm, tmp_path / "m.rec")
    back = load_model(tmp_path / "m.rec")
    rng = np.random.default_rng(0)
    d = small_pp_idm.feature_dim
    S, S2 = rng.uniform(size=(100, d)), rng.uniform(size=(100, d))
    a, b = idm_score(small_pp_idm, S, S2), idm_score(back, S, S2)
    assert np.array_equal(a.log_prim, b.log_prim)
    for p in a.x_star:
        assert np.array_equal(a.x_star[p], b.x_star[p])


def test_wrong_dimension(small_pp_idm):
    with pytest.raises(DimensionMismatch):
        idm_score(small_pp_idm, np.zeros((2, 22)), np.zeros((2, 22)))


def test_corrupt_model(tmp_path, small_pp_idm):
    p = save_model(small_pp_idm, tmp_path / "m.rec")
    p.write_bytes(p.read_bytes().replace(b'"role"', b'"rolf"', 1))
    with pytest.raises(CorruptFile):
        load_model(p)


def test_accuracy_helper(small_pp_idm, small_pp_data):
    acc = classification_accuracy(small_pp_idm, small_pp_data)
    assert 0.0 <= acc <= 1.0


def test_min_steps_raises_epoch_count():
    cfg = TrainConfig(epochs=10, batch_size=100, min_steps=600)
    assert cfg.epochs_for(5000) == 12  # 50 steps per epoch
    assert cfg.epochs_for(250) == 200  # 3 steps per epoch
    assert cfg.epochs_for(100_000) == 10
    with pytest.raises(ValueError):
        TrainConfig(min_steps=-1)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 3))
    m = Classifier.create(3, 2, (4,), rng, X=X)
    res = fit_model(m, X, (X[:, 0] > 0).astype(int), np.ones(40), TrainConfig(epochs=2, batch_size=20, min_steps=10))
    assert res.epochs_run == 5
