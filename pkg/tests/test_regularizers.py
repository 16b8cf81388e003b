import logging

import numpy as np
import pytest
import torch

from efcpp.linalg import quadratic_form, sym_eig
from efcpp.model import ClassifierHead, FeatureExtractor, ShapeError
from efcpp.regularizers import (DiagonalEFIM, RegularizerConfig, check_elastic_constraint,
                                diag_efim_estimate, efm_penalty, ewc_penalty, fd_penalty,
                                kd_penalty)

torch.set_default_dtype(torch.float64)


def central_diff(fn, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = fn()
        x[idx] = old - h
        fm = fn()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8))


def rand_psd(rng, n, rank=None):
    a = rng.standard_normal((n, rank or n))
    return a @ a.T


def test_config_validation():
    with pytest.raises(ValueError):
        RegularizerConfig(kind="l2")
    with pytest.raises(ValueError):
        RegularizerConfig(eta=-1.0)
    with pytest.raises(ValueError):
        RegularizerConfig(kd_temperature=0.0)
    c = RegularizerConfig()
    assert (c.lambda_efm, c.eta, c.lambda_fd, c.lambda_efim, c.lambda_kd) == (10, 0.1, 1, 1e5, 50)


def test_efm_penalty_zero_drift():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((4, 3))
    loss, g = efm_penalty(f, f.copy(), rand_psd(rng, 3), 10.0, 0.1)
    assert loss == 0.0 and not g.any()


def test_efm_penalty_degenerates_to_squared_fd():
    rng = np.random.default_rng(1)
    cur, prev = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    loss, _ = efm_penalty(cur, prev, np.zeros((4, 4)), 10.0, 1.0)
    assert loss == pytest.approx(np.mean(np.sum((cur - prev) ** 2, axis=1)), rel=1e-14)
    e = rand_psd(rng, 4)
    l0, g0 = efm_penalty(cur, prev, e, 0.0, 0.1)
    lf, gf = fd_penalty(cur, prev, 1.0, squared=True)
    assert l0 == pytest.approx(0.1 * lf, rel=1e-14)
    np.testing.assert_allclose(g0, 0.1 * gf, rtol=1e-14)


def test_efm_penalty_oracle_and_gradient():
    rng = np.random.default_rng(2)
    e = rand_psd(rng, 6, 3)
    cur, prev = rng.standard_normal((7, 6)), rng.standard_normal((7, 6))
    metric = 10.0 * e + 0.1 * np.eye(6)
    naive = np.mean([quadratic_form(metric, c - p) for c, p in zip(cur, prev)])
    loss, g = efm_penalty(cur, prev, e, 10.0, 0.1)
    assert loss == pytest.approx(naive, rel=1e-12)
    num = central_diff(lambda: efm_penalty(cur, prev, e, 10.0, 0.1)[0], cur)
    assert rel_err(num, g) <= 1e-6
    with pytest.raises(ShapeError):
        efm_penalty(cur, prev, np.eye(5), 10.0, 0.1)


def test_efm_penalty_anisotropy():
    rng = np.random.default_rng(3)
    e = rand_psd(rng, 6, 2)
    r = sym_eig(e, psd=True)
    prev = rng.standard_normal((1, 6))
    top = prev + r.eigenvectors[:, 0]
    null = prev + r.eigenvectors[:, -1]
    l_top, _ = efm_penalty(top, prev, e, 10.0, 0.1)
    l_null, _ = efm_penalty(null, prev, e, 10.0, 0.1)
    assert l_top / l_null >= (10.0 * r.eigenvalues[0] + 0.1) / 0.1 * (1 - 1e-9)


def test_efm_penalty_nonnegative():
    rng = np.random.default_rng(4)
    for _ in range(50):
        e = rand_psd(rng, 5, int(rng.integers(1, 5)))
        loss, _ = efm_penalty(rng.standard_normal((3, 5)), rng.standard_normal((3, 5)), e,
                              float(rng.uniform(0, 20)), float(rng.uniform(0, 1)))
        assert loss >= 0.0


def test_fd_examples_and_gradient():
    prev = np.zeros((1, 5))
    cur = np.array([[3.0, 4.0, 0.0, 0.0, 0.0]])
    assert fd_penalty(cur, prev, 1.0)[0] == 5.0
    assert fd_penalty(prev, prev, 1.0)[0] == 0.0
    assert not fd_penalty(prev, prev, 1.0)[1].any()
    rng = np.random.default_rng(5)
    cur, prev = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    loss, g = fd_penalty(cur, prev, 2.0)
    assert loss == pytest.approx(2.0 * sum(np.sqrt(np.sum((c - p) ** 2)) for c, p in zip(cur, prev)))
    assert rel_err(central_diff(lambda: fd_penalty(cur, prev, 2.0)[0], cur), g) <= 1e-5
    gs = fd_penalty(cur, prev, 2.0, squared=True)[1]
    assert rel_err(central_diff(lambda: fd_penalty(cur, prev, 2.0, True)[0], cur), gs) <= 1e-5


def test_check_elastic_constraint_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert not check_elastic_constraint(np.eye(3) * 1e-3, RegularizerConfig())
    assert "degenerates" in caplog.text
    assert check_elastic_constraint(np.eye(3), RegularizerConfig())


def _net(seed=6):
    rng = np.random.default_rng(seed)
    ext = FeatureExtractor.init(4, (5,), 3, rng)
    for b in ext.biases:
        b[:] = rng.standard_normal(b.shape) * 0.1
    head = ClassifierHead(rng.standard_normal((3, 4)), [(0, 4)])
    return ext, head, rng


def torch_fisher(ext, head, x):
    """Exact E_y~p of squared per-sample log-likelihood gradients, via autograd."""
    params = [torch.tensor(p, requires_grad=True) for p in ext.params()]
    acc = [np.zeros_like(p) for p in ext.params()]
    w = torch.tensor(head.weights)
    for xi in x:
        h = torch.tensor(xi)[None, :]
        for i in range(len(ext.weights)):
            h = h @ params[2 * i] + params[2 * i + 1]
            if i < len(ext.weights) - 1:
                h = torch.relu(h)
        logp = torch.log_softmax(h @ w, dim=1)[0]
        p = logp.exp().detach().numpy()
        for y in range(head.num_classes):
            grads = torch.autograd.grad(logp[y], params, retain_graph=True)
            for a, g in zip(acc, grads):
                a += p[y] * g.numpy() ** 2
    return [a / len(x) for a in acc]


def test_diag_efim_matches_autograd():
    ext, head, rng = _net()
    x = rng.standard_normal((9, 4))
    est = diag_efim_estimate(ext, head, x, chunk=4)
    for a, b in zip(est.importances, torch_fisher(ext, head, x)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)
    assert all(np.all(f >= 0) for f in est.importances)
    dup = diag_efim_estimate(ext, head, np.concatenate([x, x]))
    for a, b in zip(est.importances, dup.importances):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


def test_diag_efim_dead_unit_and_single_layer():
    ext, head, rng = _net(7)
    ext.weights[0][:, 2] = 0.0
    ext.biases[0][2] = -1.0  # hidden unit 2 never fires
    est = diag_efim_estimate(ext, head, rng.standard_normal((5, 4)))
    assert not est.importances[0][:, 2].any()
    assert not est.importances[2][2, :].any()
    # one affine layer and one sample: F = sum_y p_y (x (e_y - p)^T W^T)^2
    w1 = rng.standard_normal((3, 2))
    lin = FeatureExtractor([w1], [np.zeros(2)])
    hw = rng.standard_normal((2, 3))
    x = rng.standard_normal((1, 3))
    p = np.exp(x @ w1 @ hw)
    p = (p / p.sum())[0]
    ref = sum(p[y] * np.outer(x[0], hw @ (np.eye(3)[y] - p)) ** 2 for y in range(3))
    est = diag_efim_estimate(lin, ClassifierHead(hw, [(0, 3)]), x)
    np.testing.assert_allclose(est.importances[0], ref, rtol=1e-12)
    with pytest.raises(ValueError):
        diag_efim_estimate(lin, ClassifierHead(hw, [(0, 3)]), np.zeros((0, 3)))


def test_ewc_penalty():
    rng = np.random.default_rng(8)
    params = [rng.standard_normal((3, 2)), rng.standard_normal(2)]
    anchor = DiagonalEFIM([rng.uniform(0, 1, (3, 2)), rng.uniform(0, 1, 2)],
                          [p.copy() for p in params])
    loss, grads = ewc_penalty(params, anchor, 5.0)
    assert loss == 0.0 and all(not g.any() for g in grads)
    params[0] += rng.standard_normal((3, 2))
    params[1] += rng.standard_normal(2)
    loss, grads = ewc_penalty(params, anchor, 5.0)
    naive = 0.0
    for p, f, a in zip(params, anchor.importances, anchor.anchor):
        for idx in np.ndindex(p.shape):
            naive += f[idx] * (p[idx] - a[idx]) ** 2
    assert loss == pytest.approx(5.0 * naive, rel=1e-12)
    for p, g in zip(params, grads):
        assert rel_err(central_diff(lambda: ewc_penalty(params, anchor, 5.0)[0], p), g) <= 1e-5
    ones = DiagonalEFIM([np.ones((3, 2)), np.ones(2)], anchor.anchor)
    l2 = sum(np.sum((p - a) ** 2) for p, a in zip(params, anchor.anchor))
    assert ewc_penalty(params, ones, 2.0)[0] == pytest.approx(2.0 * l2)
    with pytest.raises(ShapeError):
        ewc_penalty(params[:1], anchor, 1.0)


def test_kd_penalty_against_torch():
    rng = np.random.default_rng(9)
    cur, prev = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    t = torch.tensor(cur, requires_grad=True)
    q = torch.softmax(torch.tensor(prev) / 2.0, dim=1)
    ref = -50.0 * (q * torch.log_softmax(t / 2.0, dim=1)).sum(dim=1).mean()
    ref.backward()
    loss, g = kd_penalty(cur, prev, 2.0, 50.0)
    assert loss == pytest.approx(ref.item(), rel=1e-13)
    np.testing.assert_allclose(g, t.grad.numpy(), rtol=1e-12)
    assert rel_err(central_diff(lambda: kd_penalty(cur, prev, 2.0, 50.0)[0], cur), g) <= 1e-5


def test_kd_identical_logits_and_t1():
    rng = np.random.default_rng(10)
    z = rng.standard_normal((3, 4))
    loss, g = kd_penalty(z, z.copy(), 2.0, 1.0)
    q = torch.softmax(torch.tensor(z) / 2.0, dim=1).numpy()
    assert loss == pytest.approx(-np.mean(np.sum(q * np.log(q), axis=1)), rel=1e-12)
    assert np.abs(g).max() <= 1e-16
    prev = rng.standard_normal((3, 4))
    q1 = np.exp(prev) / np.exp(prev).sum(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    assert kd_penalty(z, prev, 1.0, 1.0)[0] == pytest.approx(-np.mean(np.sum(q1 * logp, axis=1)))
    with pytest.raises(ShapeError):
        kd_penalty(z, prev[:, :3], 1.0, 1.0)
