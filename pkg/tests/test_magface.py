import math

import numpy as np
import pytest

from magdiar.magface import (
    MagfaceBatch,
    MagfaceParams,
    g_reg,
    magface_grad,
    magface_loss,
    margin,
)

P = MagfaceParams(scale_s=1.0, lambda_g=0.0)


def random_batch(rng, n=8, c=5, d=16, mag_range=(20.0, 100.0)):
    """Batch with magnitudes strictly inside the clamp interval."""
    x = rng.standard_normal((n, d))
    x = x / np.linalg.norm(x, axis=1, keepdims=True) * rng.uniform(*mag_range, n)[:, None]
    w = rng.standard_normal((c, d))
    y = rng.integers(0, c, n)
    return MagfaceBatch(x, w, y)


def fd_gradients(batch, p, h=1e-5):
    x, w, y = batch.embeddings, batch.class_weights, batch.labels
    fd_x = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            up, dn = x.copy(), x.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd_x[i, j] = (
                magface_loss(MagfaceBatch(up, w, y), p)[0]
                - magface_loss(MagfaceBatch(dn, w, y), p)[0]
            ) / (2 * h)
    fd_w = np.zeros_like(w)
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            up, dn = w.copy(), w.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd_w[i, j] = (
                magface_loss(MagfaceBatch(x, up, y), p)[0]
                - magface_loss(MagfaceBatch(x, dn, y), p)[0]
            ) / (2 * h)
    return fd_x, fd_w


def rel_err(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-12))


class TestMargin:
    def test_endpoint_values(self):
        assert margin(10.0, P) == pytest.approx(0.1)
        assert margin(110.0, P) == pytest.approx(1.0)

    def test_linear_midpoint(self):
        assert margin(60.0, P) == pytest.approx(0.55)

    def test_clamped_above(self):
        assert margin(200.0, P) == pytest.approx(1.0)
        assert margin(3.0, P) == pytest.approx(0.1)

    def test_non_decreasing(self, rng):
        grid = np.sort(rng.uniform(0, 150, size=100))
        vals = [margin(a, P) for a in grid]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


class TestGReg:
    def test_value_at_upper_bound(self):
        # a/n_u^2 + 1/a at a = n_u = 110 collapses to 2/110
        assert g_reg(110.0, P) == pytest.approx(2.0 / 110.0, rel=1e-12)

    def test_value_at_lower_bound(self):
        assert g_reg(10.0, P) == pytest.approx(10.0 / 12100.0 + 0.1, rel=1e-12)

    def test_minimum_at_upper_bound(self, rng):
        gmin = g_reg(110.0, P)
        for a in rng.uniform(10, 110, size=200):
            assert g_reg(float(a), P) >= gmin - 1e-15

    def test_convex_on_clamp_interval(self, rng):
        for _ in range(200):
            a, b = rng.uniform(10, 110, size=2)
            t = float(rng.uniform(0, 1))
            mid = g_reg(t * a + (1 - t) * b, P)
            assert mid <= t * g_reg(a, P) + (1 - t) * g_reg(b, P) + 1e-12


class TestLoss:
    def test_single_class_softmax_is_one(self, rng):
        batch = random_batch(rng, n=4, c=1, d=8)
        loss, per = magface_loss(batch, P)
        assert loss == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(per, 0.0, atol=1e-12)

    def test_scalar_fixture(self):
        # x = (n_l, 0) so the margin is m_l = 0.1; cos to the target weight is 1
        # and to the other 0: loss = -log(e^cos(0.1) / (e^cos(0.1) + 1))
        batch = MagfaceBatch(
            np.array([[10.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0])
        )
        expected = -math.log(
            math.exp(math.cos(0.1)) / (math.exp(math.cos(0.1)) + 1.0)
        )
        loss, _ = magface_loss(batch, P)
        assert loss == pytest.approx(expected, rel=1e-12)
        assert loss == pytest.approx(0.31460772985265734, rel=1e-9)

    def test_scalar_fixture_with_regularizer(self):
        batch = MagfaceBatch(
            np.array([[10.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0])
        )
        p = MagfaceParams(scale_s=1.0, lambda_g=1.0)
        loss, _ = magface_loss(batch, p)
        assert loss == pytest.approx(0.31460772985265734 + 0.10082644628099174, rel=1e-9)

    def test_zero_norm_embedding_rejected(self):
        batch_args = (np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]), np.array([0]))
        with pytest.raises(ValueError, match="row 0"):
            magface_loss(MagfaceBatch(*batch_args), P)

    def test_matches_independent_arcface_with_constant_magnitude(self, rng):
        # equal magnitudes force a constant margin, reducing the loss to a
        # plain additive-angular-margin softmax
        n, c, d = 6, 4, 8
        x = rng.standard_normal((n, d))
        x = x / np.linalg.norm(x, axis=1, keepdims=True) * 60.0
        w = rng.standard_normal((c, d))
        y = rng.integers(0, c, n)
        p = MagfaceParams(scale_s=12.0, lambda_g=0.0)
        m_const = margin(60.0, p)

        u = x / np.linalg.norm(x, axis=1, keepdims=True)
        v = w / np.linalg.norm(w, axis=1, keepdims=True)
        cos = u @ v.T
        theta = np.arccos(np.clip(cos, -1, 1))
        logits = 12.0 * cos
        logits[np.arange(n), y] = 12.0 * np.cos(theta[np.arange(n), y] + m_const)
        arcface = float(
            np.mean(
                -logits[np.arange(n), y]
                + np.log(np.exp(logits).sum(axis=1))
            )
        )
        loss, _ = magface_loss(MagfaceBatch(x, w, y), p)
        assert loss == pytest.approx(arcface, rel=1e-10)


class TestGrad:
    def test_matches_finite_differences(self, rng):
        for lam in (0.0, 0.35):
            p = MagfaceParams(scale_s=30.0, lambda_g=lam)
            for _ in range(3):
                batch = random_batch(rng)
                dx, dw = magface_grad(batch, p)
                fd_x, fd_w = fd_gradients(batch, p)
                assert rel_err(dx, fd_x) <= 1e-4
                assert rel_err(dw, fd_w) <= 1e-4

    def test_radial_gradient_vanishes_when_clamped(self):
        # beyond the clamp the margin and regularizer are flat, and the
        # angular terms never move the magnitude, so the gradient of an
        # equidistant embedding has no component along its own direction
        x = np.array([[120.0 / math.sqrt(2), 120.0 / math.sqrt(2)]])
        batch = MagfaceBatch(x, np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0]))
        p = MagfaceParams(scale_s=4.0, lambda_g=1.0)
        dx, _ = magface_grad(batch, p)
        radial = float(dx[0] @ (x[0] / np.linalg.norm(x[0])))
        assert radial == pytest.approx(0.0, abs=1e-15)

    def test_single_class_gradient_is_regularizer_only(self):
        x = np.array([[30.0, 40.0]])
        batch = MagfaceBatch(x, np.array([[1.0, 1.0]]), np.array([0]))
        p = MagfaceParams(scale_s=2.0, lambda_g=0.7)
        dx, dw = magface_grad(batch, p)
        a = 50.0
        expected = 0.7 * (1.0 / 110.0**2 - 1.0 / a**2) * x[0] / a
        np.testing.assert_allclose(dx[0], expected, rtol=1e-12)
        np.testing.assert_allclose(dw, 0.0, atol=1e-15)
