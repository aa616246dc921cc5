"""Hand-derived gradients, Adam, and the finite-difference checker."""

import numpy as np
import pytest

from pimg import diffmath, render
from pimg.errors import ShapeMismatch


def _pixel_batch(doc, n, rng):
    pts = np.stack([rng.uniform(0, doc.width, n),
                    rng.uniform(0, doc.height, n)], axis=1)
    return pts


class TestBackward:
    def test_zero_residual_zero_grads(self, fitted_doc):
        doc, _, _ = fitted_doc
        rng = np.random.default_rng(0)
        pts = _pixel_batch(doc, 16, rng)
        targets = render.render_image(doc)  # unused; compute true preds below
        params = diffmath.ParamSet.from_document(doc)
        # run forward once to get exact predictions as targets
        _, loss0 = diffmath.backward(pts, doc, np.zeros((16, 3)), params)
        # reconstruct predictions from the zero-target loss: instead, render
        # per-pixel predictions via a probe call
        preds = _predictions(doc, pts, params)
        grads, loss = diffmath.backward(pts, doc, preds, params)
        assert loss == pytest.approx(0.0, abs=1e-18)
        for g in grads.grads.values():
            assert np.all(g == 0.0)

    def test_duplicate_pixel_linearity(self, fitted_doc):
        doc, _, _ = fitted_doc
        rng = np.random.default_rng(1)
        p = _pixel_batch(doc, 1, rng)
        target = rng.random((1, 3))
        g1, l1 = diffmath.backward(p, doc, target)
        g2, l2 = diffmath.backward(np.vstack([p, p]), doc,
                                   np.vstack([target, target]))
        # mean normalization: duplicating the whole batch changes nothing
        assert l2 == pytest.approx(l1, rel=1e-12)
        for k in g1.grads:
            assert np.allclose(g2.grads[k], g1.grads[k], atol=1e-14)

    def test_batch_scaling(self, fitted_doc):
        doc, _, _ = fitted_doc
        rng = np.random.default_rng(2)
        pts = _pixel_batch(doc, 4, rng)
        targets = rng.random((4, 3))
        ga, la = diffmath.backward(pts, doc, targets)
        # per-pixel contributions sum: loss over the batch equals the mean of
        # single-pixel losses
        singles = [diffmath.backward(pts[k:k + 1], doc, targets[k:k + 1])
                   for k in range(4)]
        assert la == pytest.approx(np.mean([l for _, l in singles]), rel=1e-12)
        for k in ga.grads:
            summed = sum(s.grads[k] for s, _ in singles) / 4.0
            assert np.allclose(ga.grads[k], summed, atol=1e-12)

    def test_rejects_bad_shapes(self, fitted_doc):
        doc, _, _ = fitted_doc
        with pytest.raises(ShapeMismatch):
            diffmath.backward(np.empty((0, 2)), doc, np.empty((0, 3)))
        with pytest.raises(ShapeMismatch):
            diffmath.backward([[1.0, 1.0]], doc, np.zeros((2, 3)))


def _predictions(doc, pts, params):
    """Exact per-pixel forward pass, assembled from the layer plans."""
    owner = render.resolve_layers(doc, pts)
    preds = np.zeros((len(pts), 3))
    for lay in doc.layers:
        sel = np.nonzero(owner == lay.id)[0]
        if len(sel):
            plan = diffmath.build_layer_plan(doc, lay, sel, pts)
            pred, _ = diffmath.plan_forward(plan, params, doc.config.k_freq)
            preds[sel] = pred
    return preds


class TestGradientNumerics:
    def test_single_pixel_finite_difference(self, fitted_doc):
        doc, _, _ = fitted_doc
        rng = np.random.default_rng(3)
        params = diffmath.ParamSet.from_document(doc)
        # shift hidden biases away from ReLU kinks for clean central diffs
        for i in range(3):
            params.values[f"b{i}"] += 0.5
        pts = _pixel_batch(doc, 1, rng)
        target = rng.random((1, 3))
        grads, _ = diffmath.backward(pts, doc, target, params)

        def loss_fn():
            return diffmath.backward(pts, doc, target, params)[1]

        err = diffmath.fd_check(loss_fn, grads.grads, params.values,
                                probes=25, rng=np.random.default_rng(4))
        assert err <= 1e-4

    def test_pipeline_batch_finite_difference(self, fitted_doc):
        doc, _, _ = fitted_doc
        rng = np.random.default_rng(100)
        params = diffmath.ParamSet.from_document(doc)
        for i in range(3):
            params.values[f"b{i}"] += 0.5
        pts = _pixel_batch(doc, 24, rng)
        targets = rng.random((24, 3))
        grads, _ = diffmath.backward(pts, doc, targets, params)

        def loss_fn():
            return diffmath.backward(pts, doc, targets, params)[1]

        # restrict probes to measurable coordinates: a 24-pixel mean-MSE
        # dilutes per-code gradients toward the float64 noise floor of the
        # central difference
        # curvature_tol additionally rejects coordinates where the central
        # difference has not converged at the probe step
        err = diffmath.fd_check(loss_fn, grads.grads, params.values,
                                probes=40, min_grad=1e-3, curvature_tol=5e-6,
                                rng=np.random.default_rng(200))
        assert err <= 1e-4


class TestAdam:
    def _params(self):
        vals = {"w0": np.array([1.0, -2.0, 3.0]), "grid1": np.array([0.5])}
        return diffmath.ParamSet(values=vals,
                                 groups={"w0": "decoder", "grid1": "features"},
                                 lrs={"decoder": 1e-3, "features": 5e-3})

    def test_zero_gradient_no_change(self):
        p = self._params()
        before = {k: v.copy() for k, v in p.values.items()}
        g = diffmath.GradBuffer.zeros_like(p)
        diffmath.adam_step(p, g, epoch=0)
        for k in before:
            assert np.array_equal(p.values[k], before[k])

    def test_moments_decay(self):
        p = self._params()
        g = diffmath.GradBuffer.zeros_like(p)
        g.grads["w0"][:] = 1.0
        diffmath.adam_step(p, g, epoch=0)
        m1 = np.abs(p.m["w0"]).max()
        g.zero()
        for _ in range(50):
            diffmath.adam_step(p, g, epoch=0)
        assert np.abs(p.m["w0"]).max() < m1 * 0.01

    def test_constant_gradient_unit_step(self):
        p = self._params()
        g = diffmath.GradBuffer.zeros_like(p)
        g.grads["w0"][:] = 0.37
        g.grads["grid1"][:] = -1.4
        prev = {k: v.copy() for k, v in p.values.items()}
        for _ in range(500):
            prev = {k: v.copy() for k, v in p.values.items()}
            diffmath.adam_step(p, g, epoch=0)
        step_w = np.abs(p.values["w0"] - prev["w0"])
        step_f = np.abs(p.values["grid1"] - prev["grid1"])
        assert np.allclose(step_w, 1e-3, rtol=1e-3)
        assert np.allclose(step_f, 5e-3, rtol=1e-3)

    def test_lr_schedule(self):
        assert diffmath.effective_lr(1e-3, 0) == pytest.approx(1e-3)
        assert diffmath.effective_lr(1e-3, 249) == pytest.approx(1e-3)
        assert diffmath.effective_lr(1e-3, 250) == pytest.approx(0.8e-3)
        assert diffmath.effective_lr(1e-3, 750) == pytest.approx(1e-3 * 0.8 ** 3)

    def test_unknown_gradient_rejected(self):
        p = self._params()
        g = diffmath.GradBuffer({"nope": np.zeros(3)})
        with pytest.raises(ShapeMismatch):
            diffmath.adam_step(p, g, epoch=0)


class TestFdCheck:
    def test_linear_function_exact(self):
        a = np.array([1.5, -2.0, 0.25])
        values = {"x": np.array([0.3, 0.7, -1.1])}
        grads = {"x": a.copy()}

        def loss_fn():
            return float(a @ values["x"])

        err = diffmath.fd_check(loss_fn, grads, values, probes=20)
        assert err <= 1e-10

    def test_planted_fault_detected(self):
        a = np.array([1.5, -2.0, 0.25])
        values = {"x": np.array([0.3, 0.7, -1.1])}
        grads = {"x": 2.0 * a}   # deliberately doubled

        def loss_fn():
            return float(a @ values["x"])

        err = diffmath.fd_check(loss_fn, grads, values, probes=20)
        assert err == pytest.approx(0.5, abs=1e-6)
