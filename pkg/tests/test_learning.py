import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bcpnn_stream import learning as L
from bcpnn_stream.data import encode_complementary
from bcpnn_stream.errors import InputError, NumericalError, ShapeError, StateError
from bcpnn_stream.model import build_model, new_population, new_projection

from conftest import random_dataset, tiny_config


def _train(model, n, seed=0, sup=True):
    ds = random_dataset(n, model.cfg, seed)
    for image, label in ds:
        L.unsupervised_step(model, encode_complementary(image), model.sched_unsup)
    if sup:
        for image, label in ds:
            L.supervised_step(model, encode_complementary(image), label, model.sched_sup)
    return ds


class TestSchedule:
    def test_rate(self):
        s = L.TraceSchedule(alpha_min=1e-4)
        assert s.alpha == 1.0
        s.advance(3)
        assert s.alpha == 0.25
        s.advance(10**6)
        assert s.alpha == 1e-4


class TestClampAndEq1:
    @pytest.mark.parametrize("x, expected", [(0.0, 1e-6), (0.5, 0.5), (1.7, 1.0)])
    def test_clamp(self, x, expected):
        assert L.clamp_prob(x) == expected

    @pytest.mark.parametrize("p, expected", [(1.0, 0.0), (0.5, -0.6931), (1 / 128, -4.8520)])
    def test_bias(self, p, expected):
        assert L.bias(p) == pytest.approx(expected, abs=5e-5)

    def test_weight_independence(self):
        assert L.weight(0.3, 0.2, 0.06) == pytest.approx(0.0, abs=1e-15)

    def test_weight_perfect_correlation(self):
        assert L.weight(0.5, 0.5, 0.5) == pytest.approx(0.6931, abs=5e-5)

    def test_weight_anticorrelation_hits_joint_floor(self):
        assert L.weight(0.5, 0.25, 1e-12) == pytest.approx(math.log(1e-12 / 0.125), rel=1e-12)


class TestTraces:
    def test_fixed_point(self):
        pop = new_population(2, 3)
        before = pop.p.copy()
        L.update_unit_traces(pop, L.TraceSchedule(t=4))
        np.testing.assert_array_equal(pop.p, before)

    def test_one_convex_step(self):
        pop = new_population(1, 2)
        pop.act[...] = [1.0, 0.0]
        L.update_unit_traces(pop, L.TraceSchedule(t=1))
        np.testing.assert_allclose(pop.p, [0.75, 0.25])

    def test_running_mean(self):
        pop = new_population(1, 2)
        pop.act[...] = [1.0, 0.0]
        sched = L.TraceSchedule()
        for _ in range(10):
            L.update_unit_traces(pop, sched)
            sched.advance()
        np.testing.assert_array_equal(pop.p, [1.0, 0.0])
        np.testing.assert_array_equal(L.clamp_prob(pop.p), [1.0, 1e-6])

    def test_joint_fixed_point(self):
        pre, post = new_population(2, 2), new_population(1, 4)
        proj = new_projection(pre, post, 2, seed=0)
        L.update_joint_traces(proj, pre.act, post.act, L.TraceSchedule(t=2))
        np.testing.assert_allclose(proj.p_joint, 0.125, atol=1e-17)

    def test_joint_one_step(self):
        pre, post = new_population(1, 2), new_population(1, 4)
        proj = new_projection(pre, post, 1, seed=0)
        L.update_joint_traces(proj, np.array([1.0, 0.0]), np.array([1.0, 0, 0, 0]), L.TraceSchedule(t=1))
        assert proj.p_joint[0, 0, 0] == 0.5625
        assert proj.p_joint[0, 1, 0] == 0.0625

    def test_joint_shape_error(self):
        pre, post = new_population(2, 2), new_population(1, 4)
        proj = new_projection(pre, post, 2, seed=0)
        with pytest.raises(ShapeError):
            L.update_joint_traces(proj, np.ones(3), post.act, L.TraceSchedule())

    def test_marginal_consistency(self):
        rng = np.random.default_rng(4)
        pre, post = new_population(6, 3), new_population(2, 4)
        proj = new_projection(pre, post, 4, seed=1)
        sched = L.TraceSchedule(alpha_min=0.01)
        for _ in range(100):
            pre.act[...] = rng.dirichlet(np.ones(3), 6).ravel()
            post.act[...] = rng.dirichlet(np.ones(4), 2).ravel()
            L.update_unit_traces(pre, sched)
            L.update_unit_traces(post, sched)
            L.update_joint_traces(proj, pre.act, post.act, sched)
            sched.advance()
        marg = proj.p_joint.sum(axis=2)
        np.testing.assert_allclose(marg, pre.p[proj.gather_index], atol=1e-5)


class TestRefreshAndSupport:
    def test_refresh_at_independence(self):
        m = build_model(tiny_config())
        L.refresh_weights(m.ih, m.inp, m.hid)
        np.testing.assert_array_equal(m.ih.w, 0.0)

    def test_driven_pair_gets_positive_weight(self):
        pre, post = new_population(2, 2), new_population(1, 2)
        proj = new_projection(pre, post, 2, seed=0)
        sched = L.TraceSchedule(t=1)
        pre.act[...] = [1.0, 0.0, 0.5, 0.5]
        post.act[...] = [1.0, 0.0]
        for pop in (pre, post):
            L.update_unit_traces(pop, sched)
        L.update_joint_traces(proj, pre.act, post.act, sched)
        L.refresh_weights(proj, pre, post)
        assert proj.w[0, 0, 0] > 0
        np.testing.assert_allclose(proj.w[0, 2:, :], 0.0, atol=1e-15)

    def test_refresh_is_eq1_elementwise(self):
        m = build_model(tiny_config())
        _train(m, 30, sup=False)
        L.refresh_weights(m.ih, m.inp, m.hid)
        pi = m.inp.p[m.ih.gather_index][:, :, None]
        pj = m.hid.p.reshape(4, 1, 8)
        np.testing.assert_array_equal(m.ih.w, L.weight(pi, pj, m.ih.p_joint))
        np.testing.assert_array_equal(m.hid.bias, L.bias(m.hid.p))

    def test_cached_weights_match_refresh(self):
        m = build_model(tiny_config())
        _train(m, 30, sup=False)
        cached = m.ih.w.copy()
        L.refresh_weights(m.ih, m.inp, m.hid)
        np.testing.assert_allclose(cached, m.ih.w, rtol=0, atol=1e-12)

    def test_zero_weights_give_bias(self):
        m = build_model(tiny_config())
        x = encode_complementary(np.full((4, 4), 0.3))
        np.testing.assert_array_equal(L.support(m.ih, x, m.hid.bias), m.hid.bias)

    def test_hand_built_two_by_two(self):
        pre, post = new_population(1, 2), new_population(1, 2)
        proj = new_projection(pre, post, 1, seed=0, chunk=2)
        pre.p[...] = [0.6, 0.4]
        post.p[...] = [0.3, 0.7]
        proj.p_joint[0] = [[0.25, 0.35], [0.05, 0.35]]
        L.refresh_weights(proj, pre, post)
        x = np.array([0.9, 0.1])
        s = L.support(proj, x, post.bias)
        w = np.log(np.array([[0.25, 0.35], [0.05, 0.35]]) / np.outer([0.6, 0.4], [0.3, 0.7]))
        expected = np.log([0.3, 0.7]) + x @ w
        np.testing.assert_allclose(s, expected, atol=1e-9)

    def test_cached_and_on_the_fly_support_agree(self):
        m = build_model(tiny_config())
        ds = _train(m, 40, sup=False)
        x = encode_complementary(ds.images[0])
        np.testing.assert_allclose(
            L.support(m.ih, x, m.hid.bias), L.support_from_traces(m.ih, m.inp, m.hid, x), atol=1e-6
        )

    def test_support_shape_error(self):
        m = build_model(tiny_config())
        with pytest.raises(ShapeError):
            L.support(m.ih, np.ones(5), m.hid.bias)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(L.softmax_hc(np.zeros(4), 1, 4), 0.25)

    @pytest.mark.parametrize("c", [-50.0, 0.0, 7.5, 1e3])
    def test_ratio_three(self, c):
        np.testing.assert_allclose(L.softmax_hc(np.array([c, c + math.log(3)]), 1, 2), [0.25, 0.75], atol=1e-12)

    def test_model1_geometry(self):
        s = np.random.default_rng(0).normal(0, 3, 32 * 128)
        a = L.softmax_hc(s, 32, 128).reshape(32, 128)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(a.argmax(axis=1), s.reshape(32, 128).argmax(axis=1))

    def test_non_finite(self):
        with pytest.raises(NumericalError, match="hypercolumn 1"):
            L.softmax_hc(np.array([0.0, 1.0, np.nan, 0.0]), 2, 2)

    def test_bad_temperature(self):
        with pytest.raises(InputError):
            L.softmax_hc(np.zeros(2), 1, 2, temperature=0.0)

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, 12, elements=st.floats(-30, 30)),
        st.floats(-100, 100),
    )
    def test_shift_invariance(self, s, c):
        a = L.softmax_hc(s, 3, 4)
        shifted = s.copy()
        shifted[4:8] += c
        np.testing.assert_allclose(L.softmax_hc(shifted, 3, 4), a, atol=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, 8, elements=st.floats(-40, 40)))
    def test_matches_extended_precision(self, s):
        ref = np.exp((s - s.max()).astype(np.longdouble))
        ref = (ref / ref.sum()).astype(np.float64)
        np.testing.assert_allclose(L.softmax_hc(s, 1, 8), ref, rtol=1e-6, atol=1e-300)


class TestSteps:
    def test_no_noise_keeps_symmetry(self):
        m = build_model(tiny_config(noise_amp=0.0))
        x = encode_complementary(np.random.default_rng(1).random((4, 4)))
        a = L.unsupervised_step(m, x, m.sched_unsup)
        np.testing.assert_allclose(a, 1 / 8, atol=1e-15)
        np.testing.assert_allclose(m.hid.p, 1 / 8, atol=1e-15)

    def test_determinism(self):
        a, b = build_model(tiny_config()), build_model(tiny_config())
        _train(a, 25)
        _train(b, 25)
        for name in ("p_joint", "w", "rf"):
            np.testing.assert_array_equal(getattr(a.ih, name), getattr(b.ih, name))
        np.testing.assert_array_equal(a.ho.p_joint, b.ho.p_joint)

    def test_step_counter(self):
        m = build_model(tiny_config())
        _train(m, 5)
        assert (m.sched_unsup.t, m.sched_sup.t) == (5, 5)

    @pytest.mark.slow
    def test_long_run_normalization(self):
        m = build_model(tiny_config())
        _train(m, 10_000, sup=False)
        np.testing.assert_allclose(m.hid.blocks(m.hid.p).sum(axis=1), 1.0, atol=1e-5)
        np.testing.assert_allclose(m.inp.blocks(m.inp.p).sum(axis=1), 1.0, atol=1e-5)
        np.testing.assert_allclose(m.ih.p_joint.sum(axis=2), m.inp.p[m.ih.gather_index], atol=1e-5)

    def test_activations_normalized(self):
        m = build_model(tiny_config())
        _train(m, 10)
        for pop in (m.inp, m.hid, m.out):
            np.testing.assert_allclose(pop.blocks(pop.act).sum(axis=1), 1.0, atol=1e-6)

    def test_supervised_single_class(self):
        m = build_model(tiny_config())
        x = encode_complementary(np.full((4, 4), 0.5))
        for _ in range(200):
            L.supervised_step(m, x, 2, m.sched_sup)
        assert m.out.p[2] == pytest.approx(1.0)

    def test_supervised_balanced_stream(self):
        m = build_model(tiny_config(n_classes=2, alpha_min=1e-3))
        x = encode_complementary(np.full((4, 4), 0.5))
        for t in range(1000):
            L.supervised_step(m, x, t % 2, m.sched_sup)
        np.testing.assert_allclose(m.out.p, [0.5, 0.5], atol=1e-2)

    def test_supervised_freezes_input_hidden(self):
        m = build_model(tiny_config())
        _train(m, 10, sup=False)
        w, pj, p_in = m.ih.w.copy(), m.ih.p_joint.copy(), m.inp.p.copy()
        _train(m, 0)
        for image, label in random_dataset(10, m.cfg, 5):
            L.supervised_step(m, encode_complementary(image), label, m.sched_sup)
        np.testing.assert_array_equal(m.ih.w, w)
        np.testing.assert_array_equal(m.ih.p_joint, pj)
        np.testing.assert_array_equal(m.inp.p, p_in)

    def test_supervised_label_range(self):
        m = build_model(tiny_config())
        with pytest.raises(InputError):
            L.supervised_step(m, encode_complementary(np.zeros((4, 4))), 3, m.sched_sup)

    def test_hidden_output_marginal_consistency(self):
        m = build_model(tiny_config())
        _train(m, 50)
        np.testing.assert_allclose(m.ho.p_joint[0].sum(axis=1), m.ho.pre_trace, atol=1e-5)
        per_hc = m.ho.p_joint[0].reshape(4, 8, 3).sum(axis=1)
        np.testing.assert_allclose(per_hc, np.tile(m.out.p, (4, 1)), atol=1e-5)


class TestInfer:
    def test_untrained(self):
        m = build_model(tiny_config())
        with pytest.raises(StateError):
            L.infer(m, encode_complementary(np.zeros((4, 4))))

    def test_purity_and_normalization(self):
        m = build_model(tiny_config())
        ds = _train(m, 20)
        before = m.copy()
        _, dist = L.infer(m, encode_complementary(ds.images[3]))
        assert dist.sum() == pytest.approx(1.0, abs=1e-6)
        for name in ("p", "act", "bias"):
            for pop in ("inp", "hid", "out"):
                np.testing.assert_array_equal(getattr(getattr(m, pop), name), getattr(getattr(before, pop), name))
        np.testing.assert_array_equal(m.ih.p_joint, before.ih.p_joint)
        np.testing.assert_array_equal(m.ho.w, before.ho.w)
        assert m.rng.random() == before.rng.random()

    def test_hand_built_toy(self):
        m = build_model(tiny_config(n_classes=2))
        m.sched_sup.t = 1
        m.ho.w[0, :, 0] = 1.0
        m.ho.w[0, :, 1] = -1.0
        k, dist = L.infer(m, encode_complementary(np.zeros((4, 4))))
        assert k == 0 and dist[0] > dist[1]

    def test_tie_breaks_low(self):
        m = build_model(tiny_config())
        m.sched_sup.t = 1
        k, dist = L.infer(m, encode_complementary(np.zeros((4, 4))))
        assert k == 0
        np.testing.assert_allclose(dist, 1 / 3)
