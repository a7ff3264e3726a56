import numpy as np
import pytest

from src import conv_engine
from src.conv_engine import (
    ConvError,
    ConvSpec,
    conv2d_backward_input,
    conv2d_backward_weight,
    conv2d_reference,
    dilated_conv2d,
    dilated_conv2d_reference,
    psconv_forward,
    psconv_forward_masked,
    psconv_forward_rearranged,
)
from src.kernel_lattice import (
    DilationPattern,
    build_axis_variant,
    build_depthwise,
    build_psconv,
    build_psconv_grouped,
    build_uniform,
    plans_chainable,
    rearrangement,
)
from src.tensor_core import Rng, ShapeError, max_abs_diff, randn
from src.verify import random_case

PATTERN = DilationPattern((1, 2, 1, 4))
TOL = 1e-9


def _ones(dims):
    return np.ones(dims, dtype=np.float64)


class TestConvSpec:
    def test_output_hw_ceil(self):
        assert ConvSpec(1, 1, 3, 2).output_hw(7, 8) == (4, 4)
        assert ConvSpec(1, 1, 3, 1).output_hw(7, 8) == (7, 8)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConvError):
            ConvSpec(4, 4, 2)

    def test_groups_must_divide(self):
        with pytest.raises(ConvError):
            ConvSpec(6, 4, 3, 1, 4)

    def test_weight_shape(self):
        assert ConvSpec(8, 16, 3, 1, 2).weight_shape == (16, 4, 3, 3)


class TestHandComputed:
    @pytest.mark.parametrize("fn", [dilated_conv2d, dilated_conv2d_reference])
    def test_ones_d1(self, fn):
        out = fn(_ones((1, 1, 3, 3)), _ones((1, 1, 3, 3)), ConvSpec(1, 1), 1)
        assert out[0, 0].tolist() == [[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]]

    @pytest.mark.parametrize("fn", [dilated_conv2d, dilated_conv2d_reference])
    def test_ones_d2(self, fn):
        out = fn(_ones((1, 1, 3, 3)), _ones((1, 1, 3, 3)), ConvSpec(1, 1), 2)
        assert out[0, 0].tolist() == [[4.0, 2.0, 4.0], [2.0, 1.0, 2.0], [4.0, 2.0, 4.0]]

    def test_stride_two_samples_even_positions(self):
        F = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
        G = np.zeros((1, 1, 3, 3))
        G[0, 0, 1, 1] = 1.0
        out = dilated_conv2d(F, G, ConvSpec(1, 1, 3, 2), 1)
        assert out.shape == (1, 1, 3, 3)
        assert np.array_equal(out[0, 0], F[0, 0, ::2, ::2])

    @pytest.mark.parametrize("strategy", ["reference", "masked", "rearranged"])
    def test_centre_tap_is_identity(self, strategy, rng):
        F = randn((2, 4, 6, 7), rng)
        G = np.zeros((4, 4, 3, 3))
        for c in range(4):
            G[c, c, 1, 1] = 1.0
        out = psconv_forward(F, G, ConvSpec(4, 4), build_psconv(4, 4, PATTERN), strategy)
        assert max_abs_diff(out, F) == 0.0

    def test_uniform_d1_is_vanilla(self, rng):
        spec = ConvSpec(4, 6, 3, 1)
        F, G = randn((1, 4, 8, 8), rng), randn(spec.weight_shape, rng)
        D = build_uniform(6, 4, 1)
        assert max_abs_diff(conv2d_reference(F, G, spec, D), dilated_conv2d(F, G, spec, 1)) <= TOL

    def test_empty_batch(self):
        spec = ConvSpec(4, 4)
        D = build_psconv(4, 4, PATTERN)
        out = psconv_forward_masked(np.zeros((0, 4, 5, 5)), np.zeros(spec.weight_shape), spec, D)
        assert out.shape == (0, 4, 5, 5)


class TestEquivalence:
    @pytest.mark.parametrize("case_seed", range(25))
    def test_strategies_match_reference(self, case_seed):
        case = random_case(case_seed)
        ref = conv2d_reference(case.F, case.G, case.spec, case.D)
        masked = psconv_forward_masked(case.F, case.G, case.spec, case.D)
        assert max_abs_diff(ref, masked) <= TOL
        cpg, opg = case.spec.cin_per_group, case.spec.cout_per_group
        if cpg % case.D.pattern.t == 0 and opg % case.D.pattern.t == 0:
            plan = rearrangement(case.D)
            out = psconv_forward_rearranged(case.F, case.G, case.spec, case.D, plan)
            assert max_abs_diff(ref, out) <= TOL

    @pytest.mark.parametrize("stride", [1, 2])
    def test_grouped(self, stride, rng):
        spec = ConvSpec(16, 8, 3, stride, 2)
        D = build_psconv_grouped(8, 16, 2, PATTERN)
        F, G = randn((2, 16, 9, 10), rng), randn(spec.weight_shape, rng)
        ref = conv2d_reference(F, G, spec, D)
        assert max_abs_diff(ref, psconv_forward_masked(F, G, spec, D)) <= TOL
        assert max_abs_diff(ref, psconv_forward_rearranged(F, G, spec, D, rearrangement(D))) <= TOL

    def test_depthwise(self, rng):
        spec = ConvSpec(6, 6, 3, 1, 6)
        D = build_depthwise(6, PATTERN)
        F, G = randn((1, 6, 8, 8), rng), randn(spec.weight_shape, rng)
        assert max_abs_diff(conv2d_reference(F, G, spec, D), psconv_forward_masked(F, G, spec, D)) <= TOL

    @pytest.mark.parametrize("axis", ["input_only", "output_only"])
    def test_axis_variants(self, axis, rng):
        spec = ConvSpec(8, 8)
        D = build_axis_variant(8, 8, PATTERN, axis)
        F, G = randn((1, 8, 7, 7), rng), randn(spec.weight_shape, rng)
        ref = conv2d_reference(F, G, spec, D)
        assert max_abs_diff(ref, psconv_forward_masked(F, G, spec, D)) <= TOL
        assert max_abs_diff(ref, psconv_forward_rearranged(F, G, spec, D, rearrangement(D))) <= TOL

    def test_five_by_five_kernel(self, rng):
        spec = ConvSpec(4, 4, 5)
        D = build_psconv(4, 4, PATTERN)
        F, G = randn((1, 4, 9, 9), rng), randn(spec.weight_shape, rng)
        ref = conv2d_reference(F, G, spec, D)
        assert max_abs_diff(ref, psconv_forward_masked(F, G, spec, D)) <= TOL
        assert max_abs_diff(ref, psconv_forward_rearranged(F, G, spec, D, rearrangement(D))) <= TOL

    def test_rate_larger_than_input(self, rng):
        spec = ConvSpec(4, 4)
        D = build_psconv(4, 4, (1, 8))
        F, G = randn((1, 4, 3, 3), rng), randn(spec.weight_shape, rng)
        ref = conv2d_reference(F, G, spec, D)
        assert max_abs_diff(ref, psconv_forward_masked(F, G, spec, D)) <= TOL


class TestDeterminism:
    @pytest.mark.parametrize("strategy", ["reference", "masked", "rearranged"])
    def test_thread_count_does_not_change_result(self, strategy, rng):
        spec = ConvSpec(8, 8, 3, 1)
        D = build_psconv(8, 8, PATTERN)
        F, G = randn((4, 8, 9, 9), rng), randn(spec.weight_shape, rng)
        one = psconv_forward(F, G, spec, D, strategy, threads=1)
        many = psconv_forward(F, G, spec, D, strategy, threads=4)
        assert np.array_equal(one, many)


class TestMaskedInstrumentation:
    def test_one_dilated_call_per_distinct_rate(self, rng):
        spec = ConvSpec(8, 8)
        F, G = randn((1, 8, 6, 6), rng), randn(spec.weight_shape, rng)
        conv_engine.reset_stats()
        psconv_forward_masked(F, G, spec, build_psconv(8, 8, PATTERN))
        assert conv_engine.dilated_conv_calls() == 3
        conv_engine.reset_stats()
        psconv_forward_masked(F, G, spec, build_uniform(8, 8, 2))
        assert conv_engine.dilated_conv_calls() == 1


class TestRearrangedOrders:
    def test_chained_layers_stay_rearranged(self, rng):
        spec1, spec2 = ConvSpec(8, 16), ConvSpec(16, 16)
        D1, D2 = build_psconv(16, 8, PATTERN), build_psconv(16, 16, PATTERN)
        plan1, plan2 = rearrangement(D1), rearrangement(D2)
        assert plans_chainable(plan1, plan2)
        F = randn((2, 8, 7, 7), rng)
        G1, G2 = randn(spec1.weight_shape, rng), randn(spec2.weight_shape, rng)

        natural = conv2d_reference(conv2d_reference(F, G1, spec1, D1), G2, spec2, D2)
        mid = psconv_forward_rearranged(F, G1, spec1, D1, plan1, output_order="rearranged")
        out = psconv_forward_rearranged(mid, G2, spec2, D2, plan2, input_order="rearranged")
        assert max_abs_diff(natural, out) <= 1e-8

    def test_rearranged_output_is_permuted_natural(self, rng):
        spec = ConvSpec(8, 8)
        D = build_psconv(8, 8, PATTERN)
        plan = rearrangement(D)
        F, G = randn((1, 8, 5, 5), rng), randn(spec.weight_shape, rng)
        natural = psconv_forward_rearranged(F, G, spec, D, plan)
        permuted = psconv_forward_rearranged(F, G, spec, D, plan, output_order="rearranged")
        assert np.array_equal(permuted, natural[:, plan.perm_out])

    def test_bad_order_name(self, rng):
        spec = ConvSpec(4, 4)
        D = build_psconv(4, 4, PATTERN)
        with pytest.raises(ConvError):
            psconv_forward_rearranged(
                randn((1, 4, 4, 4), rng), randn(spec.weight_shape, rng), spec, D,
                rearrangement(D), output_order="sideways",
            )

    def test_mismatched_plan(self, rng):
        spec = ConvSpec(8, 8)
        D = build_psconv(8, 8, PATTERN)
        other = rearrangement(build_psconv(8, 8, (1, 2)))
        with pytest.raises(ConvError):
            psconv_forward_rearranged(randn((1, 8, 4, 4), rng), randn(spec.weight_shape, rng), spec, D, other)


class TestErrors:
    def test_lattice_shape_mismatch(self, rng):
        spec = ConvSpec(8, 8)
        with pytest.raises(ConvError):
            conv2d_reference(randn((1, 8, 4, 4), rng), randn(spec.weight_shape, rng), spec,
                             build_psconv(8, 4, PATTERN))

    def test_input_channel_mismatch(self, rng):
        spec = ConvSpec(8, 8)
        with pytest.raises(ShapeError):
            psconv_forward_masked(randn((1, 4, 4, 4), rng), randn(spec.weight_shape, rng), spec,
                                  build_psconv(8, 8, PATTERN))

    def test_unknown_strategy(self, rng):
        spec = ConvSpec(4, 4)
        with pytest.raises(ConvError):
            psconv_forward(randn((1, 4, 4, 4), rng), randn(spec.weight_shape, rng), spec,
                           build_psconv(4, 4, PATTERN), "winograd")

    def test_rearranged_needs_divisible_channels(self, rng):
        spec = ConvSpec(6, 6)
        with pytest.raises(ConvError):
            psconv_forward(randn((1, 6, 4, 4), rng), randn(spec.weight_shape, rng), spec,
                           build_psconv(6, 6, PATTERN), "rearranged")

    def test_bad_dilation(self, rng):
        spec = ConvSpec(2, 2)
        with pytest.raises(ConvError):
            dilated_conv2d(randn((1, 2, 4, 4), rng), randn(spec.weight_shape, rng), spec, 0)


class TestBackward:
    @pytest.mark.parametrize("stride,groups", [(1, 1), (2, 1), (1, 2), (2, 2)])
    def test_adjoint_identity(self, stride, groups):
        rng = Rng(stride * 10 + groups)
        spec = ConvSpec(8, 8, 3, stride, groups)
        D = build_psconv_grouped(8, 8, groups, PATTERN)
        F, G = randn((2, 8, 7, 6), rng), randn(spec.weight_shape, rng)
        out = conv2d_reference(F, G, spec, D)
        U = randn(out.shape, rng)
        lhs = float(np.vdot(out, U))
        scale = float(np.linalg.norm(out) * np.linalg.norm(U))
        gin = conv2d_backward_input(U, G, spec, D, F.shape[2:])
        gw = conv2d_backward_weight(U, F, spec, D)
        assert abs(lhs - float(np.vdot(F, gin))) / scale <= 1e-10
        assert abs(lhs - float(np.vdot(G, gw))) / scale <= 1e-10

    def test_weight_gradient_by_finite_difference(self):
        rng = Rng(99)
        spec = ConvSpec(4, 4)
        D = build_psconv(4, 4, PATTERN)
        F, G = randn((1, 4, 6, 6), rng), randn(spec.weight_shape, rng)
        U = randn((1, 4, 6, 6), rng)
        gw = conv2d_backward_weight(U, F, spec, D)
        h = 1e-5
        for idx in [(0, 0, 0, 0), (1, 2, 1, 1), (3, 3, 2, 0), (2, 1, 0, 2)]:
            plus, minus = G.copy(), G.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric = (np.vdot(conv2d_reference(F, plus, spec, D), U)
                       - np.vdot(conv2d_reference(F, minus, spec, D), U)) / (2 * h)
            assert abs(numeric - gw[idx]) <= 1e-6 * max(1.0, abs(gw[idx]))

    def test_backward_input_shape_with_odd_input(self, rng):
        spec = ConvSpec(4, 4, 3, 2)
        D = build_psconv(4, 4, PATTERN)
        U = randn((1, 4, 4, 4), rng)
        assert conv2d_backward_input(U, randn(spec.weight_shape, rng), spec, D, (7, 7)).shape == (1, 4, 7, 7)
        assert conv2d_backward_input(U, randn(spec.weight_shape, rng), spec, D, (8, 8)).shape == (1, 4, 8, 8)

    def test_grad_out_shape_checked(self, rng):
        spec = ConvSpec(4, 4, 3, 2)
        D = build_psconv(4, 4, PATTERN)
        with pytest.raises(ShapeError):
            conv2d_backward_input(randn((1, 4, 5, 5), rng), randn(spec.weight_shape, rng), spec, D, (7, 7))

    def test_weight_gradient_respects_lattice_for_uniform(self, rng):
        spec = ConvSpec(4, 4)
        F, U = randn((1, 4, 5, 5), rng), randn((1, 4, 5, 5), rng)
        a = conv2d_backward_weight(U, F, spec, build_uniform(4, 4, 1))
        b = conv2d_backward_weight(U, F, spec, build_psconv(4, 4, (1,)))
        assert np.array_equal(a, b)


def _weight_grad_loops(U, F, spec, d):
    """Uniform-rate weight gradient as literal Python loops."""
    n_batch, _, height, width = F.shape
    half = spec.k // 2
    cout_pg, cin_pg = spec.cout // spec.groups, spec.cin // spec.groups
    grad = np.zeros(spec.weight_shape)
    for c in range(spec.cout):
        base = (c // cout_pg) * cin_pg
        for kk in range(cin_pg):
            for i in range(spec.k):
                for j in range(spec.k):
                    acc = 0.0
                    for n in range(n_batch):
                        for oy in range(U.shape[2]):
                            iy = oy * spec.stride + (i - half) * d
                            if not 0 <= iy < height:
                                continue
                            for ox in range(U.shape[3]):
                                ix = ox * spec.stride + (j - half) * d
                                if 0 <= ix < width:
                                    acc += U[n, c, oy, ox] * F[n, base + kk, iy, ix]
                    grad[c, kk, i, j] = acc
    return grad


class TestImpulseResponse:
    @pytest.mark.parametrize("strategy", ["reference", "masked", "rearranged"])
    @pytest.mark.parametrize("centre", [(4, 4), (1, 6)])
    def test_every_channel_pair(self, strategy, centre):
        rng = Rng(7)
        spec = ConvSpec(4, 4)
        D = build_psconv(4, 4, PATTERN)
        G = randn(spec.weight_shape, rng)
        y0, x0 = centre
        for k0 in range(4):
            F = np.zeros((1, 4, 9, 9))
            F[0, k0, y0, x0] = 1.0
            expected = np.zeros((1, 4, 9, 9))
            for c in range(4):
                d = int(D.entries[c, k0])
                for i in range(3):
                    for j in range(3):
                        y, x = y0 - (i - 1) * d, x0 - (j - 1) * d
                        if 0 <= y < 9 and 0 <= x < 9:
                            expected[0, c, y, x] = G[c, k0, i, j]
            out = psconv_forward(F, G, spec, D, strategy)
            assert max_abs_diff(out, expected) <= 1e-12, (k0, strategy)


class TestLinearity:
    @pytest.mark.parametrize("strategy", ["reference", "masked", "rearranged"])
    def test_superposition(self, strategy):
        rng = Rng(21)
        spec = ConvSpec(8, 8, 3, 2, 2)
        D = build_psconv_grouped(8, 8, 2, PATTERN)
        F1, F2 = randn((2, 8, 9, 8), rng), randn((2, 8, 9, 8), rng)
        G = randn(spec.weight_shape, rng)
        a, b = 1.75, -0.4
        lhs = psconv_forward(a * F1 + b * F2, G, spec, D, strategy)
        rhs = a * psconv_forward(F1, G, spec, D, strategy) + b * psconv_forward(F2, G, spec, D, strategy)
        assert max_abs_diff(lhs, rhs) <= TOL


class TestBackwardExamples:
    def test_pointwise_backward_input_is_transposed_mix(self, rng):
        spec = ConvSpec(4, 6, 1)
        G = randn(spec.weight_shape, rng)
        U = randn((2, 6, 5, 7), rng)
        gin = conv2d_backward_input(U, G, spec, build_uniform(6, 4, 1), (5, 7))
        expected = np.einsum("ck,ncyx->nkyx", G[:, :, 0, 0], U)
        assert max_abs_diff(gin, expected) <= 1e-12

    def test_zero_grad_out_gives_zero_input_gradient(self, rng):
        spec = ConvSpec(8, 8, 3, 2, 2)
        D = build_psconv_grouped(8, 8, 2, PATTERN)
        gin = conv2d_backward_input(np.zeros((1, 8, 4, 4)), randn(spec.weight_shape, rng), spec, D, (7, 7))
        assert gin.shape == (1, 8, 7, 7)
        assert not np.any(gin)

    def test_zero_input_gives_zero_weight_gradient(self, rng):
        spec = ConvSpec(8, 8)
        D = build_psconv(8, 8, PATTERN)
        gw = conv2d_backward_weight(randn((1, 8, 6, 6), rng), np.zeros((1, 8, 6, 6)), spec, D)
        assert gw.shape == spec.weight_shape
        assert not np.any(gw)

    @pytest.mark.parametrize("d,stride,groups", [(1, 1, 1), (2, 1, 1), (2, 2, 2), (3, 1, 2)])
    def test_uniform_weight_gradient_matches_loops(self, d, stride, groups):
        rng = Rng(d * 100 + stride * 10 + groups)
        spec = ConvSpec(4, 4, 3, stride, groups)
        F = randn((2, 4, 7, 6), rng)
        U = randn((2, 4) + spec.output_hw(7, 6), rng)
        gw = conv2d_backward_weight(U, F, spec, build_uniform(4, 4, d, groups))
        assert max_abs_diff(gw, _weight_grad_loops(U, F, spec, d)) <= 1e-10
