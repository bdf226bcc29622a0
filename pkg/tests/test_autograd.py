import numpy as np
import pytest

from krrmix import autograd as ag
from krrmix.errors import NonScalarLoss, ShapeMismatch, TargetOutOfRange
from krrmix.linalg import CausalMask
from krrmix.rope import rope_tables


def gen(seed):
    return np.random.Generator(np.random.Philox(key=seed))


def weighted_sum(node, w):
    """Reduce any-output op to a scalar with fixed random weights."""
    return ag.reduce_sum(ag.mul(node, w))


class TestRecordBasics:
    def test_add_doubles(self):
        tape = ag.Tape()
        a = tape.leaf(np.arange(4.0))
        out = ag.record("add", [a, a])
        np.testing.assert_array_equal(out.value, 2 * np.arange(4.0))

    def test_matmul_identity(self):
        tape = ag.Tape()
        b = tape.leaf(np.arange(6.0).reshape(2, 3))
        out = ag.record("matmul", [tape.leaf(np.eye(2)), b])
        np.testing.assert_array_equal(out.value, b.value)

    def test_sigmoid_at_zero(self):
        tape = ag.Tape()
        out = ag.sigmoid(tape.leaf(np.zeros(1)))
        np.testing.assert_allclose(out.value, 0.5)

    def test_plain_arrays_skip_recording(self):
        out = ag.matmul(np.eye(2), np.ones((2, 2)))
        assert isinstance(out, np.ndarray)

    def test_unknown_primitive(self):
        with pytest.raises(KeyError):
            ag.record("frobnicate", [np.ones(2)])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ag.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestBackwardBasics:
    def test_bilinear_rule(self):
        tape = ag.Tape()
        a = tape.leaf(gen(1).uniform(-1, 1, (3, 4)))
        b = tape.leaf(gen(2).uniform(-1, 1, (4, 2)))
        loss = ag.reduce_sum(ag.matmul(a, b))
        grads = ag.backward(tape, loss)
        ones = np.ones((3, 2))
        np.testing.assert_allclose(grads[a.id], ones @ b.value.T)
        np.testing.assert_allclose(grads[b.id], a.value.T @ ones)

    def test_sigmoid_grad_at_zero(self):
        tape = ag.Tape()
        x = tape.leaf(np.zeros(1))
        grads = ag.backward(tape, ag.reduce_sum(ag.sigmoid(x)))
        np.testing.assert_allclose(grads[x.id], 0.25)

    def test_non_scalar_loss_raises(self):
        tape = ag.Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(NonScalarLoss):
            ag.backward(tape, ag.mul(x, x))

    def test_backward_twice_identical(self):
        tape = ag.Tape()
        x = tape.leaf(gen(3).uniform(-1, 1, (4, 4)))
        loss = ag.reduce_sum(ag.exp(ag.mul(x, x)))
        g1 = ag.backward(tape, loss)
        g2 = ag.backward(tape, loss)
        assert g1.keys() == g2.keys()
        for k in g1:
            np.testing.assert_array_equal(g1[k], g2[k])

    def test_accumulation_matches_duplicated_input(self):
        # x used by two consumers should get the sum of both contributions
        xv = gen(4).uniform(-1, 1, (3, 3))
        tape = ag.Tape()
        x = tape.leaf(xv)
        loss = ag.add(ag.reduce_sum(ag.mul(x, x)), ag.reduce_sum(ag.exp(x)))
        gx = ag.backward(tape, loss)[x.id]

        tape2 = ag.Tape()
        x1 = tape2.leaf(xv)
        x2 = tape2.leaf(xv)
        loss2 = ag.add(ag.reduce_sum(ag.mul(x1, x1)), ag.reduce_sum(ag.exp(x2)))
        g2 = ag.backward(tape2, loss2)
        np.testing.assert_allclose(gx, g2[x1.id] + g2[x2.id])

    def test_constant_inputs_get_no_grad(self):
        tape = ag.Tape()
        x = tape.leaf(np.ones((2, 2)))
        loss = ag.reduce_sum(ag.mul(x, np.full((2, 2), 3.0)))
        grads = ag.backward(tape, loss)
        assert -1 not in grads
        np.testing.assert_allclose(grads[x.id], 3.0)


class TestFiniteDifferenceChecker:
    def test_quadratic(self):
        def f(p):
            return ag.reduce_sum(ag.mul(p["x"], p["x"]))

        err = ag.finite_difference_check(f, {"x": np.array([3.0])})
        assert err <= 1e-9

    def test_constant_function(self):
        def f(p):
            return ag.reduce_sum(ag.mul(p["x"], np.zeros(2)))

        assert ag.finite_difference_check(f, {"x": np.ones(2)}) == 0.0


PRIMITIVE_CASES = {}


def primitive_case(name):
    def deco(fn):
        PRIMITIVE_CASES[name] = fn
        return fn

    return deco


@primitive_case("add")
def _case_add(rng):
    w = rng.uniform(-1, 1, (3, 4))
    return lambda p: weighted_sum(ag.add(p["a"], p["b"]), w), {
        "a": rng.uniform(-1, 1, (3, 4)), "b": rng.uniform(-1, 1, (1, 4))}


@primitive_case("mul")
def _case_mul(rng):
    w = rng.uniform(-1, 1, (3, 4))
    return lambda p: weighted_sum(ag.mul(p["a"], p["b"]), w), {
        "a": rng.uniform(-1, 1, (3, 4)), "b": rng.uniform(-1, 1, (3, 1))}


@primitive_case("smul")
def _case_smul(rng):
    w = rng.uniform(-1, 1, (3, 3))
    return lambda p: weighted_sum(ag.smul(p["a"], -1.7), w), {"a": rng.uniform(-1, 1, (3, 3))}


@primitive_case("matmul")
def _case_matmul(rng):
    w = rng.uniform(-1, 1, (2, 3, 5))
    return lambda p: weighted_sum(ag.matmul(p["a"], p["b"]), w), {
        "a": rng.uniform(-1, 1, (2, 3, 4)), "b": rng.uniform(-1, 1, (4, 5))}


@primitive_case("transpose")
def _case_transpose(rng):
    w = rng.uniform(-1, 1, (4, 3))
    return lambda p: weighted_sum(ag.transpose(p["a"]), w), {"a": rng.uniform(-1, 1, (3, 4))}


@primitive_case("permute")
def _case_permute(rng):
    w = rng.uniform(-1, 1, (4, 2, 3))
    return lambda p: weighted_sum(ag.permute(p["a"], (2, 0, 1)), w), {
        "a": rng.uniform(-1, 1, (2, 3, 4))}


@primitive_case("reshape")
def _case_reshape(rng):
    w = rng.uniform(-1, 1, (12,))
    return lambda p: weighted_sum(ag.reshape(p["a"], (12,)), w), {
        "a": rng.uniform(-1, 1, (3, 4))}


@primitive_case("reduce_sum")
def _case_reduce_sum(rng):
    w = rng.uniform(-1, 1, (3,))
    return lambda p: weighted_sum(ag.reduce_sum(p["a"], axis=1), w), {
        "a": rng.uniform(-1, 1, (3, 4))}


@primitive_case("sigmoid")
def _case_sigmoid(rng):
    w = rng.uniform(-1, 1, (5,))
    return lambda p: weighted_sum(ag.sigmoid(p["a"]), w), {"a": rng.uniform(-3, 3, (5,))}


@primitive_case("exp")
def _case_exp(rng):
    w = rng.uniform(-1, 1, (5,))
    return lambda p: weighted_sum(ag.exp(p["a"]), w), {"a": rng.uniform(-2, 2, (5,))}


@primitive_case("softplus")
def _case_softplus(rng):
    w = rng.uniform(-1, 1, (5,))
    return lambda p: weighted_sum(ag.softplus(p["a"]), w), {"a": rng.uniform(-3, 3, (5,))}


@primitive_case("gelu")
def _case_gelu(rng):
    w = rng.uniform(-1, 1, (6,))
    return lambda p: weighted_sum(ag.gelu(p["a"]), w), {"a": rng.uniform(-3, 3, (6,))}


@primitive_case("layer_norm")
def _case_layer_norm(rng):
    w = rng.uniform(-1, 1, (3, 6))
    return lambda p: weighted_sum(ag.layer_norm(p["a"]), w), {
        "a": rng.uniform(-2, 2, (3, 6))}


@primitive_case("softmax_masked")
def _case_softmax_masked(rng):
    w = rng.uniform(-1, 1, (4, 4))
    mask = CausalMask(4)
    return lambda p: weighted_sum(ag.softmax_masked(p["a"], mask=mask), w), {
        "a": rng.uniform(-2, 2, (4, 4))}


@primitive_case("l2_normalize_rows")
def _case_l2norm(rng):
    w = rng.uniform(-1, 1, (3, 5))
    return lambda p: weighted_sum(ag.l2_normalize_rows(p["a"]), w), {
        "a": rng.uniform(0.5, 2.0, (3, 5))}


@primitive_case("solve_general")
def _case_solve_general(rng):
    w = rng.uniform(-1, 1, (4, 2))
    a0 = rng.uniform(-1, 1, (4, 4)) + 4.0 * np.eye(4)
    return lambda p: weighted_sum(ag.solve_general(p["a"], p["b"]), w), {
        "a": a0, "b": rng.uniform(-1, 1, (4, 2))}


@primitive_case("solve_lower_triangular")
def _case_solve_tri(rng):
    w = rng.uniform(-1, 1, (4, 2))
    l0 = np.tril(rng.uniform(-1, 1, (4, 4))) + 3.0 * np.eye(4)
    return lambda p: weighted_sum(ag.solve_lower_triangular(p["l"], p["b"]), w), {
        "l": l0, "b": rng.uniform(-1, 1, (4, 2))}


@primitive_case("gather_rows")
def _case_gather_rows(rng):
    ids = rng.integers(0, 6, (7,))
    w = rng.uniform(-1, 1, (7, 3))
    return lambda p: weighted_sum(ag.gather_rows(p["t"], ids), w), {
        "t": rng.uniform(-1, 1, (6, 3))}


@primitive_case("cross_entropy")
def _case_cross_entropy(rng):
    targets = np.array([1, 3, -1, 0])
    return lambda p: ag.cross_entropy(p["z"], targets), {
        "z": rng.uniform(-2, 2, (4, 5))}


@primitive_case("slice_axis")
def _case_slice(rng):
    w = rng.uniform(-1, 1, (3, 2))
    return lambda p: weighted_sum(ag.slice_axis(p["a"], -1, 1, 3), w), {
        "a": rng.uniform(-1, 1, (3, 5))}


@primitive_case("concat")
def _case_concat(rng):
    w = rng.uniform(-1, 1, (3, 6))
    return lambda p: weighted_sum(ag.concat([p["a"], p["b"]], axis=-1), w), {
        "a": rng.uniform(-1, 1, (3, 2)), "b": rng.uniform(-1, 1, (3, 4))}


@primitive_case("rope")
def _case_rope(rng):
    cos, sin = rope_tables(np.arange(5), 6, np.float64)
    w = rng.uniform(-1, 1, (5, 6))
    return lambda p: weighted_sum(ag.rope_rotate(p["x"], cos, sin), w), {
        "x": rng.uniform(-1, 1, (5, 6))}


def test_every_registered_primitive_has_a_case():
    assert set(PRIMITIVE_CASES) == set(ag.FORWARD) == set(ag.BACKWARD)


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradient_matches_finite_differences(name):
    # 20 random draws per primitive, 64-bit, central differences
    worst = 0.0
    for trial in range(20):
        f, params = PRIMITIVE_CASES[name](gen(1000 * trial + hash(name) % 997))
        worst = max(worst, ag.finite_difference_check(f, params))
    assert worst <= 1e-5, f"{name}: max rel err {worst}"


class TestSolveBackwardOracle:
    def test_solve_grads_match_finite_differences(self):
        rng = gen(77)
        a0 = rng.uniform(-1, 1, (4, 4)) + 4.0 * np.eye(4)
        b0 = rng.uniform(-1, 1, (4, 3))

        def f(p):
            return ag.reduce_sum(ag.solve_general(p["a"], p["b"]))

        assert ag.finite_difference_check(f, {"a": a0, "b": b0}) <= 1e-5


class TestCrossEntropyErrors:
    def test_target_out_of_range(self):
        with pytest.raises(TargetOutOfRange):
            ag.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_all_ignored(self):
        with pytest.raises(TargetOutOfRange):
            ag.cross_entropy(np.zeros((2, 3)), np.array([-1, -1]))
