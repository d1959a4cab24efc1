import numpy as np
import pytest

from role_forge.autodiff import PRIMITIVES, DiffValue, DomainError, ShapeError, Tape, finite_diff_check


def run_scalar(build, x):
    tape = Tape()
    leaf = tape.leaf(x, requires_grad=True)
    out = build(tape, leaf)
    tape.backward(out)
    return out, leaf


def test_matmul_example():
    tape = Tape()
    out = tape.matmul(tape.const([[1.0, 2.0], [3.0, 4.0]]), tape.const([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_relu_example():
    tape = Tape()
    np.testing.assert_array_equal(tape.relu(tape.const([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_frobenius_example():
    tape = Tape()
    out = tape.frobenius_norm(tape.const([[0.0, 1.0], [1.0, 0.0]]))
    assert out.item() == pytest.approx(np.sqrt(2.0), abs=1e-15)


def test_backward_square():
    _, x = run_scalar(lambda t, v: t.sum(t.square(v)), np.array([3.0]))
    assert x.grad[0] == 6.0


def test_backward_sigmoid_at_zero():
    _, x = run_scalar(lambda t, v: t.sum(t.sigmoid(v)), np.zeros(5))
    np.testing.assert_allclose(x.grad, 0.25, rtol=0, atol=1e-15)


@pytest.mark.parametrize("x0, expected", [(2.0, 0.0), (0.5, 1.0), (1.0, 1.0)])
def test_backward_scalar_min(x0, expected):
    _, x = run_scalar(lambda t, v: t.sum(t.scalar_min(v, 1.0)), np.array([x0]))
    assert x.grad[0] == expected


@pytest.mark.parametrize(
    "prim, x0, expected",
    [("relu", 0.0, 0.0), ("clamp_min", 0.1, 1.0), ("abs", 0.0, 0.0)],
)
def test_kink_conventions(prim, x0, expected):
    if prim == "clamp_min":
        build = lambda t, v: t.sum(t.clamp_min(v, 0.1))  # noqa: E731
    else:
        build = lambda t, v: t.sum(t.apply(prim, v))  # noqa: E731
    _, x = run_scalar(build, np.array([x0]))
    assert x.grad[0] == expected


def test_shape_mismatch_names_both_shapes():
    tape = Tape()
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)|\(2, 3\).*\(4, 1\)"):
        tape.matmul(tape.const(np.zeros((2, 3))), tape.const(np.zeros((4, 1))))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        tape.mul(tape.const(np.zeros((2, 3))), tape.const(np.zeros((3, 2))))


def test_bias_add_only_over_last_axis():
    tape = Tape()
    out = tape.add(tape.const(np.zeros((2, 3))), tape.const([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
    with pytest.raises(ShapeError):
        tape.add(tape.const(np.zeros((2, 3))), tape.const([1.0, 2.0]))


@pytest.mark.parametrize("prim, bad", [("log", 0.0), ("log", -1.0), ("sqrt", -2.0), ("sqrt", 0.0)])
def test_domain_errors(prim, bad):
    tape = Tape()
    with pytest.raises(DomainError):
        tape.apply(prim, tape.const([1.0, bad]))


def test_backward_rejects_non_scalar():
    tape = Tape()
    x = tape.leaf(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        tape.backward(tape.square(x))


def test_fan_out_accumulates():
    # y = x * x + x  ->  dy/dx = 2x + 1
    tape = Tape()
    x = tape.leaf([2.0], requires_grad=True)
    y = tape.add(tape.mul(x, x), x)
    tape.backward(y)
    assert x.grad[0] == 5.0


def test_rank_limit():
    with pytest.raises(ShapeError):
        DiffValue(np.zeros((1, 1, 1, 1, 1)))


# --- gradient checks for every primitive -------------------------------------------------

KINKS = {"relu": 0.0, "abs": 0.0, "scalar_min": 0.3, "clamp_min": 0.3}


def _inputs(prim, rng):
    """Random operands for ``prim`` plus the builder applying it."""
    a = rng.standard_normal((3, 4))
    if prim in KINKS:
        k = KINKS[prim]
        a = np.where(np.abs(a - k) < 1e-3, a + 1e-2, a)
    if prim in ("log", "sqrt"):
        a = rng.uniform(0.5, 2.0, (3, 4))
    one = lambda t, x: t.apply(prim, x[0])  # noqa: E731
    table = {
        "matmul": ([a, rng.standard_normal((4, 2))], lambda t, x: t.matmul(x[0], x[1])),
        "bmm": (
            [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2))],
            lambda t, x: t.bmm(x[0], x[1]),
        ),
        "add": ([a, rng.standard_normal(4)], lambda t, x: t.add(x[0], x[1])),
        "sub": ([a, rng.standard_normal((3, 4))], lambda t, x: t.sub(x[0], x[1])),
        "mul": ([a, rng.standard_normal((3, 4))], lambda t, x: t.mul(x[0], x[1])),
        "div": ([a, rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4))], lambda t, x: t.div(x[0], x[1])),
        "scale": ([a], lambda t, x: t.scale(x[0], -1.7)),
        "shift": ([a], lambda t, x: t.shift(x[0], 0.4)),
        "scalar_min": ([a], lambda t, x: t.scalar_min(x[0], 0.3)),
        "clamp_min": ([a], lambda t, x: t.clamp_min(x[0], 0.3)),
        "sum": ([a], lambda t, x: t.sum(x[0], axis=0)),
        "mean": ([a], lambda t, x: t.mean(x[0], axis=-1)),
        "frobenius_norm": ([a], lambda t, x: t.frobenius_norm(x[0], axis=-1)),
        "concat": ([a, rng.standard_normal((3, 2))], lambda t, x: t.concat([x[0], x[1]], axis=-1)),
        "slice": ([a], lambda t, x: t.slice(x[0], (slice(1, 3), slice(None, None, 2)))),
        "reshape": ([a], lambda t, x: t.reshape(x[0], (2, 6))),
        "gather": ([a], lambda t, x: t.gather(x[0], [2, 0, 2, 1])),
        "take": ([a], lambda t, x: t.take(x[0], [3, 0, 3])),
    }
    return table.get(prim, ([a], one))


@pytest.mark.parametrize("prim", PRIMITIVES)
def test_primitive_gradients_match_finite_differences(prim):
    rng = np.random.default_rng(abs(hash(prim)) % 2**32)
    tol = 1e-4 if prim in KINKS else 1e-6
    worst = 0.0
    for _ in range(100):
        arrays, build = _inputs(prim, rng)
        out_shape = build(Tape(record=False), [DiffValue(a) for a in arrays]).shape
        w = rng.standard_normal(out_shape)
        params = {f"x{k}": a for k, a in enumerate(arrays)}

        def f(tape, leaves):
            out = build(tape, [leaves[f"x{k}"] for k in range(len(arrays))])
            return tape.sum(tape.mul(out, tape.const(w)))

        worst = max(worst, finite_diff_check(f, params, h=1e-6))
    assert worst < tol, f"{prim}: {worst}"


def test_finite_diff_check_quadratic():
    rng = np.random.default_rng(0)
    params = {"x": rng.standard_normal(10)}
    err = finite_diff_check(lambda t, p: t.sum(t.square(p["x"])), params)
    assert err < 1e-7


def test_finite_diff_check_reports_nonfinite():
    params = {"x": np.array([1e-6])}
    with pytest.raises(FloatingPointError, match=r"x\[\(0,\)\]"):
        finite_diff_check(lambda t, p: t.sum(t.log(p["x"])), params, h=1e-3)


def test_finite_diff_check_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t, p: t.sum(p["x"]), {"x": np.ones(2)}, h=0.0)


def _mlp_like(tape, x, w):
    return tape.sum(tape.tanh(tape.matmul(tape.relu(x), w)))


def test_zero_grad_then_backward_is_idempotent():
    rng = np.random.default_rng(1)
    x0, w0 = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    grads = []
    for _ in range(2):
        tape = Tape()
        x = tape.leaf(x0, requires_grad=True)
        w = tape.leaf(w0, requires_grad=True)
        tape.backward(_mlp_like(tape, x, w))
        grads.append((x.grad.copy(), w.grad.copy()))
        tape.zero_grad()
        x.zero_grad()
        w.zero_grad()
        assert not x.grad.any() and not w.grad.any()
    np.testing.assert_array_equal(grads[0][0], grads[1][0])
    np.testing.assert_array_equal(grads[0][1], grads[1][1])


def test_replay_is_bit_identical():
    rng = np.random.default_rng(2)
    x0, w0 = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    outs = [_mlp_like(Tape(), Tape().const(x0), Tape().const(w0)).data for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()


def test_tape_is_topologically_ordered():
    tape = Tape()
    x = tape.leaf(np.ones(3), requires_grad=True)
    y = tape.sum(tape.exp(tape.square(x)))
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            assert inp.kind == "leaf" or id(inp) in seen
        seen.add(id(node))
    assert tape.nodes[-1] is y


def test_non_recording_tape_keeps_nothing():
    tape = Tape(record=False)
    x = tape.leaf(np.ones(3), requires_grad=True)
    tape.sum(tape.square(x))
    assert tape.nodes == []
    assert not x.requires_grad
