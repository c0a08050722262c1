import numpy as np
import pytest

from regimekit import autodiff as ad


def test_activation_fixed_points():
    assert ad.sigmoid(ad.constant(0.0)).item() == 0.5
    assert ad.tanh(ad.constant(0.0)).item() == 0.0
    out = ad.softmax(ad.constant(np.zeros(3))).data
    assert np.allclose(out, 1.0 / 3.0, atol=1e-15)


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(3, 1))
    expected = np.zeros((2, 1))
    for i in range(2):
        for j in range(1):
            for k in range(3):
                expected[i, j] += a[i, k] * b[k, j]
    got = ad.matmul(ad.constant(a), ad.constant(b)).data
    assert np.allclose(got, expected, atol=1e-15)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))


def test_backward_linear_and_quadratic():
    with ad.Tape() as t:
        p = ad.Parameter(np.array([1.0, -2.0, 3.0]), "p")
        loss = ad.reduce_sum(p)
    t.backward(loss)
    assert np.array_equal(p.grad, np.ones(3))

    with ad.Tape() as t:
        q = ad.Parameter(np.array([1.0, -2.0, 3.0]), "q")
        loss = ad.reduce_sum(ad.mul(q, q))
    t.backward(loss)
    assert np.allclose(q.grad, 2.0 * q.data, atol=1e-15)


def test_backward_requires_scalar():
    with ad.Tape() as t:
        p = ad.Parameter(np.ones(3), "p")
        out = ad.mul(p, p)
    with pytest.raises(ad.EvaluationError, match="scalar"):
        t.backward(out)


def test_gradient_accumulates_across_backwards():
    with ad.Tape() as t:
        p = ad.Parameter(np.array([1.0, 2.0]), "p")
        loss = ad.reduce_sum(ad.mul(p, p))
    t.backward(loss)
    once = p.grad.copy()
    t.backward(loss)
    assert np.array_equal(p.grad, 2.0 * once)


def test_grad_check_simple_quadratic():
    p = ad.Parameter(np.array([1.0, 2.0]), "p")
    err = ad.grad_check(lambda: ad.reduce_sum(ad.mul(p, p)), [p])
    assert err < 1e-9


def test_random_composite_graph_matches_central_differences():
    rng = np.random.default_rng(42)
    w = ad.Parameter(rng.normal(size=(4, 3)), "w")
    b = ad.Parameter(rng.normal(size=3), "b")
    x = rng.normal(size=(5, 4))

    def f():
        h = ad.tanh(ad.add(ad.matmul(ad.constant(x), w), b))
        s = ad.softmax(h)
        return ad.reduce_sum(ad.mul(s, ad.exp(ad.scale(h, 0.3))))

    assert ad.grad_check(f, [w, b]) < 1e-6


@pytest.mark.parametrize("name", [
    "add", "sub", "mul", "matmul", "concat", "slice", "reshape", "clip",
    "sigmoid", "tanh", "relu", "silu", "exp", "log", "softmax", "logsumexp",
    "reduce_sum", "reduce_mean", "scale",
])
def test_primitive_vjps_match_central_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    a = ad.Parameter(rng.uniform(0.2, 1.5, size=(3, 4)), "a")
    b = ad.Parameter(rng.uniform(0.2, 1.5, size=(3, 4)), "b")

    builders = {
        "add": lambda: ad.add(a, b),
        "sub": lambda: ad.sub(a, b),
        "mul": lambda: ad.mul(a, b),
        "matmul": lambda: ad.matmul(a, ad.reshape(b, (4, 3))),
        "concat": lambda: ad.concat([a, b], axis=-1),
        "slice": lambda: ad.slice_axis(a, -1, 1, 3),
        "reshape": lambda: ad.reshape(a, (4, 3)),
        "clip": lambda: ad.clip(a, 0.4, 1.2),
        "sigmoid": lambda: ad.sigmoid(a),
        "tanh": lambda: ad.tanh(a),
        "relu": lambda: ad.relu(ad.sub(a, b)),
        "silu": lambda: ad.silu(a),
        "exp": lambda: ad.exp(a),
        "log": lambda: ad.log(a),
        "softmax": lambda: ad.softmax(a),
        "logsumexp": lambda: ad.logsumexp(a),
        "reduce_sum": lambda: ad.reduce_sum(a, axis=0),
        "reduce_mean": lambda: ad.reduce_mean(a, axis=1),
        "scale": lambda: ad.scale(a, -1.7),
    }
    weights = rng.normal(size=builders[name]().shape)

    def f():
        return ad.reduce_sum(ad.mul(builders[name](), ad.constant(weights)))

    assert ad.grad_check(f, [a, b]) < 1e-6


def test_broadcast_add_bias_gradient():
    rng = np.random.default_rng(3)
    w = ad.Parameter(rng.normal(size=(5, 3)), "w")
    b = ad.Parameter(rng.normal(size=3), "b")

    def f():
        return ad.reduce_sum(ad.mul(ad.add(w, b), ad.constant(rng_w)))

    rng_w = rng.normal(size=(5, 3))
    assert ad.grad_check(f, [w, b]) < 1e-6


def test_softmax_rows_sum_to_one_and_lie_inside_unit_interval():
    rng = np.random.default_rng(7)
    for _ in range(50):
        x = rng.normal(scale=rng.uniform(0.1, 50.0), size=(4, 6))
        y = ad.softmax(ad.constant(x)).data
        assert np.all(np.abs(y.sum(axis=-1) - 1.0) < 1e-12)
        assert np.all((y > 0.0) & (y < 1.0))


def test_forward_is_deterministic():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(6, 6))
    r1 = ad.softmax(ad.tanh(ad.constant(x))).data
    r2 = ad.softmax(ad.tanh(ad.constant(x.copy()))).data
    assert np.array_equal(r1, r2)


# ---------------------------------------------------------------------------
# B-spline basis


def deboor_basis(x: float, knots: np.ndarray, i: int, k: int) -> float:
    """Textbook Cox-de Boor recursion for a single basis function."""
    if k == 0:
        return 1.0 if knots[i] <= x < knots[i + 1] else 0.0
    left = 0.0
    if knots[i + k] != knots[i]:
        left = (x - knots[i]) / (knots[i + k] - knots[i]) * deboor_basis(x, knots, i, k - 1)
    right = 0.0
    if knots[i + k + 1] != knots[i + 1]:
        right = (knots[i + k + 1] - x) / (knots[i + k + 1] - knots[i + 1]) \
            * deboor_basis(x, knots, i + 1, k - 1)
    return left + right


def test_bspline_values_match_deboor_recursion_at_grid_midpoints():
    grid, degree = 5, 3
    knots = ad.make_knots(grid, degree)
    mids = (knots[:-1] + knots[1:]) / 2.0
    mids = mids[(mids > -1.0) & (mids < 1.0)]
    basis = ad.bspline_basis(ad.constant(mids), knots, degree).data
    for xi, x in enumerate(mids):
        for b in range(grid + degree):
            assert basis[xi, b] == pytest.approx(
                deboor_basis(float(x), knots, b, degree), abs=1e-12)


def test_bspline_partition_of_unity_in_knot_interior():
    grid, degree = 5, 3
    knots = ad.make_knots(grid, degree)
    x = np.linspace(-0.999, 0.999, 101)
    basis = ad.bspline_basis(ad.constant(x), knots, degree).data
    assert np.all(np.abs(basis.sum(axis=-1) - 1.0) < 1e-12)


def test_bspline_local_support():
    grid, degree = 5, 3
    knots = ad.make_knots(grid, degree)
    x = np.linspace(-0.999, 0.999, 400)
    basis = ad.bspline_basis(ad.constant(x), knots, degree).data
    h = 2.0 / grid
    for b in range(grid + degree):
        nonzero = x[basis[:, b] > 1e-14]
        if len(nonzero):
            # support spans at most degree+1 knot intervals
            assert nonzero.max() - nonzero.min() <= (degree + 1) * h + 1e-9


def test_bspline_gradient_matches_central_differences():
    grid, degree = 5, 3
    knots = ad.make_knots(grid, degree)
    rng = np.random.default_rng(5)
    p = ad.Parameter(rng.uniform(-0.8, 0.8, size=4), "x")
    weights = rng.normal(size=(4, grid + degree))

    def f():
        return ad.reduce_sum(ad.mul(ad.bspline_basis(p, knots, degree),
                                    ad.constant(weights)))

    assert ad.grad_check(f, [p]) < 1e-6


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    named = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4),
             "scalar": np.array(2.5)}
    path = tmp_path / "ck.bin"
    ad.save_checkpoint(path, named)
    loaded = ad.load_checkpoint(path)
    assert set(loaded) == set(named)
    for k in named:
        assert np.array_equal(loaded[k], named[k])


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        ad.load_checkpoint(path)
