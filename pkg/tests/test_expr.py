import numpy as np
import pytest

from frozenmix.expr import ExpressionError, compile_expression


def test_grammar_evaluates():
    pts = np.array([[0.0, 1.0], [3.0, 4.0]])
    f = compile_expression("1 + 0.5*min(1, pow(norm(), 0.5))", 2)
    np.testing.assert_allclose(f(pts), [1.5, 1.5])
    g = compile_expression("0.5*sin(x1) * cos(x2) - abs(x1)/2", 2)
    np.testing.assert_allclose(g(pts), 0.5 * np.sin(pts[:, 0]) * np.cos(pts[:, 1]) - np.abs(pts[:, 0]) / 2)
    assert compile_expression("pi", 1)(np.zeros((3, 1))).shape == (3,)


@pytest.mark.parametrize("src", ["__import__('os')", "x3", "exp(x1)", "x1 ** 2", "lambda: 1", "x1.real", "min(x1)"])
def test_grammar_rejects(src):
    with pytest.raises(ExpressionError):
        compile_expression(src, 2)(np.zeros((1, 2)))
