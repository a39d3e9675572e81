"""Closed-form coefficient expressions.

A tiny, vectorised expression language used for inline coefficient fields in
config files. Expressions are parsed with :mod:`ast` and only a whitelisted
subset is accepted::

    1 + 0.5*min(1, pow(norm(), 0.5))
    0.5*sin(x1) * cos(x2)

Variables are ``x1 .. xd`` (1-based), ``pi`` is a constant, and the callable
set is ``sin, cos, min, abs, pow, norm``. ``norm()`` is the Euclidean norm of
the evaluation point; ``norm(e1, e2, ...)`` is the norm of its arguments.
"""

from __future__ import annotations

import ast
import operator
from typing import Callable

import numpy as np

__all__ = ["ExpressionError", "compile_expression"]


class ExpressionError(ValueError):
    """Raised for expressions outside the accepted grammar."""


_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
}


def _fn_min(*args):
    if len(args) < 2:
        raise ExpressionError("min() needs at least two arguments")
    out = args[0]
    for a in args[1:]:
        out = np.minimum(out, a)
    return out


_FUNCS: dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "abs": np.abs,
    "min": _fn_min,
    "pow": np.power,
}


class _Compiler:
    def __init__(self, dim: int):
        self.dim = dim

    def build(self, node: ast.AST) -> Callable[[np.ndarray], np.ndarray]:
        if isinstance(node, ast.Expression):
            return self.build(node.body)
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ExpressionError(f"unsupported constant {node.value!r}")
            value = float(node.value)
            return lambda x: np.full(x.shape[0], value)
        if isinstance(node, ast.Name):
            return self._name(node.id)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = self.build(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda x: -inner(x)
            return inner
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            op = _BINOPS[type(node.op)]
            left, right = self.build(node.left), self.build(node.right)
            return lambda x: op(left(x), right(x))
        if isinstance(node, ast.Call):
            return self._call(node)
        raise ExpressionError(f"unsupported syntax: {ast.dump(node)}")

    def _name(self, name: str):
        if name == "pi":
            return lambda x: np.full(x.shape[0], np.pi)
        if name.startswith("x") and name[1:].isdigit():
            k = int(name[1:])
            if not 1 <= k <= self.dim:
                raise ExpressionError(f"variable {name} out of range for d={self.dim}")
            return lambda x: x[:, k - 1]
        raise ExpressionError(f"unknown name {name!r}")

    def _call(self, node: ast.Call):
        if not isinstance(node.func, ast.Name) or node.keywords:
            raise ExpressionError("only plain calls like sin(x1) are allowed")
        fname = node.func.id
        args = [self.build(a) for a in node.args]
        if fname == "norm":
            if not args:
                return lambda x: np.sqrt(np.sum(x * x, axis=1))
            return lambda x: np.sqrt(sum(a(x) ** 2 for a in args))
        if fname not in _FUNCS:
            raise ExpressionError(f"unknown function {fname!r}")
        fn = _FUNCS[fname]
        if fname in ("sin", "cos", "abs") and len(args) != 1:
            raise ExpressionError(f"{fname}() takes one argument")
        if fname == "pow" and len(args) != 2:
            raise ExpressionError("pow() takes two arguments")
        return lambda x: fn(*(a(x) for a in args))


def compile_expression(source: str, dim: int) -> Callable[[np.ndarray], np.ndarray]:
    """Compile ``source`` into a function mapping an ``(n, dim)`` array to ``(n,)``."""
    try:
        tree = ast.parse(source.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {source!r}: {exc.msg}") from None
    fn = _Compiler(dim).build(tree)

    def evaluate(points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.broadcast_to(fn(pts), (pts.shape[0],)).astype(float)

    return evaluate
