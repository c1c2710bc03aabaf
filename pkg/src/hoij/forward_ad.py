"""Forward-mode automatic differentiation on truncated Taylor scalars.

A ``TaylorScalar`` of order K carries coefficients c_0..c_K of a truncated
polynomial in one formal perturbation.  All arithmetic is exact truncated
polynomial arithmetic ((a*b)_k = sum_{j<=k} a_j b_{k-j}), and the elementary
functions exp/log/sigmoid/power propagate coefficients by their standard
recurrences, so c_k is exactly f^(k)/k! of whatever smooth expression
produced the scalar.

Mixed directional derivatives are computed by nesting: each nesting level is
an order-1 TaylorScalar (a dual number) whose coefficients may themselves be
TaylorScalars.  Evaluating a function on inputs nested through k levels and
reading off the coefficient of the product of all k perturbations gives the
exact k-th mixed directional derivative.  No derivative tensor is ever
materialized; evaluating a D-dimensional function costs O(2^k) scalar work
per input regardless of D.

Coefficient leaves are floats or numpy arrays.  Array leaves let a single
evaluation carry every data row of an estimating problem at once, which is
how the weighted-sum helpers below stay fast for large N.
"""

from __future__ import annotations

import numbers

import numpy as np
from scipy.special import expit

# Hard ceiling on the nesting depth (and hence on expansion order).  Term
# tables and acceptance targets use K <= 4; 6 leaves headroom.
K_MAX = 6


class NonFiniteValueError(ArithmeticError):
    """A derivative evaluation produced NaN or infinity."""


class TaylorScalar:
    """Truncated Taylor polynomial in one formal perturbation.

    ``coeffs[k]`` is the k-th Taylor coefficient; each coefficient is a
    float, a numpy array (batch of values), or a nested TaylorScalar
    belonging to an inner perturbation level.  Two TaylorScalars combined by
    arithmetic are assumed to live at the same nesting level (inputs built
    with :func:`nested_input` guarantee this); anything else is treated as a
    constant.
    """

    __slots__ = ("coeffs",)

    # Keep numpy from broadcasting elementwise over this object; reflected
    # operators below handle ndarray operands as constant payloads.
    __array_ufunc__ = None

    def __init__(self, coeffs):
        self.coeffs = list(coeffs)

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1

    def __repr__(self):
        return f"TaylorScalar({self.coeffs!r})"

    # -- ring operations ---------------------------------------------------

    def __add__(self, other):
        if isinstance(other, TaylorScalar):
            a, b = self._aligned(other)
            return TaylorScalar([x + y for x, y in zip(a, b)])
        out = list(self.coeffs)
        out[0] = out[0] + other
        return TaylorScalar(out)

    __radd__ = __add__

    def __neg__(self):
        return TaylorScalar([-c for c in self.coeffs])

    def __sub__(self, other):
        if isinstance(other, TaylorScalar):
            a, b = self._aligned(other)
            return TaylorScalar([x - y for x, y in zip(a, b)])
        out = list(self.coeffs)
        out[0] = out[0] - other
        return TaylorScalar(out)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, TaylorScalar):
            a, b = self._aligned(other)
            n = len(a)
            return TaylorScalar(
                [
                    _sum_terms([a[j] * b[k - j] for j in range(k + 1)])
                    for k in range(n)
                ]
            )
        return TaylorScalar([c * other for c in self.coeffs])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, TaylorScalar):
            a, b = self._aligned(other)
            out = [a[0] / b[0]]
            for k in range(1, len(a)):
                acc = a[k]
                for j in range(1, k + 1):
                    acc = acc - b[j] * out[k - j]
                out.append(acc / b[0])
            return TaylorScalar(out)
        return TaylorScalar([c / other for c in self.coeffs])

    def __rtruediv__(self, other):
        return self._constant_like(other) / self

    def __pow__(self, p):
        if isinstance(p, numbers.Integral):
            n = int(p)
            if n < 0:
                return self._constant_like(1.0) / (self ** (-n))
            result = self._constant_like(1.0)
            base = self
            while n:
                if n & 1:
                    result = result * base
                base = base * base
                n >>= 1
            return result
        return exp(log(self) * float(p))

    # -- helpers -----------------------------------------------------------

    def _aligned(self, other):
        if len(self.coeffs) != len(other.coeffs):
            raise ValueError(
                "TaylorScalar order mismatch: "
                f"{self.order} vs {other.order}"
            )
        return self.coeffs, other.coeffs

    def _constant_like(self, value):
        out = [0.0] * len(self.coeffs)
        out[0] = value
        return TaylorScalar(out)


def _sum_terms(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


# -- elementary functions on scalar-likes -----------------------------------


def exp(x):
    """exp on floats, arrays, or TaylorScalars (standard coefficient recurrence)."""
    if isinstance(x, TaylorScalar):
        a = x.coeffs
        out = [exp(a[0])]
        for k in range(1, len(a)):
            acc = _sum_terms([(j * a[j]) * out[k - j] for j in range(1, k + 1)])
            out.append(acc / k)
        return TaylorScalar(out)
    return np.exp(x)


def log(x):
    """Natural log on floats, arrays, or TaylorScalars."""
    if isinstance(x, TaylorScalar):
        a = x.coeffs
        out = [log(a[0])]
        for k in range(1, len(a)):
            acc = a[k]
            if k > 1:
                corr = _sum_terms(
                    [(j * out[j]) * a[k - j] for j in range(1, k)]
                )
                acc = acc - corr / k
            out.append(acc / a[0])
        return TaylorScalar(out)
    return np.log(x)


def sigmoid(x):
    """Logistic sigmoid; the base case uses a numerically stable expit."""
    if isinstance(x, TaylorScalar):
        a = x.coeffs
        y0 = sigmoid(a[0])
        ys = [y0]
        # u = y * (1 - y); u_k is available once y_0..y_k are known, and the
        # recurrence y_k = (1/k) sum_j j a_j u_{k-j} only consumes u_{<k}.
        us = [y0 * (1.0 - y0)]
        for k in range(1, len(a)):
            yk = _sum_terms([(j * a[j]) * us[k - j] for j in range(1, k + 1)]) / k
            ys.append(yk)
            if k < len(a) - 1:
                sq = _sum_terms([ys[i] * ys[k - i] for i in range(k + 1)])
                us.append(yk - sq)
        return TaylorScalar(ys)
    return expit(x)


def power(x, p):
    """x**p for scalar-likes; integer p stays in ring arithmetic."""
    if isinstance(x, TaylorScalar):
        return x ** p
    return x ** p


# Extensible primitive registry: models may look elementary functions up by
# name, and new primitives can be added without touching the engine.
ELEMENTARY = {"exp": exp, "log": log, "sigmoid": sigmoid, "power": power}


# -- nesting, seeding, extraction --------------------------------------------


def nested_input(theta0, directions):
    """Lift a float point through one order-1 level per direction.

    Returns a list of scalar-likes representing
    theta0 + eps_1 v_1 + ... + eps_k v_k with nilpotent eps_j.
    """
    x = [float(t) for t in theta0]
    for v in directions:
        if len(v) != len(x):
            raise ValueError(
                f"direction length {len(v)} != parameter dimension {len(x)}"
            )
        x = [TaylorScalar([xi, float(vi)]) for xi, vi in zip(x, v)]
    return x


def tangent(x):
    """First Taylor coefficient; constants have tangent zero."""
    if isinstance(x, TaylorScalar):
        return x.coeffs[1]
    return 0.0


def nested_coefficient(y, k):
    """Coefficient of eps_1 * ... * eps_k, i.e. the mixed directional derivative."""
    for _ in range(k):
        y = tangent(y)
    return y


def primal(x):
    """Strip all perturbation levels, returning the underlying value."""
    while isinstance(x, TaylorScalar):
        x = x.coeffs[0]
    return x


def map_leaves(x, fn):
    """Apply fn to every non-TaylorScalar leaf, preserving nesting structure."""
    if isinstance(x, TaylorScalar):
        return TaylorScalar([map_leaves(c, fn) for c in x.coeffs])
    return fn(x)


def _check_directions(directions, dim):
    k = len(directions)
    if k > K_MAX:
        raise ValueError(f"derivative order {k} exceeds the maximum {K_MAX}")
    for v in directions:
        if len(v) != dim:
            raise ValueError(
                f"direction length {len(v)} != parameter dimension {dim}"
            )


def directional_derivative(f, theta0, directions):
    """Exact mixed directional derivative of f at theta0.

    f maps a sequence of D scalar-likes to a sequence of scalar-likes and
    must be built from the arithmetic and elementary functions above.  With
    directions (v_1, ..., v_k) the return value is the order-k derivative
    tensor of f contracted against v_1 ... v_k.
    """
    k = len(directions)
    if k < 1:
        raise ValueError("at least one direction is required")
    _check_directions(directions, len(theta0))
    x = nested_input(theta0, directions)
    try:
        y = f(x)
    except ZeroDivisionError as err:
        raise NonFiniteValueError(f"division by zero during evaluation: {err}") from None
    out = np.array([float(nested_coefficient(yi, k)) for yi in y])
    if not np.all(np.isfinite(out)):
        raise NonFiniteValueError(
            f"non-finite directional derivative of order {k}: {out}"
        )
    return out


# -- weighted sums over an estimating problem's terms ------------------------


def _reduce_leaves(x, coeffs, coeff_total):
    # Contract a scalar-like carrying per-row array leaves against a
    # coefficient vector.  Float leaves are constant across rows.
    if isinstance(x, TaylorScalar):
        return TaylorScalar(
            [_reduce_leaves(c, coeffs, coeff_total) for c in x.coeffs]
        )
    if isinstance(x, np.ndarray):
        return float(coeffs @ x)
    return float(x) * coeff_total


def weighted_term_sum(problem, theta, coeffs, rows):
    """sum_i coeffs[i] * g_{rows[i]+1}(theta), as a list of D scalar-likes.

    ``rows`` holds 0-based data-row indices (the regularization term g_0 is
    never included here).  Uses the problem's vectorized batch evaluator
    when available, otherwise falls back to a per-datum loop over term_fn.
    """
    rows = np.asarray(rows, dtype=int)
    coeffs = np.asarray(coeffs, dtype=float)
    if rows.size == 0:
        return [0.0] * problem.dim_theta
    if problem.batch_fn is not None:
        outs = problem.batch_fn(theta, rows)
        total = float(coeffs.sum())
        return [_reduce_leaves(o, coeffs, total) for o in outs]
    acc = [0.0] * problem.dim_theta
    for c, r in zip(coeffs, rows):
        g = problem.term_fn(int(r) + 1, theta)
        acc = [a + float(c) * gj for a, gj in zip(acc, g)]
    return acc


def estimating_fn_scalars(problem, theta, weights):
    """G(theta, w) = (1/N)(g_0 + sum_n w_n g_n) in scalar-like arithmetic."""
    n = problem.n_terms
    g0 = problem.term_fn(0, theta)
    data = weighted_term_sum(problem, theta, np.asarray(weights, float), np.arange(n))
    return [(g0[j] + data[j]) / n for j in range(problem.dim_theta)]


def g_theta_derivative(problem, theta, weights, directions):
    """Directional derivative of theta -> G(theta, w) along the given directions.

    An empty direction tuple returns G itself.  The weighted sum over data is
    contracted row by row, so no order-(k+1) derivative array is formed.
    """
    weights = np.asarray(getattr(weights, "values", weights), dtype=float)
    k = len(directions)
    _check_directions(directions, problem.dim_theta)
    x = nested_input(theta, directions)
    g = estimating_fn_scalars(problem, x, weights)
    out = np.array([float(nested_coefficient(gj, k)) for gj in g])
    if not np.all(np.isfinite(out)):
        raise NonFiniteValueError(
            f"non-finite estimating-function derivative of order {k}"
        )
    return out


def g_weight_derivative(problem, theta, delta_w, directions):
    """Mixed theta-derivative of (1/N) sum_n g_n(theta) delta_w_n.

    This is the weight-direction derivative of G: the regularization term
    g_0 drops out, and rows with delta_w_n == 0 are skipped.  With no
    directions it returns the weighted sum itself.
    """
    delta_w = np.asarray(getattr(delta_w, "delta", delta_w), dtype=float)
    k = len(directions)
    _check_directions(directions, problem.dim_theta)
    rows = np.nonzero(delta_w)[0]
    if rows.size == 0:
        return np.zeros(problem.dim_theta)
    x = nested_input(theta, directions)
    total = weighted_term_sum(problem, x, delta_w[rows], rows)
    out = np.array(
        [float(nested_coefficient(tj, k)) / problem.n_terms for tj in total]
    )
    if not np.all(np.isfinite(out)):
        raise NonFiniteValueError(
            f"non-finite weight-direction derivative of order {k}"
        )
    return out
