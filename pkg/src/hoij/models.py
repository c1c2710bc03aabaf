"""Estimating problems, datasets, weight vectors, and the model registry.

An estimating problem is the root-finding system

    G(theta, w) = (1/N) (g_0(theta) + sum_n w_n g_n(theta)) = 0,

where w re-weights the per-datum terms g_n and g_0 is an optional
regularization term.  The built-in models expose g_n as the gradient of a
per-datum loss; all of them evaluate on the AD scalar types from
:mod:`hoij.forward_ad`, so one code path serves values and derivatives of
every order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import forward_ad as fad


class DatasetError(ValueError):
    """Raised for unparseable, empty, or non-finite input data."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable numeric dataset: an (N, P) feature matrix and optional response."""

    features: np.ndarray
    response: Optional[np.ndarray] = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise DatasetError(f"features must be a nonempty 2-d array, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            r, c = np.argwhere(~np.isfinite(feats))[0]
            raise DatasetError(f"non-finite feature value at row {r + 1}, column {c + 1}")
        object.__setattr__(self, "features", feats)
        if self.response is not None:
            resp = np.asarray(self.response, dtype=float)
            if resp.shape != (feats.shape[0],):
                raise DatasetError(
                    f"response length {resp.shape} does not match {feats.shape[0]} rows"
                )
            if not np.all(np.isfinite(resp)):
                r = int(np.argwhere(~np.isfinite(resp))[0])
                raise DatasetError(f"non-finite response value at row {r + 1}")
            object.__setattr__(self, "response", resp)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


def _parse_cell(token: str, row: int, col: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DatasetError(
            f"cannot parse {token!r} as a number at row {row}, column {col}"
        ) from None
    if not np.isfinite(value):
        raise DatasetError(f"non-finite value {token!r} at row {row}, column {col}")
    return value


def load_dataset(path, fmt: str = "csv", header: bool = False,
                 response: bool = False) -> Dataset:
    """Load a dataset from CSV or JSON.

    CSV rows are all-numeric; with ``response=True`` the last column is split
    off as the response.  JSON files hold a list of ``{"x": [...], "y": ...}``
    row objects (``y`` optional, but consistently present or absent).
    All values are parsed as 64-bit floats and must be finite.
    """
    if fmt == "csv":
        with open(path, newline="") as fh:
            raw = [row for row in csv.reader(fh) if row and any(t.strip() for t in row)]
        if header and raw:
            raw = raw[1:]
        if not raw:
            raise DatasetError(f"no rows in {path}")
        width = len(raw[0])
        rows = []
        for i, row in enumerate(raw):
            if len(row) != width:
                raise DatasetError(
                    f"row {i + 1} has {len(row)} columns, expected {width}"
                )
            rows.append([_parse_cell(tok.strip(), i + 1, j + 1) for j, tok in enumerate(row)])
        mat = np.array(rows, dtype=float)
        if response:
            if width < 2:
                raise DatasetError("response requested but rows have a single column")
            return Dataset(mat[:, :-1], mat[:, -1])
        return Dataset(mat)
    if fmt == "json":
        with open(path) as fh:
            try:
                records = json.load(fh)
            except json.JSONDecodeError as err:
                raise DatasetError(f"invalid JSON in {path}: {err}") from None
        if not isinstance(records, list) or not records:
            raise DatasetError(f"no rows in {path}")
        feats, resp = [], []
        for i, rec in enumerate(records):
            if "x" not in rec:
                raise DatasetError(f"row {i + 1} is missing the 'x' field")
            feats.append([_parse_cell(str(v), i + 1, j + 1) for j, v in enumerate(rec["x"])])
            if "y" in rec:
                resp.append(_parse_cell(str(rec["y"]), i + 1, len(rec["x"]) + 1))
        if resp and len(resp) != len(feats):
            raise DatasetError("some rows have 'y' and some do not")
        return Dataset(np.array(feats, dtype=float), np.array(resp) if resp else None)
    raise DatasetError(f"unknown format {fmt!r} (expected 'csv' or 'json')")


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Per-datum weights w with the cached offset delta = w - 1."""

    values: np.ndarray
    label: str = ""
    delta: np.ndarray = field(init=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size < 1:
            raise ValueError(f"weights must be a nonempty 1-d vector, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("weights must be finite")
        values = values.copy()
        values.setflags(write=False)
        delta = values - 1.0
        delta.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "delta", delta)

    def __len__(self) -> int:
        return self.values.size


def ones_weights(n: int) -> WeightVector:
    return WeightVector(np.ones(n), label="base")


def loo_weights(n: int, subset: Optional[Sequence[int]] = None) -> Iterator[WeightVector]:
    """Leave-one-out weights, one vector per dropped datum.

    ``subset`` holds 1-based data indices; the default drops every datum
    in turn.
    """
    indices = range(1, n + 1) if subset is None else sorted(set(int(i) for i in subset))
    for i in indices:
        if not 1 <= i <= n:
            raise ValueError(f"index {i} outside 1..{n}")
        values = np.ones(n)
        values[i - 1] = 0.0
        yield WeightVector(values, label=f"drop:{i}")


def kfold_weights(n: int, folds: int, seed: int = 0) -> Iterator[WeightVector]:
    """K-fold CV weights: a seeded partition into folds of size floor(n/folds)."""
    if not 1 <= folds <= n:
        raise ValueError(f"fold count {folds} outside 1..{n}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    size = n // folds
    for f in range(folds):
        values = np.ones(n)
        values[perm[f * size:(f + 1) * size]] = 0.0
        yield WeightVector(values, label=f"fold:{f + 1}")


def leave_kappa_out_weights(n: int, kappa: int, seed: int = 0,
                            count: int = 1) -> Iterator[WeightVector]:
    """Random leave-kappa-out weights: ``count`` draws of kappa zeros each."""
    if not 1 <= kappa <= n:
        raise ValueError(f"kappa {kappa} outside 1..{n}")
    rng = np.random.default_rng(seed)
    for b in range(count):
        values = np.ones(n)
        values[rng.choice(n, size=kappa, replace=False)] = 0.0
        yield WeightVector(values, label=f"kappa:{b + 1}")


def bootstrap_weights(n: int, draws: int, seed: int = 0) -> Iterator[WeightVector]:
    """Multinomial bootstrap weights: counts of n draws over n equiprobable cells."""
    rng = np.random.default_rng(seed)
    for b in range(draws):
        values = rng.multinomial(n, np.full(n, 1.0 / n)).astype(float)
        yield WeightVector(values, label=f"boot:{b + 1}")


@dataclass(frozen=True)
class DomainHint:
    """Suggested sampling region around the base solution (ball of given radius)."""

    radius: float
    center: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class EstimatingProblem:
    """The functions g_0, g_1..g_N defining G(theta, w).

    ``term_fn(n, theta)`` evaluates g_n at theta (a sequence of D
    scalar-likes) for n = 0..N, where n = 0 is the regularization term.
    ``batch_fn(theta, rows)``, when present, evaluates every g_n for the
    0-based data rows at once, returning scalar-likes with array leaves;
    it must agree with term_fn exactly.
    """

    dim_theta: int
    n_terms: int
    term_fn: Callable
    model_id: str = "custom"
    domain_hint: Optional[DomainHint] = None
    batch_fn: Optional[Callable] = None

    def __post_init__(self):
        if self.dim_theta < 1:
            raise ValueError("dim_theta must be >= 1")
        if self.n_terms < 1:
            raise ValueError("n_terms must be >= 1")


def evaluate_g(problem: EstimatingProblem, theta, w) -> np.ndarray:
    """G(theta, w) as a length-D float vector."""
    weights = np.asarray(getattr(w, "values", w), dtype=float)
    if weights.shape != (problem.n_terms,):
        raise ValueError(
            f"weight length {weights.shape} does not match {problem.n_terms} terms"
        )
    out = np.array(
        [float(v) for v in fad.estimating_fn_scalars(problem, [float(t) for t in theta], weights)]
    )
    if not np.all(np.isfinite(out)):
        raise fad.NonFiniteValueError(f"non-finite estimating function value: {out}")
    return out


# -- model registry ----------------------------------------------------------

MODEL_REGISTRY: dict[str, Callable] = {}


def register_model(model_id: str):
    def deco(builder):
        MODEL_REGISTRY[model_id] = builder
        return builder
    return deco


def make_problem(model_id: str, dataset: Dataset, reg: Optional[dict] = None) -> EstimatingProblem:
    """Build a registered model's estimating problem for a dataset.

    ``reg`` options: ``l2`` (ridge strength lam, giving g_0 = lam * theta)
    and ``expected_features`` (dimension check against the dataset).
    """
    if model_id not in MODEL_REGISTRY:
        known = ", ".join(sorted(MODEL_REGISTRY))
        raise ValueError(f"unknown model {model_id!r} (registered: {known})")
    reg = dict(reg or {})
    expected = reg.pop("expected_features", None)
    if expected is not None and expected != dataset.n_features:
        raise ValueError(
            f"model {model_id!r} expected {expected} features, dataset has {dataset.n_features}"
        )
    return MODEL_REGISTRY[model_id](dataset, reg)


def _g0_builder(lam: float, dim: int):
    if lam == 0.0:
        zeros = [0.0] * dim
        return lambda theta: list(zeros)
    return lambda theta: [lam * theta[d] for d in range(dim)]


def _require_response(dataset: Dataset, model_id: str) -> np.ndarray:
    if dataset.response is None:
        raise ValueError(f"model {model_id!r} requires a response column")
    return dataset.response


@register_model("mean")
def _build_mean(dataset: Dataset, reg: dict) -> EstimatingProblem:
    # g_n(theta) = theta - x_n: the root of G is the weighted mean.
    x = dataset.features
    n, dim = x.shape
    g0 = _g0_builder(float(reg.get("l2", 0.0)), dim)

    def term(i, theta):
        if i == 0:
            return g0(theta)
        xi = x[i - 1]
        return [theta[d] - xi[d] for d in range(dim)]

    def batch(theta, rows):
        xr = x[rows]
        return [theta[d] - xr[:, d] for d in range(dim)]

    return EstimatingProblem(dim, n, term, model_id="mean", batch_fn=batch)


@register_model("linear_regression")
def _build_linear_regression(dataset: Dataset, reg: dict) -> EstimatingProblem:
    # g_n(theta) = (theta . x_n - y_n) x_n: least-squares normal equations.
    x = dataset.features
    y = _require_response(dataset, "linear_regression")
    n, dim = x.shape
    g0 = _g0_builder(float(reg.get("l2", 0.0)), dim)

    def term(i, theta):
        if i == 0:
            return g0(theta)
        xi, yi = x[i - 1], y[i - 1]
        r = sum(theta[d] * xi[d] for d in range(dim)) - yi
        return [r * xi[d] for d in range(dim)]

    def batch(theta, rows):
        xr, yr = x[rows], y[rows]
        r = sum(theta[d] * xr[:, d] for d in range(dim)) - yr
        return [r * xr[:, d] for d in range(dim)]

    return EstimatingProblem(dim, n, term, model_id="linear_regression", batch_fn=batch)


@register_model("logistic_regression")
def _build_logistic_regression(dataset: Dataset, reg: dict) -> EstimatingProblem:
    # g_n(theta) = (sigmoid(theta . x_n) - y_n) x_n for labels y_n in {0, 1}.
    x = dataset.features
    y = _require_response(dataset, "logistic_regression")
    n, dim = x.shape
    g0 = _g0_builder(float(reg.get("l2", 0.0)), dim)

    def term(i, theta):
        if i == 0:
            return g0(theta)
        xi, yi = x[i - 1], y[i - 1]
        z = sum(theta[d] * xi[d] for d in range(dim))
        r = fad.sigmoid(z) - yi
        return [r * xi[d] for d in range(dim)]

    def batch(theta, rows):
        xr, yr = x[rows], y[rows]
        z = sum(theta[d] * xr[:, d] for d in range(dim))
        r = fad.sigmoid(z) - yr
        return [r * xr[:, d] for d in range(dim)]

    return EstimatingProblem(dim, n, term, model_id="logistic_regression", batch_fn=batch)


@register_model("exp_loss")
def _build_exp_loss(dataset: Dataset, reg: dict) -> EstimatingProblem:
    # g_n(theta) = exp(theta . x_n) x_n, the gradient of exp(theta . x_n).
    x = dataset.features
    n, dim = x.shape
    g0 = _g0_builder(float(reg.get("l2", 0.0)), dim)

    def term(i, theta):
        if i == 0:
            return g0(theta)
        xi = x[i - 1]
        s = fad.exp(sum(theta[d] * xi[d] for d in range(dim)))
        return [s * xi[d] for d in range(dim)]

    def batch(theta, rows):
        xr = x[rows]
        s = fad.exp(sum(theta[d] * xr[:, d] for d in range(dim)))
        return [s * xr[:, d] for d in range(dim)]

    return EstimatingProblem(dim, n, term, model_id="exp_loss", batch_fn=batch)
