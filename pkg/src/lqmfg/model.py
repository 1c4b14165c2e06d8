"""Model data: time grid, coefficients, validation, and the JSON schema.

A model consists of time-dependent coefficient matrices for the state and
observation dynamics, constant cost weights, an initial state, a shared time
grid, and an optional affine cost extension (a benchmark control level ``r``
and a terminal target ``l``).

Time-dependent coefficients are either constants or piecewise-constant tables
with one entry per grid node (left-continuous convention: the value on
``[t_k, t_{k+1})`` is the table entry at node ``k``).
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

from . import errors

#: Relative tolerance below which an almost-symmetric matrix is silently
#: symmetrized; beyond it validation fails.
SYMMETRY_RTOL = 1e-10

#: Absolute floor on the smallest eigenvalue for positive-definiteness of the
#: control weight.
PD_TOL = 1e-12

#: Condition-number ceiling for matrices that must be inverted.
COND_LIMIT = 1e12


# ---------------------------------------------------------------------------
# Time grid
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with ``n_steps`` steps (``n_steps + 1`` nodes)."""

    T: float
    n_steps: int

    def __post_init__(self):
        if not (isinstance(self.n_steps, (int, np.integer)) and not isinstance(self.n_steps, bool)):
            raise errors.ModelFormatError("n_steps must be an integer")
        if self.T <= 0:
            raise errors.ModelFormatError(f"horizon T must be positive, got {self.T}")
        if self.n_steps < 2:
            raise errors.ModelFormatError(f"n_steps must be at least 2, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    def nodes(self) -> np.ndarray:
        """Grid nodes t_k; the last node is exactly T (not accumulated)."""
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def node_index(self, t: float) -> int:
        """Left-node index for time t (piecewise-constant lookup convention).

        Ratios within relative 1e-9 of an integer snap to that node, so times
        that are grid nodes up to roundoff resolve to the node itself.
        """
        if t < 0.0 or t > self.T:
            raise errors.TimeOutOfRange(f"t={t:g} outside [0, {self.T:g}]")
        ratio = t / self.dt
        nearest = round(ratio)
        if abs(ratio - nearest) <= 1e-9 * max(1.0, abs(nearest)):
            idx = int(nearest)
        else:
            idx = int(math.floor(ratio))
        return min(max(idx, 0), self.n_steps)


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Coefficient:
    """A constant or a per-node table of values for one model coefficient."""

    values: np.ndarray
    is_table: bool

    @staticmethod
    def constant(value) -> "Coefficient":
        return Coefficient(np.asarray(value, dtype=float), False)

    @staticmethod
    def table(values) -> "Coefficient":
        arr = np.asarray(values, dtype=float)
        if arr.ndim == 0:
            raise errors.ModelFormatError("a coefficient table needs one entry per node")
        return Coefficient(arr, True)


@dataclasses.dataclass(frozen=True)
class AffineExtension:
    """Optional affine cost terms: benchmark control r(t) and terminal target l."""

    r: Coefficient
    l: np.ndarray


@dataclasses.dataclass(frozen=True)
class ModelParams:
    """Raw (pre-validation) model data.

    Shapes (n = state dimension, k = control dimension):
        A, F, sigma, H, Q : n×n      B, B_tilde : n×k      G : n-vector
        R, K : k×k                   M : n×n               x0 : n-vector
    """

    A: Coefficient
    B: Coefficient
    B_tilde: Coefficient
    sigma: Coefficient
    F: Coefficient
    G: Coefficient
    H: Coefficient
    Q: Coefficient
    R: Coefficient
    K: np.ndarray
    M: np.ndarray
    x0: np.ndarray
    horizon: TimeGrid
    affine_ext: Optional[AffineExtension] = None

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)


def scalar_model(
    A=0.5, B=0.2, B_tilde=0.5, sigma=10.0, F=2.8, G=6.0, H=4.0,
    Q=0.0, R=1.0, K=0.0, M=1.0, x0=3.5, T=10.0, n_steps=1000,
    r=None, l=None,
) -> ModelParams:
    """Convenience factory for one-dimensional (n = k = 1) models.

    Defaults form a well-conditioned demo model; pass ``r`` and ``l`` together
    to attach the affine cost extension.
    """
    affine = None
    if (r is None) != (l is None):
        raise errors.ModelFormatError("affine extension needs both r and l")
    if r is not None:
        affine = AffineExtension(
            r=r if isinstance(r, Coefficient) else Coefficient.constant(r),
            l=np.atleast_1d(np.asarray(l, dtype=float)),
        )

    def coeff(v):
        return v if isinstance(v, Coefficient) else Coefficient.constant(v)

    return ModelParams(
        A=coeff(A), B=coeff(B), B_tilde=coeff(B_tilde), sigma=coeff(sigma),
        F=coeff(F), G=coeff(G), H=coeff(H), Q=coeff(Q), R=coeff(R),
        K=np.asarray(K, dtype=float), M=np.asarray(M, dtype=float),
        x0=np.atleast_1d(np.asarray(x0, dtype=float)),
        horizon=TimeGrid(T=float(T), n_steps=int(n_steps)),
        affine_ext=affine,
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

_TIME_DEPENDENT = ("A", "B", "B_tilde", "sigma", "F", "G", "H", "Q", "R")
_CONSTANT_ONLY = ("K", "M")


def _coerce_shape(name: str, arr: np.ndarray, target: tuple) -> np.ndarray:
    """Reshape ``arr`` to ``target`` when the element count matches."""
    if arr.shape == target:
        return arr
    if arr.size == int(np.prod(target)):
        return arr.reshape(target)
    raise errors.DimensionMismatch(
        f"{name} has shape {arr.shape}, expected {target} (or same element count)"
    )


def _coerce_coefficient(name: str, coeff: Coefficient, target: tuple, grid: TimeGrid) -> Coefficient:
    if not coeff.is_table:
        return Coefficient(_coerce_shape(name, coeff.values, target), False)
    if coeff.values.shape[0] != grid.n_nodes:
        raise errors.DimensionMismatch(
            f"{name} table has {coeff.values.shape[0]} entries, grid needs {grid.n_nodes}"
        )
    flat = coeff.values.reshape(grid.n_nodes, -1)
    if flat.shape[1] != int(np.prod(target)):
        raise errors.DimensionMismatch(
            f"{name} table entries have {flat.shape[1]} elements, expected shape {target}"
        )
    return Coefficient(flat.reshape((grid.n_nodes,) + target), True)


def _check_symmetry(name: str, node_vals: np.ndarray, times) -> np.ndarray:
    """Enforce symmetry within SYMMETRY_RTOL, then symmetrize exactly."""
    out = node_vals.copy()
    for idx in range(out.shape[0]):
        x = out[idx]
        defect = np.linalg.norm(x - x.T)
        if defect > SYMMETRY_RTOL * (1.0 + np.linalg.norm(x)):
            t = times[idx]
            raise errors.NotSymmetric(name, t=None if t is None else float(t))
        out[idx] = (x + x.T) / 2.0
    return out


def _infer_dims(params: ModelParams) -> tuple[int, int]:
    a = params.A.values
    base = a.shape[1:] if params.A.is_table else a.shape
    size = int(np.prod(base)) if base else 1
    n = math.isqrt(size)
    if n * n != size or n < 1:
        raise errors.DimensionMismatch(f"A has {size} elements; not a square matrix")
    b = params.B.values
    b_base = b.shape[1:] if params.B.is_table else b.shape
    b_size = int(np.prod(b_base)) if b_base else 1
    if b_size % n != 0:
        raise errors.DimensionMismatch(f"B has {b_size} elements; not divisible by n={n}")
    k = b_size // n
    if len(b_base) == 2 and b_base != (n, k):
        raise errors.DimensionMismatch(f"B has shape {b_base}, expected ({n}, {k})")
    return n, k


class ValidatedModel:
    """Immutable, shape-checked model ready for the solvers.

    Exists only as the result of :func:`validate`. Provides cached per-node
    coefficient tables (constants broadcast across nodes) and the left-node
    piecewise-constant lookup ``coefficient_at``.
    """

    __slots__ = ("params", "n", "k", "grid", "x0", "K", "M", "I_minus_K_inv",
                 "_node_cache")

    def __init__(self, params: ModelParams, n: int, k: int):
        self.params = params
        self.n = n
        self.k = k
        self.grid = params.horizon
        self.x0 = params.x0
        self.K = params.K
        self.M = params.M
        self.I_minus_K_inv = np.linalg.inv(np.eye(k) - params.K)
        self._node_cache: dict[str, np.ndarray] = {}

    # -- coefficient access -------------------------------------------------

    def _coefficient(self, name: str) -> Coefficient:
        if name in _TIME_DEPENDENT:
            return getattr(self.params, name)
        if name == "K":
            return Coefficient.constant(self.params.K)
        if name == "M":
            return Coefficient.constant(self.params.M)
        if name == "r" and self.params.affine_ext is not None:
            return self.params.affine_ext.r
        raise errors.UnknownCoefficient(f"no coefficient named {name!r}")

    def coefficient_at(self, name: str, t: float) -> np.ndarray:
        """Coefficient value at time t (left-node convention for tables)."""
        coeff = self._coefficient(name)
        idx = self.grid.node_index(t)
        return coeff.values[idx] if coeff.is_table else coeff.values

    def node_values(self, name: str) -> np.ndarray:
        """Per-node values, shape (n_nodes, *coefficient shape); read-only."""
        cached = self._node_cache.get(name)
        if cached is not None:
            return cached
        coeff = self._coefficient(name)
        if coeff.is_table:
            vals = coeff.values
        else:
            vals = np.broadcast_to(
                coeff.values, (self.grid.n_nodes,) + coeff.values.shape
            )
        vals = np.ascontiguousarray(vals)
        vals.flags.writeable = False
        self._node_cache[name] = vals
        return vals

    def stage_values(self, name: str) -> np.ndarray:
        """Values on the half-step stage grid (2·n_steps + 1 points).

        Index 2i is node i; index 2i+1 is the midpoint of step i, which under
        the left-node convention carries the value at node i.
        """
        nodes = self.node_values(name)
        idx = np.arange(2 * self.grid.n_steps + 1) // 2
        return nodes[idx]

    # -- affine extension ---------------------------------------------------

    @property
    def has_affine(self) -> bool:
        return self.params.affine_ext is not None

    @property
    def terminal_target(self) -> np.ndarray:
        """Terminal target l (zeros when the affine extension is absent)."""
        if self.params.affine_ext is None:
            return np.zeros(self.n)
        return self.params.affine_ext.l

    def affine_r_at_node(self, idx: int) -> np.ndarray:
        """Benchmark control level r at grid node idx (zeros when absent)."""
        if self.params.affine_ext is None:
            return np.zeros(self.k)
        r = self.params.affine_ext.r
        return r.values[idx] if r.is_table else r.values

    def affine_r_node_values(self) -> np.ndarray:
        """Per-node r values, shape (n_nodes, k); zeros when absent."""
        if self.params.affine_ext is None:
            return np.zeros((self.grid.n_nodes, self.k))
        return self.node_values("r")


def validate(params: ModelParams) -> ValidatedModel:
    """Shape-check, enforce the admissibility invariants, and freeze the model.

    Symmetric weights are symmetrized exactly after passing the relative
    tolerance check; definiteness is verified at every grid node; the matrices
    that the solvers invert — (I − K) and H(t) — must be well conditioned.
    """
    grid = params.horizon
    n, k = _infer_dims(params)
    times = grid.nodes()

    shapes = {
        "A": (n, n), "B": (n, k), "B_tilde": (n, k), "sigma": (n, n),
        "F": (n, n), "G": (n,), "H": (n, n), "Q": (n, n), "R": (k, k),
    }
    coerced = {
        name: _coerce_coefficient(name, getattr(params, name), shapes[name], grid)
        for name in _TIME_DEPENDENT
    }

    K = _coerce_shape("K", np.asarray(params.K, dtype=float), (k, k))
    M = _coerce_shape("M", np.asarray(params.M, dtype=float), (n, n))
    x0 = np.atleast_1d(np.asarray(params.x0, dtype=float))
    if x0.shape != (n,):
        raise errors.DimensionMismatch(f"x0 has shape {x0.shape}, expected ({n},)")

    affine = params.affine_ext
    if affine is not None:
        r = _coerce_coefficient("r", affine.r, (k,), grid)
        l = np.atleast_1d(np.asarray(affine.l, dtype=float))
        if l.shape != (n,):
            raise errors.DimensionMismatch(f"l has shape {l.shape}, expected ({n},)")
        affine = AffineExtension(r=r, l=l)

    # Symmetry (then exact symmetrization) for the quadratic weights.
    def node_view(c: Coefficient) -> np.ndarray:
        if c.is_table:
            return c.values
        return np.broadcast_to(c.values, (grid.n_nodes,) + c.values.shape)

    q_nodes = _check_symmetry("Q", node_view(coerced["Q"]), times)
    r_nodes = _check_symmetry("R", node_view(coerced["R"]), times)
    M = _check_symmetry("M", M[None, :, :], [None])[0]
    K = _check_symmetry("K", K[None, :, :], [None])[0]
    coerced["Q"] = (
        Coefficient(q_nodes, True) if coerced["Q"].is_table
        else Coefficient(q_nodes[0], False)
    )
    coerced["R"] = (
        Coefficient(r_nodes, True) if coerced["R"].is_table
        else Coefficient(r_nodes[0], False)
    )

    # Definiteness at every node (one representative node when constant).
    q_span = q_nodes.shape[0] if coerced["Q"].is_table else 1
    r_span = r_nodes.shape[0] if coerced["R"].is_table else 1
    for idx in range(max(q_span, r_span)):
        if idx < q_span:
            ev = float(np.linalg.eigvalsh(q_nodes[idx])[0])
            if ev < -PD_TOL:
                raise errors.NotPositiveSemidefinite("Q", t=float(times[idx]), eigenvalue=ev)
        if idx < r_span:
            ev_r = float(np.linalg.eigvalsh(r_nodes[idx])[0])
            if ev_r <= PD_TOL:
                raise errors.NotPositiveDefinite("R", t=float(times[idx]), eigenvalue=ev_r)
    ev_m = float(np.linalg.eigvalsh(M)[0])
    if ev_m < -PD_TOL:
        raise errors.NotPositiveSemidefinite("M", eigenvalue=ev_m)

    # Invertibility of (I - K) and of H at every node.
    i_minus_k = np.eye(k) - K
    if (not np.all(np.isfinite(i_minus_k))) or np.linalg.cond(i_minus_k) >= COND_LIMIT:
        raise errors.SingularIminusK(
            f"(I - K) condition number exceeds {COND_LIMIT:g}"
        )
    h_nodes = node_view(coerced["H"])
    h_span = h_nodes.shape[0] if coerced["H"].is_table else 1
    for idx in range(h_span):
        if np.linalg.cond(h_nodes[idx]) >= COND_LIMIT:
            raise errors.SingularH(t=float(times[idx]))

    clean = params.replace(
        **coerced, K=K, M=M, x0=x0, affine_ext=affine,
    )
    return ValidatedModel(clean, n, k)


# ---------------------------------------------------------------------------
# JSON schema
# ---------------------------------------------------------------------------
#
# {
#   "dims":     {"n": 1, "k": 1},
#   "horizon":  {"T": 10.0, "n_steps": 1000},
#   "coefficients": {"A": c, "B": c, "B_tilde": c, "sigma": c,
#                    "F": c, "G": c, "H": c},
#   "cost":     {"Q": c, "R": c, "K": const, "M": const},
#   "x0":       scalar | [..],
#   "affine_ext": {"r": c, "l": scalar | [..]}        (optional)
# }
#
# where c is a scalar, a nested array, or {"table": [entry, ...]} with
# n_steps + 1 entries.

def _load_coefficient(name: str, entry, allow_table: bool = True) -> Coefficient:
    if isinstance(entry, dict):
        if not allow_table:
            raise errors.ModelFormatError(f"{name} must be a constant")
        if set(entry.keys()) != {"table"}:
            raise errors.ModelFormatError(
                f"{name}: coefficient object must have exactly the key 'table'"
            )
        try:
            return Coefficient.table(np.asarray(entry["table"], dtype=float))
        except (TypeError, ValueError) as exc:
            raise errors.ModelFormatError(f"{name}: bad table ({exc})") from exc
    try:
        return Coefficient.constant(np.asarray(entry, dtype=float))
    except (TypeError, ValueError) as exc:
        raise errors.ModelFormatError(f"{name}: bad value ({exc})") from exc


def load_model_dict(doc: dict) -> ModelParams:
    """Parse the documented JSON schema into :class:`ModelParams`."""
    if not isinstance(doc, dict):
        raise errors.ModelFormatError("model document must be a JSON object")
    required = {"dims", "horizon", "coefficients", "cost", "x0"}
    allowed = required | {"affine_ext"}
    missing = required - doc.keys()
    if missing:
        raise errors.ModelFormatError(f"missing top-level keys: {sorted(missing)}")
    unknown = doc.keys() - allowed
    if unknown:
        raise errors.ModelFormatError(f"unknown top-level keys: {sorted(unknown)}")

    dims = doc["dims"]
    horizon = doc["horizon"]
    for section, keys in (("dims", {"n", "k"}), ("horizon", {"T", "n_steps"})):
        if not isinstance(doc[section], dict) or doc[section].keys() != keys:
            raise errors.ModelFormatError(f"{section} must have exactly keys {sorted(keys)}")

    coeff_doc = doc["coefficients"]
    needed = {"A", "B", "B_tilde", "sigma", "F", "G", "H"}
    if not isinstance(coeff_doc, dict) or coeff_doc.keys() != needed:
        missing = needed - getattr(coeff_doc, "keys", dict().keys)()
        raise errors.ModelFormatError(
            f"coefficients must have exactly keys {sorted(needed)}"
            + (f"; missing {sorted(missing)}" if missing else "")
        )
    cost_doc = doc["cost"]
    cost_needed = {"Q", "R", "K", "M"}
    if not isinstance(cost_doc, dict) or cost_doc.keys() != cost_needed:
        raise errors.ModelFormatError(f"cost must have exactly keys {sorted(cost_needed)}")

    try:
        grid = TimeGrid(T=float(horizon["T"]), n_steps=int(horizon["n_steps"]))
    except (TypeError, ValueError) as exc:
        raise errors.ModelFormatError(f"bad horizon: {exc}") from exc

    coeffs = {name: _load_coefficient(name, coeff_doc[name]) for name in needed}
    q = _load_coefficient("Q", cost_doc["Q"])
    r_weight = _load_coefficient("R", cost_doc["R"])
    k_const = _load_coefficient("K", cost_doc["K"], allow_table=False).values
    m_const = _load_coefficient("M", cost_doc["M"], allow_table=False).values

    affine = None
    if "affine_ext" in doc:
        aff = doc["affine_ext"]
        if not isinstance(aff, dict) or aff.keys() != {"r", "l"}:
            raise errors.ModelFormatError("affine_ext must have exactly keys ['l', 'r']")
        affine = AffineExtension(
            r=_load_coefficient("r", aff["r"]),
            l=np.atleast_1d(np.asarray(aff["l"], dtype=float)),
        )

    # dims are cross-checked against coefficient shapes during validate();
    # here they only need to be sane integers.
    try:
        n, k = int(dims["n"]), int(dims["k"])
    except (TypeError, ValueError) as exc:
        raise errors.ModelFormatError(f"bad dims: {exc}") from exc
    if n < 1 or k < 1:
        raise errors.ModelFormatError(f"dims must be positive, got n={n}, k={k}")

    return ModelParams(
        A=coeffs["A"], B=coeffs["B"], B_tilde=coeffs["B_tilde"],
        sigma=coeffs["sigma"], F=coeffs["F"], G=coeffs["G"], H=coeffs["H"],
        Q=q, R=r_weight, K=k_const, M=m_const,
        x0=np.atleast_1d(np.asarray(doc["x0"], dtype=float)),
        horizon=grid,
        affine_ext=affine,
    )


def _dump_value(arr: np.ndarray):
    arr = np.asarray(arr)
    if arr.size == 1:
        return float(arr.reshape(-1)[0])
    return arr.tolist()


def _dump_coefficient(coeff: Coefficient):
    if coeff.is_table:
        return {"table": [_dump_value(v) for v in coeff.values]}
    return _dump_value(coeff.values)


def dump_model_dict(params: ModelParams) -> dict:
    """Serialize :class:`ModelParams` to the documented JSON schema."""
    n, k = _infer_dims(params)
    doc = {
        "dims": {"n": n, "k": k},
        "horizon": {"T": params.horizon.T, "n_steps": params.horizon.n_steps},
        "coefficients": {
            name: _dump_coefficient(getattr(params, name))
            for name in ("A", "B", "B_tilde", "sigma", "F", "G", "H")
        },
        "cost": {
            "Q": _dump_coefficient(params.Q),
            "R": _dump_coefficient(params.R),
            "K": _dump_value(params.K),
            "M": _dump_value(params.M),
        },
        "x0": _dump_value(params.x0),
    }
    if params.affine_ext is not None:
        doc["affine_ext"] = {
            "r": _dump_coefficient(params.affine_ext.r),
            "l": _dump_value(params.affine_ext.l),
        }
    return doc
