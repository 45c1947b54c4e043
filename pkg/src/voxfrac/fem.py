"""Hexahedral element machinery: Lagrange shape functions, Gauss rules,
finite-strain element arrays, Newmark integration and the constrained
Newton solver on the saddle-point system.

Node numbering is lexicographic and x-fastest over the ``(p+1)^3`` lattice
of an order ``p`` element, i.e. node ``i + (p+1)*(j + (p+1)*k)`` sits at
parametric coordinates ``(-1 + 2i/p, -1 + 2j/p, -1 + 2k/p)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .material import GaussPointState, MaterialParams, UpdateResult, stress_update

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Singular system, iteration cap, or a bad element geometry."""


def node_lattice(order: int) -> np.ndarray:
    """Integer node indices (nn, 3) of an order-``order`` element."""
    r = np.arange(order + 1)
    i, j, k = np.meshgrid(r, r, r, indexing="ij")
    return np.stack([i.ravel(order="F"), j.ravel(order="F"), k.ravel(order="F")], axis=1)


def _lagrange_1d(order: int, x):
    """Values and derivatives of the 1D Lagrange basis on equidistant nodes."""
    nodes = np.linspace(-1.0, 1.0, order + 1)
    x = np.asarray(x, dtype=float)
    L = np.ones(x.shape + (order + 1,))
    dL = np.zeros_like(L)
    for a in range(order + 1):
        others = [b for b in range(order + 1) if b != a]
        for b in others:
            L[..., a] *= (x - nodes[b]) / (nodes[a] - nodes[b])
        for c in others:
            term = np.ones_like(x) / (nodes[a] - nodes[c])
            for b in others:
                if b != c:
                    term = term * (x - nodes[b]) / (nodes[a] - nodes[b])
            dL[..., a] += term
    return L, dL


def shape_eval(order: int, xi):
    """Shape functions and parametric gradients.

    ``xi`` is a triple or an (m, 3) array; returns ``N`` of shape (nn,) or
    (m, nn) and ``dN`` of shape (nn, 3) or (m, nn, 3).
    """
    if order not in (1, 2):
        raise ValueError("only orders 1 and 2 are supported")
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    xi = np.atleast_2d(xi)
    lat = node_lattice(order)
    L = []
    dL = []
    for d in range(3):
        l, dl = _lagrange_1d(order, xi[:, d])
        L.append(l[:, lat[:, d]])
        dL.append(dl[:, lat[:, d]])
    N = L[0] * L[1] * L[2]
    dN = np.stack([dL[0] * L[1] * L[2], L[0] * dL[1] * L[2], L[0] * L[1] * dL[2]], axis=-1)
    if single:
        return N[0], dN[0]
    return N, dN


def gauss_rule(points_per_axis: int):
    """Tensor-product Gauss-Legendre rule on [-1, 1]^3; x-fastest ordering."""
    if not 1 <= points_per_axis <= 4:
        raise ValueError("1 to 4 points per axis supported")
    x, w = np.polynomial.legendre.leggauss(points_per_axis)
    lat = node_lattice(points_per_axis - 1) if points_per_axis > 1 else np.zeros((1, 3), dtype=int)
    pts = x[lat]
    wts = np.prod(w[lat], axis=1)
    return pts, wts


def default_quadrature(order: int) -> int:
    """Points per axis for an element of the given order."""
    return order + 1


@dataclass(frozen=True)
class ElementTopology:
    nodes: tuple[int, ...]
    order: int
    quad: int

    def __post_init__(self):
        if len(self.nodes) != (self.order + 1) ** 3:
            raise ValueError("node count does not match the element order")


def reference_gradients(dN: np.ndarray, X: np.ndarray):
    """Map parametric gradients to reference gradients.

    ``dN`` (m, nn, 3), ``X`` (nn, 3) or (m, nn, 3). Returns ``(dNdX, detJ)``.
    """
    if X.ndim == 2:
        J = np.einsum("ai,mad->mid", X, dN)
    else:
        J = np.einsum("mai,mad->mid", X, dN)
    detJ = np.linalg.det(J)
    if np.any(detJ <= 0):
        bad = np.flatnonzero(detJ <= 0)
        raise SolverError(f"non-positive Jacobian at quadrature points {bad.tolist()}")
    dNdX = np.einsum("mad,mdi->mai", dN, np.linalg.inv(J))
    return dNdX, detJ


def deformation_gradient(dNdX: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``F = I + grad u`` at each point; ``u`` is (m, nn, 3)."""
    return np.eye(3) + np.einsum("mai,maj->mij", u, dNdX)


def gp_response(dNdX, wdet, u, states: GaussPointState, dt: float, params: MaterialParams,
                tangent: bool = True):
    """Internal force and stiffness contributions of a batch of Gauss points.

    Returns ``(f, k, result)`` with ``f`` (m, nn, 3) and ``k`` (m, 3nn, 3nn)
    using the DOF order ``3*a + i``.
    """
    F = deformation_gradient(dNdX, u)
    res = stress_update(F, states, dt, params, tangent=tangent)
    g = np.einsum("maJ,mJj->maj", dNdX, np.linalg.inv(F))
    f = np.einsum("mij,maj->mai", res.tau, g) * wdet[:, None, None]
    k = None
    if tangent:
        m, nn = dNdX.shape[:2]
        a = res.c4 + np.einsum("ik,mjl->mijkl", np.eye(3), res.tau)
        a *= wdet[:, None, None, None, None]
        # k[a, i, b, j] = g_ak a_ikjl g_bl, contracted one index at a time
        t = a.reshape(m, 27, 3) @ np.swapaxes(g, 1, 2)                      # (m, ikj, b)
        t = t.reshape(m, 3, 3, 3 * nn).transpose(0, 2, 1, 3).reshape(m, 3, 9 * nn)
        k = (g @ t).reshape(m, nn, 3, 3, nn).transpose(0, 1, 2, 4, 3).reshape(m, 3 * nn, 3 * nn)
    return f, k, res


def mass_block(N: np.ndarray, wdet: np.ndarray, rho: float) -> np.ndarray:
    """Consistent mass (3nn, 3nn) from shape values ``N`` (m, nn)."""
    ms = rho * np.einsum("ma,mb,m->ab", N, N, wdet)
    return np.kron(ms, np.eye(3))


def lump(m: np.ndarray) -> np.ndarray:
    """Row-sum lumping of a consistent mass matrix (returns the diagonal)."""
    return np.asarray(m).sum(axis=-1)


def lumped_mass(order: int, X: np.ndarray, rho: float, quad: int | None = None) -> np.ndarray:
    """Diagonal of the row-sum lumped mass matrix of one element."""
    pts, w = gauss_rule(quad or default_quadrature(order))
    N, dN = shape_eval(order, pts)
    _, detJ = reference_gradients(dN, np.asarray(X, dtype=float))
    return lump(mass_block(N, w * detJ, rho))


def element_arrays(order: int, X, u, params: MaterialParams, states: GaussPointState, dt: float,
                   quad: int | None = None, newmark: "Newmark | None" = None, v=None, a=None, u_n=None):
    """Arrays of a single element in the current trial state.

    Returns a dict with ``k`` (tangent), ``r`` (internal residual
    ``-f_int``), ``m`` (consistent mass), ``rm`` (inertial residual
    ``-M a`` if Newmark data are given), updated ``states`` and ``energy``
    per Gauss point.
    """
    X = np.asarray(X, dtype=float)
    u = np.asarray(u, dtype=float)
    pts, w = gauss_rule(quad or default_quadrature(order))
    N, dN = shape_eval(order, pts)
    dNdX, detJ = reference_gradients(dN, X)
    m = len(w)
    f, k, res = gp_response(dNdX, w * detJ, np.broadcast_to(u, (m,) + u.shape), states, dt, params)
    M = mass_block(N, w * detJ, params.rho)
    out = {"k": k.sum(axis=0), "r": -f.sum(axis=0).ravel(), "m": M, "states": res.state,
           "energy": res.energy * w * detJ, "result": res}
    if newmark is not None:
        acc = newmark.acceleration(u.ravel(), np.asarray(u_n).ravel(), np.asarray(v).ravel(),
                                   np.asarray(a).ravel(), dt)
        out["rm"] = -M @ acc
        out["k_eff"] = out["k"] + newmark.mass_factor(dt) * M
    return out


@dataclass(frozen=True)
class Newmark:
    """Average-acceleration Newmark scheme by default."""

    beta: float = 0.25
    gamma: float = 0.5

    def __post_init__(self):
        if not 0 < self.beta <= 0.5 or not 0.5 <= self.gamma <= 1.0:
            raise ValueError("need 0 < beta <= 0.5 and 0.5 <= gamma <= 1")

    def mass_factor(self, dt: float) -> float:
        return 1.0 / (self.beta * dt * dt)

    def acceleration(self, D, D_n, v_n, a_n, dt):
        return (D - D_n - dt * v_n) / (self.beta * dt * dt) - (0.5 / self.beta - 1.0) * a_n

    def velocity(self, a, v_n, a_n, dt):
        return v_n + dt * ((1.0 - self.gamma) * a_n + self.gamma * a)


@dataclass
class ConstraintSet:
    """Rows ``u_H - sum_M w_M u_M = 0`` in global DOF numbering.

    ``hanging[r]`` is the hanging DOF of row ``r``; its masters are
    ``masters[ptr[r]:ptr[r+1]]`` with weights ``weights[...]``.
    """

    hanging: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ptr: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    masters: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_rows(cls, rows, lam=None) -> "ConstraintSet":
        """``rows`` is a list of ``(hanging_dof, [(master_dof, weight), ...])``."""
        hanging = np.array([r[0] for r in rows], dtype=np.int64)
        ptr = np.zeros(len(rows) + 1, dtype=np.int64)
        ptr[1:] = np.cumsum([len(r[1]) for r in rows])
        masters = np.array([m for r in rows for m, _ in r[1]], dtype=np.int64)
        weights = np.array([w for r in rows for _, w in r[1]], dtype=float)
        lam = np.zeros(len(rows)) if lam is None else np.asarray(lam, dtype=float)
        return cls(hanging, ptr, masters, weights, lam)

    def __len__(self):
        return len(self.hanging)

    def row(self, r):
        s = slice(self.ptr[r], self.ptr[r + 1])
        return int(self.hanging[r]), list(zip(self.masters[s].tolist(), self.weights[s].tolist()))

    def rows(self):
        return [self.row(r) for r in range(len(self))]

    def matrix(self, ndof: int) -> sp.csr_matrix:
        n = len(self)
        counts = np.diff(self.ptr)
        rr = np.concatenate([np.arange(n), np.repeat(np.arange(n), counts)])
        cc = np.concatenate([self.hanging, self.masters])
        vv = np.concatenate([np.ones(n), -self.weights])
        return sp.csr_matrix((vv, (rr, cc)), shape=(n, ndof))

    def weight_sums(self) -> np.ndarray:
        return np.add.reduceat(self.weights, self.ptr[:-1]) if len(self) else np.zeros(0)

    def select(self, keep) -> "ConstraintSet":
        keep = np.asarray(keep, dtype=bool)
        return ConstraintSet.from_rows([r for r, k in zip(self.rows(), keep) if k], self.lam[keep])


@dataclass
class NewtonResult:
    D: np.ndarray
    lam: np.ndarray
    converged: bool
    errors: list
    iterations: int
    n_eq: int


def saddle_solve(K: sp.spmatrix, C: sp.spmatrix, r_u: np.ndarray, r_l: np.ndarray, free: np.ndarray):
    """Solve ``[[K, C^T], [C, 0]] [dD; dl] = [r_u; r_l]`` on the free DOFs.

    Prescribed DOFs get a zero increment. Returns ``(dD, dl, n_eq)``.
    """
    ndof = K.shape[0]
    fidx = np.flatnonzero(free)
    Kf = K.tocsr()[fidx][:, fidx]
    Cf = C.tocsr()[:, fidx]
    A = sp.bmat([[Kf, Cf.T], [Cf, None]], format="csc")
    rhs = np.concatenate([r_u[fidx], r_l])
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            x = spla.spsolve(A, rhs)
        except (RuntimeError, spla.MatrixRankWarning) as exc:
            raise SolverError(f"singular saddle-point system: {exc}") from None
    if not np.all(np.isfinite(x)):
        raise SolverError("singular saddle-point system (non-finite solution)")
    dD = np.zeros(ndof)
    dD[fidx] = x[:len(fidx)]
    return dD, x[len(fidx):], A.shape[0]


def condensed_solve(K: sp.spmatrix, constraints: ConstraintSet, r_u: np.ndarray, r_l: np.ndarray,
                    free: np.ndarray, rtol: float = 1e-12, max_cg: int = 400):
    """Same solution as :func:`saddle_solve`, via elimination of the hanging DOFs.

    The constraint rows give ``dD_H = T_H dD_I + g_H``; the reduced system
    ``T^T K T`` is solved with Jacobi-preconditioned CG (a sparse LU when CG
    stalls) and the multipliers are recovered from the hanging-DOF rows.
    Falls back to the saddle solve when a hanging DOF is prescribed.
    """
    ndof = K.shape[0]
    H = constraints.hanging
    n_c = len(H)
    free = np.asarray(free, dtype=bool)
    if n_c and (not free[H].all() or len(np.unique(H)) != n_c):
        return saddle_solve(K, constraints.matrix(ndof), r_u, r_l, free)
    K = K.tocsr()
    is_h = np.zeros(ndof, dtype=bool)
    is_h[H] = True
    I = np.flatnonzero(free & ~is_h)
    n_i = len(I)
    g = np.zeros(ndof)
    if n_c:
        rows = np.repeat(np.arange(n_c), np.diff(constraints.ptr))
        W = sp.csr_matrix((constraints.weights, (rows, constraints.masters)), shape=(n_c, ndof)).tocsc()
        W_hh = W[:, H]
        W_hi = W[:, I]
        T_h = _resolve_chains(W_hh, W_hi.tocsr())
        g[H] = _resolve_chains(W_hh, np.asarray(r_l, dtype=float))
        if T_h is None:
            return saddle_solve(K, constraints.matrix(ndof), r_u, r_l, free)
        T = _prolongation(ndof, I, H, T_h)
    else:
        T = _prolongation(ndof, I, H, sp.csr_matrix((0, n_i)))
    Kr = (T.T @ K @ T).tocsr()
    b = T.T @ (r_u - K @ g)
    d = _spd_solve(Kr, b, rtol, max_cg)
    dD = T @ d + g
    if n_c:
        dl = _resolve_chains(W_hh.T.tocsr(), (r_u - K @ dD)[H])
    else:
        dl = np.zeros(0)
    return dD, dl, int(np.count_nonzero(free) + n_c)


def _resolve_chains(W_hh, B):
    """Solve ``X = B + W_hh X`` for nilpotent ``W_hh`` (hanging nodes on hanging masters).

    Returns None when the chains do not terminate (a cyclic dependency).
    """
    X = B
    if W_hh.nnz == 0:
        return X
    for _ in range(W_hh.shape[0] + 1):
        step = W_hh @ X
        X_new = B + step
        same = (abs(X_new - X).max() == 0) if sp.issparse(X) else np.array_equal(X_new, X)
        X = X_new
        if same:
            return X
    return None


def _prolongation(ndof, I, H, T_h):
    """``ndof x n_I`` map: identity on the interior DOFs, ``T_h`` on the hanging ones."""
    n_i = len(I)
    T_h = T_h.tocoo()
    rr = np.concatenate([I, H[T_h.row]])
    cc = np.concatenate([np.arange(n_i), T_h.col])
    vv = np.concatenate([np.ones(n_i), T_h.data])
    return sp.csr_matrix((vv, (rr, cc)), shape=(ndof, n_i))


def _spd_solve(A, b, rtol, max_cg):
    if A.shape[0] == 0:
        return np.zeros(0)
    diag = A.diagonal()
    if np.all(diag > 0) and np.linalg.norm(b) > 0:
        x, info = spla.cg(A, b, rtol=rtol, atol=0.0, maxiter=max_cg, M=sp.diags(1.0 / diag))
        if info == 0 and np.all(np.isfinite(x)):
            return x
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            x = spla.spsolve(A.tocsc(), b)
        except (RuntimeError, spla.MatrixRankWarning) as exc:
            raise SolverError(f"singular condensed system: {exc}") from None
    if not np.all(np.isfinite(x)):
        raise SolverError("singular condensed system (non-finite solution)")
    return np.atleast_1d(x)


def newton_solve(assemble: Callable[[np.ndarray], tuple], D0: np.ndarray, constraints: ConstraintSet,
                 fixed: np.ndarray, tol: float = 1e-8, c_norm: float = 1.0, max_iter: int = 25,
                 atol: float = 1e-12, on_iteration: Callable | None = None,
                 method: str = "condensed") -> NewtonResult:
    """Newton-Raphson on the constrained system.

    ``assemble(D)`` returns ``(K, R)`` where ``R`` is the out-of-balance
    force ``f_int + f_inertia - f_ext`` (without the multiplier term) and
    ``K`` its derivative. ``D0`` must already carry the prescribed values on
    the ``fixed`` DOFs. Convergence: ``e < tol * e_0`` or ``e < atol`` with
    ``e = |R_u| + c_norm |C D|``, ``R_u = R + C^T lam`` on free DOFs.
    ``method`` picks the linear solve: ``"condensed"`` (default) or
    ``"saddle"`` (monolithic sparse LU).
    """
    if method not in ("condensed", "saddle"):
        raise ValueError(f"unknown linear solve method {method!r}")
    D = np.array(D0, dtype=float)
    lam = constraints.lam.copy()
    C = constraints.matrix(len(D))
    free = ~np.asarray(fixed, dtype=bool)
    errors = []
    e0 = None
    n_eq = 0
    for it in range(max_iter + 1):
        K, R = assemble(D)
        Ru = R + C.T @ lam
        Rl = C @ D
        e = float(np.linalg.norm(Ru[free]) + c_norm * np.linalg.norm(Rl))
        errors.append(e)
        if e0 is None:
            e0 = e
        if e < tol * e0 or e < atol:
            return NewtonResult(D, lam, True, errors, it, n_eq or _n_eq(free, C))
        if it == max_iter:
            break
        if method == "saddle":
            dD, dl, n_eq = saddle_solve(K, C, -Ru, -Rl, free)
        else:
            dD, dl, n_eq = condensed_solve(K, constraints, -Ru, -Rl, free)
        if on_iteration is not None:
            on_iteration(it, e, n_eq)
        D = D + dD
        lam = lam + dl
    return NewtonResult(D, lam, False, errors, max_iter, n_eq)


def _n_eq(free, C):
    return int(np.count_nonzero(free) + C.shape[0])
