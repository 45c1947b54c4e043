"""Finite-strain J2 elasto-viscoplasticity in principal logarithmic strains.

Units inside the solver are mm, N, MPa and s. :class:`MaterialParams` keeps
the catalog units (GPa moduli, MPa yield data, GPa*s viscosity, N/mm
fracture energy, kg/m^3 density) and exposes converted properties.

Everything here is vectorised over a batch of Gauss points of a single
material; the caller groups points by phase.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

SQ23 = np.sqrt(2.0 / 3.0)
SQ32 = np.sqrt(1.5)
SQ6 = np.sqrt(6.0)
BRITTLE_YIELD = 1e12
I3 = np.eye(3)


class MaterialError(RuntimeError):
    """Local return mapping failure or inadmissible deformation."""


@dataclass(frozen=True)
class MaterialParams:
    """Constitutive constants of one phase (catalog units, see module doc)."""

    name: str
    kappa: float          # GPa
    mu: float             # GPa
    y0: float             # MPa
    y_inf: float          # MPa
    h_exp: float = 0.0
    h_lin: float = 0.0    # MPa
    eta: float | None = None  # GPa*s, None = rate independent
    G_c: float = 1.0      # N/mm
    rho0: float = 8000.0  # kg/m^3
    brittle: bool = False

    def __post_init__(self):
        if self.kappa <= 0 or self.mu <= 0:
            raise ValueError(f"{self.name}: moduli must be positive")
        if not (self.y_inf >= self.y0 > 0):
            raise ValueError(f"{self.name}: need y_inf >= y0 > 0")
        if self.h_exp < 0 or self.h_lin < 0:
            raise ValueError(f"{self.name}: hardening parameters must be non-negative")
        if self.eta is not None and self.eta < 0:
            raise ValueError(f"{self.name}: viscosity must be non-negative")
        if self.G_c <= 0 or self.rho0 <= 0:
            raise ValueError(f"{self.name}: G_c and rho0 must be positive")

    # solver units
    @property
    def K(self) -> float:
        return self.kappa * 1e3

    @property
    def G(self) -> float:
        return self.mu * 1e3

    @property
    def eta_mpa(self) -> float:
        return 0.0 if self.eta is None else self.eta * 1e3

    @property
    def rho(self) -> float:
        """Density in t/mm^3."""
        return self.rho0 * 1e-12

    @property
    def youngs(self) -> float:
        """Young's modulus in MPa."""
        return 9 * self.K * self.G / (3 * self.K + self.G)

    @property
    def poisson(self) -> float:
        return (3 * self.K - 2 * self.G) / (2 * (3 * self.K + self.G))


def _catalog_entry(name, kappa, mu, y0, y_inf, h_exp, h_lin, eta, G_c, rho0):
    brittle = y0 >= BRITTLE_YIELD
    return MaterialParams(name, kappa, mu, y0, y_inf, h_exp, h_lin, eta, G_c, rho0, brittle)


# Tables of the benchmark and the CT specimen. The second table's yield data
# are given in GPa and are stored here converted to MPa.
CATALOG: dict[str, MaterialParams] = {
    "tungsten_carbide": _catalog_entry("tungsten_carbide", 308.12, 288.71, 1e12, 1e12, 0.0, 0.0, None, 0.0371, 15630.0),
    "eta_carbide": _catalog_entry("eta_carbide", 394.38, 228.72, 1e12, 1e12, 0.0, 0.0, None, 0.0065, 8000.0),
    "nickel": _catalog_entry("nickel", 225.6, 75.19, 260.0, 580.0, 9.0, 70.0, None, 1.730, 8908.0),
    "titanium_carbide": _catalog_entry("titanium_carbide", 235.42, 191.53, 1e12, 1e12, 0.0, 0.0, None, 0.114, 4930.0),
    "nibsi": _catalog_entry("nibsi", 167.84, 77.47, 1300.0, 1500.0, 300.0, 5000.0, 1.0, 0.022, 8000.0),
}

TABLE1 = ("tungsten_carbide", "eta_carbide", "nickel")
TABLE2 = ("titanium_carbide", "nibsi")


def params_from_dict(name: str, d: Mapping) -> MaterialParams:
    """Build params from a config block; a ``base`` key copies a catalog entry."""
    d = dict(d)
    base = d.pop("base", None)
    if base is not None:
        if base not in CATALOG:
            raise KeyError(f"unknown catalog material {base!r}")
        p = replace(CATALOG[base], name=name, **d)
    else:
        p = MaterialParams(name=name, **d)
    if p.y0 >= BRITTLE_YIELD and not p.brittle:
        p = replace(p, brittle=True)
    return p


def brittle_variant(params: MaterialParams) -> MaterialParams:
    """Copy of ``params`` that never yields (plastic energy and dissipation vanish)."""
    return replace(params, y0=BRITTLE_YIELD, y_inf=BRITTLE_YIELD, h_exp=0.0, h_lin=0.0,
                   eta=None, brittle=True)


def hardening(alpha, p: MaterialParams):
    """Flow stress beta(alpha) in MPa."""
    alpha = np.asarray(alpha, dtype=float)
    return p.y0 + (p.y_inf - p.y0) * (1.0 - np.exp(-p.h_exp * alpha)) + p.h_lin * alpha


def hardening_slope(alpha, p: MaterialParams):
    alpha = np.asarray(alpha, dtype=float)
    return (p.y_inf - p.y0) * p.h_exp * np.exp(-p.h_exp * alpha) + p.h_lin


def plastic_energy(alpha, p: MaterialParams):
    """psi_p(alpha), the antiderivative of beta with psi_p(0) = 0."""
    alpha = np.asarray(alpha, dtype=float)
    if p.h_exp > 0:
        sat = alpha + (np.exp(-p.h_exp * alpha) - 1.0) / p.h_exp
    else:
        sat = np.zeros_like(alpha)
    return p.y0 * alpha + (p.y_inf - p.y0) * sat + 0.5 * p.h_lin * alpha ** 2


@dataclass
class GaussPointState:
    """History of a batch of Gauss points (struct of arrays).

    ``eps_p`` is the plastic logarithmic strain, ``0.5 * log(C_p)``.
    ``d_vis`` is the accumulated viscous dissipation density in MPa.
    ``tau`` caches the Kirchhoff stress of the last update.
    """

    eps_p: np.ndarray
    alpha: np.ndarray
    d_vis: np.ndarray
    tau: np.ndarray

    @classmethod
    def virgin(cls, n: int) -> "GaussPointState":
        return cls(np.zeros((n, 3, 3)), np.zeros(n), np.zeros(n), np.zeros((n, 3, 3)))

    def __len__(self):
        return len(self.alpha)

    def copy(self) -> "GaussPointState":
        return GaussPointState(self.eps_p.copy(), self.alpha.copy(), self.d_vis.copy(), self.tau.copy())

    def take(self, idx) -> "GaussPointState":
        return GaussPointState(self.eps_p[idx], self.alpha[idx], self.d_vis[idx], self.tau[idx])

    def put(self, idx, other: "GaussPointState") -> None:
        self.eps_p[idx] = other.eps_p
        self.alpha[idx] = other.alpha
        self.d_vis[idx] = other.d_vis
        self.tau[idx] = other.tau

    def von_mises(self) -> np.ndarray:
        dev = self.tau - np.trace(self.tau, axis1=1, axis2=2)[:, None, None] * I3 / 3
        return SQ32 * np.sqrt(np.einsum("nij,nij->n", dev, dev))


def spectral_log_strain(b_e):
    """Principal log strains and directions of SPD tensor(s) ``b_e``.

    Returns ``(eps, n)`` with ``eps[..., a] = 0.5 * log(lambda_a)`` and the
    eigenvectors as columns of ``n``.
    """
    b_e = np.asarray(b_e, dtype=float)
    if b_e.shape[-2:] != (3, 3):
        raise ValueError("expected 3x3 tensor(s)")
    if not np.allclose(b_e, np.swapaxes(b_e, -1, -2), rtol=1e-12, atol=1e-14 * np.abs(b_e).max(initial=1.0)):
        raise ValueError("b_e must be symmetric")
    lam, vec = np.linalg.eigh(b_e)
    if np.any(lam <= 0):
        raise ValueError("b_e must be positive definite")
    return 0.5 * np.log(lam), vec


def _sym_fn(a, fn):
    """Apply ``fn`` to the eigenvalues of symmetric batch ``a``."""
    w, v = np.linalg.eigh(a)
    return np.einsum("nia,na,nja->nij", v, fn(w), v)


@dataclass
class UpdateResult:
    tau: np.ndarray        # (n,3,3) Kirchhoff stress, MPa
    c4: np.ndarray | None  # (n,3,3,3,3) spatial tangent of tau (Oldroyd rate)
    state: GaussPointState
    psi_e: np.ndarray
    psi_p: np.ndarray
    d_vis_inc: np.ndarray
    dlam: np.ndarray
    c_princ: np.ndarray | None = None  # (n,3,3) d tau_a / d eps_tr_b

    @property
    def energy(self) -> np.ndarray:
        """Stored plus dissipated density consumed by erosion, MPa."""
        return self.psi_e + self.psi_p + self.state.d_vis

    def voigt(self) -> np.ndarray:
        return voigt6(self.c4)


VOIGT = ((0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2))


def voigt6(c4: np.ndarray) -> np.ndarray:
    """6x6 matrix of a minor-symmetric 4th order tensor (order 11,22,33,12,23,13)."""
    out = np.empty(c4.shape[:-4] + (6, 6))
    for I, (i, j) in enumerate(VOIGT):
        for J, (k, l) in enumerate(VOIGT):
            out[..., I, J] = c4[..., i, j, k, l]
    return out


def stress_update(F, state: GaussPointState, dt: float, p: MaterialParams, tangent: bool = True,
                  tol: float = 1e-10, max_iter: int = 50) -> UpdateResult:
    """Return mapping from the converged ``state`` to deformation ``F``.

    ``state`` is not modified. Points are treated independently.
    """
    F = np.asarray(F, dtype=float).reshape(-1, 3, 3)
    n = len(F)
    if dt <= 0:
        raise ValueError("dt must be positive")
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise MaterialError(f"non-positive det F at {np.flatnonzero(J <= 0)[:5]}")
    K, G = p.K, p.G

    cp_inv = _sym_fn(state.eps_p, lambda w: np.exp(-2.0 * w))
    be_tr = F @ cp_inv @ np.swapaxes(F, 1, 2)
    be_tr = 0.5 * (be_tr + np.swapaxes(be_tr, 1, 2))
    x, m = np.linalg.eigh(be_tr)
    eps_tr = 0.5 * np.log(x)
    tr = eps_tr.sum(axis=1)
    dev = eps_tr - tr[:, None] / 3
    dev_norm = np.linalg.norm(dev, axis=1)
    q_tr = SQ6 * G * dev_norm
    alpha_n = state.alpha
    phi_tr = q_tr - hardening(alpha_n, p)
    plastic = (phi_tr > tol * G) & (not p.brittle)

    visc = p.eta_mpa / dt
    dlam = np.zeros(n)
    if plastic.any():
        q = q_tr[plastic]
        a0 = alpha_n[plastic]
        dl = np.zeros_like(q)
        for it in range(max_iter):
            a = a0 + SQ23 * dl
            g = q - SQ6 * G * dl - hardening(a, p) - visc * dl
            if np.all(np.abs(g) < tol * G):
                break
            dg = SQ6 * G + SQ23 * hardening_slope(a, p) + visc
            dl = dl + g / dg
        else:
            raise MaterialError(f"local Newton did not converge in {max_iter} iterations")
        dlam[plastic] = dl

    with np.errstate(invalid="ignore", divide="ignore"):
        nrm = np.where(dev_norm[:, None] > 0, dev / dev_norm[:, None], 0.0)
    eps_e = eps_tr - dlam[:, None] * nrm
    alpha = alpha_n + SQ23 * dlam
    beta = hardening(alpha, p)
    phi = q_tr - SQ6 * G * dlam - beta
    d_inc = np.where(plastic, SQ23 * np.maximum(phi, 0.0) * dlam, 0.0) if visc > 0 else np.zeros(n)

    tr_e = eps_e.sum(axis=1)
    dev_e = eps_e - tr_e[:, None] / 3
    tau_p = K * tr_e[:, None] + 2 * G * dev_e
    tau = np.einsum("nia,na,nja->nij", m, tau_p, m)
    psi_e = 0.5 * K * tr_e ** 2 + G * np.einsum("na,na->n", dev_e, dev_e)
    psi_p = plastic_energy(alpha, p)

    eps_p = state.eps_p.copy()
    if plastic.any():
        Fi = np.linalg.inv(F[plastic])
        be = np.einsum("nia,na,nja->nij", m[plastic], np.exp(2 * eps_e[plastic]), m[plastic])
        cpi = Fi @ be @ np.swapaxes(Fi, 1, 2)
        cpi = 0.5 * (cpi + np.swapaxes(cpi, 1, 2))
        eps_p[plastic] = _sym_fn(cpi, lambda w: -0.5 * np.log(w))
    new = GaussPointState(eps_p, alpha, state.d_vis + d_inc, tau)

    c4 = c_pr = None
    if tangent:
        ce = K * np.ones((3, 3)) + 2 * G * (I3 - np.ones((3, 3)) / 3)
        c_pr = np.broadcast_to(ce, (n, 3, 3)).copy()
        if plastic.any():
            ip = np.flatnonzero(plastic)
            H = SQ6 * G + SQ23 * hardening_slope(alpha[ip], p) + visc
            nn = np.einsum("na,nb->nab", nrm[ip], nrm[ip])
            idev = I3 - np.ones((3, 3)) / 3
            s_norm = 2 * G * dev_norm[ip]
            c_pr[ip] -= (2 * G * SQ6 * G / H)[:, None, None] * nn
            c_pr[ip] -= ((2 * G) ** 2 * dlam[ip] / s_norm)[:, None, None] * (idev - nn)
        c4 = spatial_tangent(c_pr, tau_p, x, eps_tr, m)
    return UpdateResult(tau, c4, new, psi_e, psi_p, d_inc, dlam, c_pr)


_OFF = [(a, b) for a in range(3) for b in range(3) if a != b]


def spatial_tangent(c_pr, tau_p, x, eps, m, degenerate_tol: float = 1e-7):
    """Spatial moduli of an isotropic principal-stress response.

    ``c_pr[a, b] = d tau_a / d eps_b`` with ``eps = 0.5 log x`` and ``x`` the
    eigenvalues of the trial left Cauchy-Green tensor with vectors ``m``.
    The result maps the rate of deformation to the Oldroyd rate of tau.
    """
    n = len(x)
    mab = np.einsum("nia,njb->nabij", m, m).reshape(n, 3, 3, 9)  # m_ab = n_a (x) n_b
    P = mab[:, [0, 1, 2], [0, 1, 2]]                               # (n, 3, 9)
    core = c_pr - 2 * tau_p[:, :, None] * I3
    c4 = np.swapaxes(P, 1, 2) @ core @ P
    ia = np.array([a for a, _ in _OFF])
    ib = np.array([b for _, b in _OFF])
    xa, xb = x[:, ia], x[:, ib]
    ta, tb = tau_p[:, ia], tau_p[:, ib]
    with np.errstate(invalid="ignore", divide="ignore"):
        gam = (ta * xb - tb * xa) / (xa - xb)
    lim = 0.5 * (c_pr[:, ia, ia] - c_pr[:, ia, ib]) - tb
    close = np.abs(eps[:, ia] - eps[:, ib]) < degenerate_tol
    gam = np.where(close, lim, gam)
    Mab = mab[:, ia, ib]                                           # (n, 6, 9)
    Mba = mab[:, ib, ia]
    c4 += np.swapaxes(Mab * gam[:, :, None], 1, 2) @ (Mab + Mba)
    return c4.reshape(n, 3, 3, 3, 3)


def first_piola(F, tau):
    return tau @ np.swapaxes(np.linalg.inv(F), -1, -2)


def material_point_path(F_path, dt_path, p: MaterialParams, tangent: bool = False):
    """Drive one Gauss point through a history of deformation gradients.

    Returns a dict of stacked arrays (tau, alpha, psi_e, psi_p, d_vis, dlam).
    """
    state = GaussPointState.virgin(1)
    out = {k: [] for k in ("tau", "alpha", "psi_e", "psi_p", "d_vis", "dlam")}
    for F, dt in zip(F_path, dt_path):
        r = stress_update(np.asarray(F)[None], state, dt, p, tangent=tangent)
        state = r.state
        out["tau"].append(r.tau[0])
        out["alpha"].append(state.alpha[0])
        out["psi_e"].append(r.psi_e[0])
        out["psi_p"].append(r.psi_p[0])
        out["d_vis"].append(state.d_vis[0])
        out["dlam"].append(r.dlam[0])
    return {k: np.array(v) for k, v in out.items()}
