"""Declaration and validation of the degenerate SDE model.

A model is the pair of drift blocks

    dX1 = Z1(X1, X2) dt
    dX2 = Z2(X1, X2) dt + sigma dB,

with X1 in R^m (noise-free block), X2 in R^d (driven block), together with
the splitting of the cross Jacobian d(Z1)/d(x2) = B0 + B(x) into a constant
part B0 and a remainder B that B0 dominates:

    <B(x) B0^T a, a> >= -epsilon |B0^T a|^2   for all a,  epsilon in [0, 1).

All model callables are vectorized: they accept states of shape (..., m+d).
Jacobian callables return the pair of blocks (d/dx1, d/dx2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .errors import ConfigurationError
from .exprdrift import DriftExpr, Expr, parse_expr

__all__ = [
    "ModelSpec",
    "HypothesisData",
    "CheckResult",
    "ValidationReport",
    "validate_model",
    "builtin_model",
    "builtin_schemas",
    "drift_split",
]


@dataclass(frozen=True)
class HypothesisData:
    """Lyapunov data backing the growth hypotheses.

    w(x) >= 1 with w -> infinity; grad2_w is the gradient of w in the driven
    block only.  l1 in [0, 1] bounds the growth of the first drift
    derivatives (||dZ|| <= C w^l1) and l2 >= 0 that of the second.
    """

    w: Callable[[np.ndarray], np.ndarray]
    grad2_w: Callable[[np.ndarray], np.ndarray]
    c_const: float
    l1: float
    l2: float

    def __post_init__(self):
        if not (0.0 <= self.l1 <= 1.0):
            raise ConfigurationError(f"l1 must be in [0,1], got {self.l1}")
        if self.l2 < 0.0:
            raise ConfigurationError(f"l2 must be >= 0, got {self.l2}")
        if self.c_const <= 0.0:
            raise ConfigurationError(f"c_const must be positive, got {self.c_const}")


@dataclass(frozen=True)
class ModelSpec:
    """Immutable model declaration.

    All callables must be pure so the model object can be shared across
    concurrent path workers.
    ``hess_z1`` (optional) returns the second-derivative stack of Z1 with
    shape (..., m, m+d, m+d); when absent it is finite-differenced from
    ``jac_z1`` where needed.
    """

    m: int
    d: int
    z1: Callable[[np.ndarray], np.ndarray]
    z2: Callable[[np.ndarray], np.ndarray]
    jac_z1: Callable[[np.ndarray], tuple]
    jac_z2: Callable[[np.ndarray], tuple]
    sigma: np.ndarray
    b0: np.ndarray
    epsilon: float
    hypothesis: Optional[HypothesisData] = None
    hess_z1: Optional[Callable[[np.ndarray], np.ndarray]] = None
    constant_jac_z1: bool = False
    constant_jac_z2: bool = False
    drift_matrix: Optional[np.ndarray] = None
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.m < 1 or self.d < 1:
            raise ConfigurationError("dimensions m, d must be positive integers")
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        b0 = np.atleast_2d(np.asarray(self.b0, dtype=float))
        if sigma.shape != (self.d, self.d):
            raise ConfigurationError(f"sigma must be {self.d}x{self.d}, got {sigma.shape}")
        if b0.shape != (self.m, self.d):
            raise ConfigurationError(f"b0 must be {self.m}x{self.d}, got {b0.shape}")
        if not (0.0 <= self.epsilon < 1.0):
            raise ConfigurationError(f"epsilon must be in [0,1), got {self.epsilon}")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "b0", b0)
        if self.drift_matrix is not None:
            g = np.asarray(self.drift_matrix, dtype=float)
            n = self.m + self.d
            if g.shape != (n, n):
                raise ConfigurationError(f"drift_matrix must be {n}x{n}, got {g.shape}")
            object.__setattr__(self, "drift_matrix", g)

    @property
    def dim(self):
        return self.m + self.d

    @property
    def is_linear(self):
        return self.drift_matrix is not None

    def sigma_inv(self):
        return np.linalg.inv(self.sigma)

    def drift(self, x):
        """Full drift Z(x) of shape (..., m+d)."""
        x = np.asarray(x, dtype=float)
        return np.concatenate([self.z1(x), self.z2(x)], axis=-1)

    def full_jacobian(self, x):
        """Full (m+d) x (m+d) Jacobian of Z, shape (..., m+d, m+d)."""
        j11, j12 = self.jac_z1(x)
        j21, j22 = self.jac_z2(x)
        top = np.concatenate([j11, j12], axis=-1)
        bot = np.concatenate([j21, j22], axis=-1)
        return np.concatenate([top, bot], axis=-2)


def drift_split(spec, x):
    """Remainder B(x) = d(Z1)/d(x2) - B0 of the drift splitting."""
    _, j12 = spec.jac_z1(x)
    return j12 - spec.b0


@dataclass
class CheckResult:
    name: str
    passed: bool
    margin: float
    witness: Optional[np.ndarray] = None
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list

    @property
    def overall(self):
        return all(c.passed for c in self.checks)

    def __str__(self):
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            lines.append(f"[{status}] {c.name}: margin={c.margin:.3e} {c.detail}")
        lines.append(f"overall: {'PASS' if self.overall else 'FAIL'}")
        return "\n".join(lines)


def _sobol_points(box_lo, box_hi, n, seed):
    dim = box_lo.size
    sampler = qmc.Sobol(d=dim, scramble=True, seed=seed)
    n_draw = 1 << max(0, math.ceil(math.log2(max(n, 1))))
    pts = sampler.random(n_draw)[:n]
    return box_lo + pts * (box_hi - box_lo)


def validate_model(spec, sample_box, n_samples=256, seed=0, cond_cap=1e8):
    """Sampled verification of the model's structural hypotheses.

    ``sample_box`` is a pair (lo, hi) of vectors in R^{m+d}.  Checks:
    sigma invertibility, analytic-vs-finite-difference Jacobian agreement,
    the domination inequality at quasi-random points and unit directions,
    and (when hypothesis data is present) the Lyapunov growth bounds.
    """
    lo = np.asarray(sample_box[0], dtype=float).ravel()
    hi = np.asarray(sample_box[1], dtype=float).ravel()
    n = spec.dim
    if lo.shape != (n,) or hi.shape != (n,):
        raise ConfigurationError(f"sample box must be two vectors of length {n}")
    if not np.all(hi > lo):
        raise ConfigurationError("sample box is degenerate (need hi > lo)")
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")

    checks = []
    x = _sobol_points(lo, hi, n_samples, seed)

    # (i) sigma invertibility -- hard requirement, the bridge needs sigma^{-1}
    svals = np.linalg.svd(spec.sigma, compute_uv=False)
    cond = svals[0] / svals[-1] if svals[-1] > 0 else np.inf
    sigma_ok = np.isfinite(cond) and cond < cond_cap
    checks.append(CheckResult("sigma_invertible", bool(sigma_ok), float(cond_cap - cond),
                              detail=f"cond(sigma)={cond:.3e}"))
    if not sigma_ok:
        raise ConfigurationError(f"sigma is numerically singular (cond={cond:.3e})")

    # shape sanity at the box center
    center = 0.5 * (lo + hi)
    _check_shapes(spec, center)

    # (ii) Jacobian consistency against central differences
    checks.append(_jacobian_check(spec, x))

    # (iii) domination of B by B0 at sampled states and unit directions
    checks.append(_domination_check(spec, x, seed))

    # (iv) Lyapunov hypothesis checks
    if spec.hypothesis is not None:
        checks.extend(_hypothesis_checks(spec, x))

    return ValidationReport(checks)


def _check_shapes(spec, x0):
    x = np.asarray(x0, dtype=float)[None, :]
    z1 = np.asarray(spec.z1(x))
    z2 = np.asarray(spec.z2(x))
    if z1.shape[-1] != spec.m:
        raise ConfigurationError(f"z1 returns dimension {z1.shape[-1]}, expected m={spec.m}")
    if z2.shape[-1] != spec.d:
        raise ConfigurationError(f"z2 returns dimension {z2.shape[-1]}, expected d={spec.d}")
    j11, j12 = spec.jac_z1(x)
    if j11.shape[-2:] != (spec.m, spec.m) or j12.shape[-2:] != (spec.m, spec.d):
        raise ConfigurationError("jac_z1 blocks have wrong shapes")
    j21, j22 = spec.jac_z2(x)
    if j21.shape[-2:] != (spec.d, spec.m) or j22.shape[-2:] != (spec.d, spec.d):
        raise ConfigurationError("jac_z2 blocks have wrong shapes")


def _jacobian_check(spec, x, rel_tol=1e-5):
    n = spec.dim
    h = 1e-5 * (1.0 + np.linalg.norm(x, axis=-1))
    worst = 0.0
    witness = None
    an = np.concatenate([np.concatenate(spec.jac_z1(x), axis=-1),
                         np.concatenate(spec.jac_z2(x), axis=-1)], axis=-2)
    for c in range(n):
        e = np.zeros(n)
        e[c] = 1.0
        xp = x + h[:, None] * e
        xm = x - h[:, None] * e
        fd = (spec.drift(xp) - spec.drift(xm)) / (2.0 * h[:, None])
        err = np.abs(fd - an[..., c]) / (1.0 + np.abs(an[..., c]))
        idx = np.argmax(err)
        if err.flat[idx] > worst:
            worst = float(err.flat[idx])
            witness = x[idx // spec.dim]
    return CheckResult("jacobian_consistency", worst <= rel_tol, rel_tol - worst,
                       witness=witness, detail=f"max rel err={worst:.3e}")


def _domination_check(spec, x, seed, slack=1e-12):
    m = spec.m
    rng = np.random.default_rng(seed + 1)
    dirs = [np.eye(m)[i] for i in range(m)]
    extra = rng.standard_normal((m, m))
    extra /= np.linalg.norm(extra, axis=1, keepdims=True)
    dirs.extend(extra)
    b = drift_split(spec, x)                       # (n_pts, m, d)
    b0t = spec.b0.T                                # (d, m)
    worst = np.inf
    witness = None
    for a in dirs:
        b0a = b0t @ a                              # (d,)
        lhs = np.einsum("pmd,d,m->p", b, b0a, a)   # <B(x) B0^T a, a>
        margin = lhs + spec.epsilon * float(b0a @ b0a)
        idx = int(np.argmin(margin))
        if margin[idx] < worst:
            worst = float(margin[idx])
            witness = x[idx]
    return CheckResult("domination", worst >= -slack, worst, witness=witness,
                       detail=f"min <B B0^T a, a> + eps|B0^T a|^2 = {worst:.3e}")


def _hypothesis_checks(spec, x):
    hyp = spec.hypothesis
    out = []
    w = np.asarray(hyp.w(x), dtype=float)
    out.append(CheckResult("w_geq_one", bool(np.all(w >= 1.0)), float(np.min(w) - 1.0),
                           witness=x[int(np.argmin(w))]))

    # generator on w by finite differences: L = 0.5 Tr(sigma sigma^T H_yy) + Z . grad
    n = spec.dim
    m = spec.m
    h = 1e-4 * (1.0 + np.linalg.norm(x, axis=-1))
    grad = np.empty_like(x)
    for c in range(n):
        e = np.zeros(n)
        e[c] = 1.0
        grad[:, c] = (hyp.w(x + h[:, None] * e) - hyp.w(x - h[:, None] * e)) / (2 * h)
    a_mat = spec.sigma @ spec.sigma.T
    lw = np.einsum("pc,pc->p", grad, spec.drift(x))
    for i in range(spec.d):
        for j in range(spec.d):
            if a_mat[i, j] == 0.0:
                continue
            ei = np.zeros(n)
            ei[m + i] = 1.0
            ej = np.zeros(n)
            ej[m + j] = 1.0
            if i == j:
                second = (hyp.w(x + h[:, None] * ei) - 2 * w + hyp.w(x - h[:, None] * ei)) / h**2
            else:
                second = (hyp.w(x + h[:, None] * (ei + ej)) - hyp.w(x + h[:, None] * (ei - ej))
                          - hyp.w(x + h[:, None] * (ej - ei)) + hyp.w(x - h[:, None] * (ei + ej))
                          ) / (4 * h**2)
            lw = lw + 0.5 * a_mat[i, j] * second
    margin_l = np.min(hyp.c_const * w - lw) / max(1.0, hyp.c_const)
    out.append(CheckResult("generator_bound", margin_l >= -1e-6, float(margin_l),
                           witness=x[int(np.argmin(hyp.c_const * w - lw))],
                           detail="LW <= C W (finite-difference generator)"))

    g2 = np.asarray(hyp.grad2_w(x), dtype=float)
    margin_g = np.min(hyp.c_const * w - np.sum(g2 * g2, axis=-1))
    out.append(CheckResult("grad2w_bound", margin_g >= -1e-8, float(margin_g),
                           detail="|grad2 W|^2 <= C W"))

    jac = spec.full_jacobian(x)
    opnorm = np.linalg.norm(jac, ord=2, axis=(-2, -1))
    margin_j = np.min(hyp.c_const * w**hyp.l1 - opnorm)
    out.append(CheckResult("jacobian_growth", margin_j >= -1e-8, float(margin_j),
                           witness=x[int(np.argmin(hyp.c_const * w**hyp.l1 - opnorm))],
                           detail="||dZ|| <= C W^l1"))
    return out


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------

_BUILTIN_SCHEMAS = {
    "kinetic_ou": {
        "required": ["m"],
        "optional": {"k": 1.0, "gamma": 1.0, "sigma": 1.0},
        "doc": "Z1(x,y)=y, Z2(x,y)=-K x - Gamma y, B0 = I (m = d).",
    },
    "hamiltonian": {
        "required": ["v_expr"],
        "optional": {"m": 1, "mass": 1.0, "mass_expr": None, "friction": 0.0,
                     "sigma": 1.0, "c_mass": None},
        "doc": "Separable Hamiltonian H(x,y)=V(x)+<M(x)y,y>/2 with friction F; "
               "B0 = c_mass I.  mass_expr (state-dependent scalar mass) needs m=1.",
    },
    "integrator_chain": {
        "required": ["a", "b0"],
        "optional": {"z2_lin": None, "z2_off": None, "sigma": 1.0},
        "doc": "Z1(x,y) = A x + B0 y with affine Z2; Kalman-condition test bed.",
    },
}


def builtin_schemas():
    """Stable listing of built-in model names and parameter keys."""
    out = {}
    for name in sorted(_BUILTIN_SCHEMAS):
        sch = _BUILTIN_SCHEMAS[name]
        out[name] = {
            "required": list(sch["required"]),
            "optional": dict(sch["optional"]),
            "doc": sch["doc"],
        }
    return out


def _as_matrix(val, rows, cols, what):
    arr = np.asarray(val, dtype=float)
    if arr.ndim == 0:
        if rows != cols:
            raise ConfigurationError(f"{what}: scalar given but a {rows}x{cols} matrix is needed")
        return float(arr) * np.eye(rows)
    arr = np.atleast_2d(arr)
    if arr.shape != (rows, cols):
        raise ConfigurationError(f"{what} must be {rows}x{cols}, got {arr.shape}")
    return arr


def _check_params(name, params):
    sch = _BUILTIN_SCHEMAS[name]
    unknown = set(params) - set(sch["required"]) - set(sch["optional"])
    if unknown:
        raise ConfigurationError(f"unknown parameters for {name}: {sorted(unknown)}")
    missing = [k for k in sch["required"] if k not in params]
    if missing:
        raise ConfigurationError(f"missing parameters for {name}: {missing}")
    full = dict(sch["optional"])
    full.update(params)
    return full


def builtin_model(name, params=None):
    """Construct a built-in ModelSpec by name.

    Names and parameter keys are part of the CLI config schema; see
    ``builtin_schemas`` for the listing.
    """
    params = dict(params or {})
    if name not in _BUILTIN_SCHEMAS:
        raise ConfigurationError(
            f"unknown builtin model {name!r}; available: {sorted(_BUILTIN_SCHEMAS)}")
    p = _check_params(name, params)
    if name == "kinetic_ou":
        return _build_kinetic_ou(p, params)
    if name == "hamiltonian":
        return _build_hamiltonian(p, params)
    return _build_integrator_chain(p, params)


def _quadratic_hypothesis(g_norm, sigma):
    """W = 1 + |x|^2 + |y|^2 for a linear model with drift matrix norm g_norm."""
    tr = float(np.trace(sigma @ sigma.T))
    c = max(4.0, tr + 2.0 * (1.0 + g_norm), g_norm + 1.0)

    def w(x):
        x = np.asarray(x, dtype=float)
        return 1.0 + np.sum(x * x, axis=-1)

    def make_grad2(m):
        def grad2_w(x):
            x = np.asarray(x, dtype=float)
            return 2.0 * x[..., m:]
        return grad2_w

    return w, make_grad2, c


def _build_kinetic_ou(p, raw):
    m = int(p["m"])
    if m < 1:
        raise ConfigurationError("kinetic_ou: m must be a positive integer")
    d = m
    k_mat = _as_matrix(p["k"], d, m, "kinetic_ou k")
    g_mat = _as_matrix(p["gamma"], d, d, "kinetic_ou gamma")
    sigma = _as_matrix(p["sigma"], d, d, "kinetic_ou sigma")
    zero_mm = np.zeros((m, m))
    eye_md = np.eye(m, d)
    gfull = np.block([[zero_mm, eye_md], [-k_mat, -g_mat]])

    def z1(x):
        return np.asarray(x, dtype=float)[..., m:]

    def z2(x):
        x = np.asarray(x, dtype=float)
        return -x[..., :m] @ k_mat.T - x[..., m:] @ g_mat.T

    def jac_z1(x):
        shp = np.asarray(x).shape[:-1]
        return (np.broadcast_to(zero_mm, shp + (m, m)),
                np.broadcast_to(eye_md, shp + (m, d)))

    def jac_z2(x):
        shp = np.asarray(x).shape[:-1]
        return (np.broadcast_to(-k_mat, shp + (d, m)),
                np.broadcast_to(-g_mat, shp + (d, d)))

    w, make_grad2, c = _quadratic_hypothesis(np.linalg.norm(gfull, 2), sigma)
    hyp = HypothesisData(w=w, grad2_w=make_grad2(m), c_const=c, l1=0.0, l2=0.0)
    return ModelSpec(m=m, d=d, z1=z1, z2=z2, jac_z1=jac_z1, jac_z2=jac_z2,
                     sigma=sigma, b0=eye_md.copy(), epsilon=0.0, hypothesis=hyp,
                     hess_z1=_zero_hess(m, d), constant_jac_z1=True,
                     constant_jac_z2=True, drift_matrix=gfull,
                     name="kinetic_ou", params=raw)


def _zero_hess(m, d):
    n = m + d

    def hess_z1(x):
        shp = np.asarray(x).shape[:-1]
        return np.zeros(shp + (m, n, n))

    return hess_z1


def _build_hamiltonian(p, raw):
    m = int(p["m"])
    d = m
    n = 2 * m
    v_field = DriftExpr([p["v_expr"]], m)  # scalar potential in x1..xm
    v_expr = v_field.components[0]
    friction = _as_matrix(p["friction"], d, d, "hamiltonian friction")
    sigma = _as_matrix(p["sigma"], d, d, "hamiltonian sigma")

    grad_v = [v_expr.diff(i) for i in range(m)]

    if p["mass_expr"] is not None:
        if m != 1:
            raise ConfigurationError("hamiltonian: mass_expr requires m = 1")
        mu = parse_expr(p["mass_expr"], 1)  # scalar mass in x1
        y = Expr.var(1)
        z1c = [Expr.mul(mu, y)]
        # Z2 = -V'(x) - mu'(x) y^2 / 2 - F mu(x) y
        z2c = [Expr.add(
            Expr.add(Expr.neg(grad_v[0]),
                     Expr.neg(Expr.mul(Expr.mul(Expr.const(0.5), mu.diff(0)),
                                       Expr.pow(y, 2)))),
            Expr.neg(Expr.mul(Expr.mul(Expr.const(float(friction[0, 0])), mu), y)))]
        c_mass = p["c_mass"]
        if c_mass is None:
            raise ConfigurationError("hamiltonian: c_mass (mass lower bound) is required "
                                     "with a state-dependent mass_expr")
    else:
        mass = _as_matrix(p["mass"], m, m, "hamiltonian mass")
        mass = 0.5 * (mass + mass.T)
        eigs = np.linalg.eigvalsh(mass)
        if eigs[0] <= 0:
            raise ConfigurationError("hamiltonian: mass matrix must be positive definite")
        c_mass = p["c_mass"] if p["c_mass"] is not None else float(eigs[0])
        fm = friction @ mass
        z1c = []
        for a in range(m):
            acc = Expr.const(0.0)
            for b in range(m):
                acc = Expr.add(acc, Expr.mul(Expr.const(mass[a, b]), Expr.var(m + b)))
            z1c.append(acc)
        z2c = []
        for a in range(d):
            acc = Expr.neg(grad_v[a])
            for b in range(d):
                acc = Expr.add(acc, Expr.neg(Expr.mul(Expr.const(fm[a, b]), Expr.var(m + b))))
            z2c.append(acc)

    # lift V-expressions from m variables into the full 2m-variable space:
    # they only reference x1..xm so the trees are already valid there.
    zfull = DriftExpr(z1c + z2c, n)
    const_j1 = DriftExpr(z1c, n).is_constant_jacobian()

    def z1(x):
        return zfull.value(x)[..., :m]

    def z2(x):
        return zfull.value(x)[..., m:]

    def jac_z1(x):
        j = zfull.jacobian(x)
        return j[..., :m, :m], j[..., :m, m:]

    def jac_z2(x):
        j = zfull.jacobian(x)
        return j[..., m:, :m], j[..., m:, m:]

    def hess_z1(x):
        return zfull.hessian(x)[..., :m, :, :]

    drift_matrix = None
    if const_j1 and DriftExpr(z2c, n).is_constant_jacobian():
        probe = np.zeros(n)
        if np.allclose(zfull.value(probe), 0.0):
            drift_matrix = zfull.jacobian(probe)

    # W = H + 1; Example-style growth exponents for polynomial potentials
    def w(x):
        x = np.asarray(x, dtype=float)
        v = v_field.value(x[..., :m])[..., 0]
        if p["mass_expr"] is not None:
            mass_val = mu(x[..., :1])
            kin = 0.5 * mass_val * x[..., m] ** 2
        else:
            kin = 0.5 * np.einsum("...a,ab,...b->...", x[..., m:], mass, x[..., m:])
        return v + kin + 1.0

    def grad2_w(x):
        x = np.asarray(x, dtype=float)
        if p["mass_expr"] is not None:
            return (mu(x[..., :1]) * x[..., m])[..., None]
        return x[..., m:] @ mass.T

    hyp = HypothesisData(w=w, grad2_w=grad2_w, c_const=64.0, l1=1.0, l2=1.0)
    return ModelSpec(m=m, d=d, z1=z1, z2=z2, jac_z1=jac_z1, jac_z2=jac_z2,
                     sigma=sigma, b0=float(c_mass) * np.eye(m, d), epsilon=0.0,
                     hypothesis=hyp, hess_z1=hess_z1, constant_jac_z1=const_j1,
                     constant_jac_z2=(drift_matrix is not None),
                     drift_matrix=drift_matrix, name="hamiltonian", params=raw)


def _build_integrator_chain(p, raw):
    a_mat = np.atleast_2d(np.asarray(p["a"], dtype=float))
    m = a_mat.shape[0]
    if a_mat.shape != (m, m):
        raise ConfigurationError(f"integrator_chain a must be square, got {a_mat.shape}")
    b0 = np.atleast_2d(np.asarray(p["b0"], dtype=float))
    if b0.ndim == 2 and b0.shape[0] != m and b0.shape == (1, m):
        b0 = b0.T
    if b0.shape[0] != m:
        raise ConfigurationError(f"integrator_chain b0 must have {m} rows, got {b0.shape}")
    d = b0.shape[1]
    n = m + d
    z2_lin = p["z2_lin"]
    z2_lin = (np.zeros((d, n)) if z2_lin is None
              else _as_matrix(z2_lin, d, n, "integrator_chain z2_lin"))
    if p["z2_lin"] is None:
        z2_lin[:, m:] = -np.eye(d)
    z2_off = np.zeros(d) if p["z2_off"] is None else np.asarray(p["z2_off"], dtype=float).ravel()
    if z2_off.shape != (d,):
        raise ConfigurationError(f"integrator_chain z2_off must have length {d}")
    sigma = _as_matrix(p["sigma"], d, d, "integrator_chain sigma")
    z1_lin = np.concatenate([a_mat, b0], axis=1)
    gfull = np.concatenate([z1_lin, z2_lin], axis=0)

    def z1(x):
        return np.asarray(x, dtype=float) @ z1_lin.T

    def z2(x):
        return np.asarray(x, dtype=float) @ z2_lin.T + z2_off

    def jac_z1(x):
        shp = np.asarray(x).shape[:-1]
        return (np.broadcast_to(a_mat, shp + (m, m)),
                np.broadcast_to(b0, shp + (m, d)))

    def jac_z2(x):
        shp = np.asarray(x).shape[:-1]
        return (np.broadcast_to(z2_lin[:, :m], shp + (d, m)),
                np.broadcast_to(z2_lin[:, m:], shp + (d, d)))

    w, make_grad2, c = _quadratic_hypothesis(np.linalg.norm(gfull, 2), sigma)
    hyp = HypothesisData(w=w, grad2_w=make_grad2(m), c_const=c, l1=0.0, l2=0.0)
    return ModelSpec(m=m, d=d, z1=z1, z2=z2, jac_z1=jac_z1, jac_z2=jac_z2,
                     sigma=sigma, b0=b0, epsilon=0.0, hypothesis=hyp,
                     hess_z1=_zero_hess(m, d), constant_jac_z1=True,
                     constant_jac_z2=True, drift_matrix=gfull,
                     name="integrator_chain", params=raw)
