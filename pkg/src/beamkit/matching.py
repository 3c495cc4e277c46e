"""Constrained matching: damped Gauss-Newton with bisection line search.

A match problem owns a command (re-evaluated to produce a context such as a
twiss table or a normal form), variables bound to env names or get/set
callables, and equality constraints whose expressions evaluate to residuals
against that context.  The Jacobian comes either from a user callback
(invoked once per iteration, e.g. filled from parametric-map derivatives)
or from adaptive finite differences (1 + nvars command calls per
iteration).  The optimizer is sequential; its command may parallelize.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Variable", "Equality", "MatchResult", "match", "MatchError"]


class MatchError(ValueError):
    pass


@dataclass
class Variable:
    name: str
    get: object = None          # callable() -> float
    set: object = None          # callable(float)
    env: object = None          # alternative binding: env + key
    key: str = ""
    rtol: float = 1e-6
    min: float | None = None
    max: float | None = None

    def __post_init__(self):
        if self.env is not None:
            k = self.key or self.name
            self.get = lambda e=self.env, k=k: float(e[k])
            self.set = lambda v, e=self.env, k=k: e.__setitem__(k, float(v))
        if self.get is None or self.set is None:
            raise MatchError(f"variable {self.name!r} needs get/set or env binding")
        if self.min is not None and self.max is not None and not self.min < self.max:
            raise MatchError(f"variable {self.name!r} has min >= max")

    def clamp(self, v: float) -> float:
        if self.min is not None:
            v = max(v, self.min)
        if self.max is not None:
            v = min(v, self.max)
        return v


@dataclass
class Equality:
    name: str
    expr: object                 # callable(context) -> float
    tol: float = 0.0
    weight: float = 1.0
    kind: str = "."


@dataclass
class MatchResult:
    status: str
    iterations: int
    calls: int
    penalty: float
    values: dict
    summary: str

    def __str__(self):
        return self.summary


def _fmt_limit(v) -> str:
    if v is None or not math.isfinite(v):
        return f"{'-':<13}"
    return f"{v:<13.5e}"


def _summary(equalities, cvec, variables, vfinal, vinit) -> str:
    lines = []
    lines.append(f"{'Constraints':<13}{'Type':<13}{'Kind':<13}{'Weight':<11}{'Penalty Value':<13}")
    lines.append("-" * 63)
    for eq, c in zip(equalities, cvec):
        lines.append(f"{eq.name:<13}{'equality':<13}{eq.kind:<13}"
                     f"{f'{eq.weight:g}':<11}{abs(c):.5e}")
    lines.append("")
    lines.append(f"{'Variables':<13}{'Final Value':<13}{'Init. Value':<13}"
                 f"{'Lower Limit':<13}{'Upper Limit':<13}")
    lines.append("-" * 63)
    for var, vf, vi in zip(variables, vfinal, vinit):
        lines.append(f"{var.name:<13}{vf:<13.5e}{vi:<13.5e}"
                     f"{_fmt_limit(var.min)}{_fmt_limit(var.max)}")
    return "\n".join(line.rstrip() for line in lines)


def _coerce_vars(variables) -> list[Variable]:
    out = []
    for v in variables:
        if isinstance(v, Variable):
            out.append(v)
        elif isinstance(v, dict):
            out.append(Variable(**v))
        else:
            raise MatchError(f"bad variable spec {v!r}")
    return out


def _coerce_eqs(equalities, default_tol) -> list[Equality]:
    out = []
    for e in equalities:
        if isinstance(e, Equality):
            if e.tol == 0.0:
                e.tol = default_tol
            out.append(e)
        elif isinstance(e, dict):
            e = dict(e)
            e.setdefault("tol", default_tol)
            out.append(Equality(**e))
        else:
            raise MatchError(f"bad equality spec {e!r}")
    return out


def match(command, variables, equalities, jacobian=None, fmin: float = 1e-10,
          bisec: int = 5, maxcall: int = 100, info: int = 0,
          tol: float = 0.0) -> MatchResult:
    """Minimize the weighted equality residuals over the variables.

    Steps are damped Gauss-Newton solutions of (J^T J + lambda I) dv =
    -J^T c with a backtracking bisection line search of at most `bisec`
    halvings; accepted steps never increase the penalty.  Convergence when
    the penalty drops below fmin or every |c_i| meets its tolerance.
    Variables stay clamped inside their bounds at every evaluation,
    including finite-difference probes.
    """
    vars_ = _coerce_vars(variables)
    eqs = _coerce_eqs(equalities, tol)
    if not vars_ or not eqs:
        raise MatchError("need at least one variable and one equality")

    nv = len(vars_)
    calls = 0

    def residuals(ctx) -> np.ndarray:
        out = np.empty(len(eqs))
        for i, eq in enumerate(eqs):
            try:
                out[i] = float(eq.expr(ctx)) * eq.weight
            except Exception as exc:
                raise MatchError(f"constraint {eq.name!r} failed: {exc}") from exc
            if not math.isfinite(out[i]):
                raise MatchError(f"constraint {eq.name!r} evaluated to {out[i]}")
        return out

    def evaluate() -> tuple[np.ndarray, object]:
        nonlocal calls
        calls += 1
        ctx = command()
        return residuals(ctx), ctx

    def get_v() -> np.ndarray:
        return np.array([v.get() for v in vars_])

    def set_v(vals) -> np.ndarray:
        clamped = np.array([v.clamp(x) for v, x in zip(vars_, vals)])
        for v, x in zip(vars_, clamped):
            v.set(float(x))
        return clamped

    v0 = set_v(get_v())
    vinit = v0.copy()
    c, ctx = evaluate()
    pen = float(np.linalg.norm(c))
    lam = 0.0  # Levenberg damping engages at 1e-8 on singular J / failed steps
    iters = 0
    status = "FMIN not reached"

    def converged(cv, p) -> bool:
        if p < fmin:
            return True
        return all(abs(ci) <= eq.tol for ci, eq in zip(cv, eqs) if eq.tol > 0) \
            and any(eq.tol > 0 for eq in eqs)

    if converged(c, pen):
        status = "converged"

    while status != "converged" and calls < maxcall:
        # Jacobian: callback once per iteration, else finite differences
        if jacobian is not None:
            J = np.asarray(jacobian(ctx), dtype=float)
            if J.shape != (len(eqs), nv):
                raise MatchError(f"jacobian returned shape {J.shape}, "
                                 f"want ({len(eqs)}, {nv})")
        else:
            J = np.empty((len(eqs), nv))
            base = get_v()
            for j, var in enumerate(vars_):
                h = max(var.rtol * abs(base[j]), var.rtol)
                step = h
                if var.max is not None and base[j] + step > var.max:
                    step = -h
                probe = base.copy()
                probe[j] += step
                set_v(probe)
                cj, _ = evaluate()
                J[:, j] = (cj - c) / step
                set_v(base)
                if calls >= maxcall:
                    break

        accepted = False
        for _ in range(8):  # damping escalations
            try:
                if lam == 0.0:
                    dv = np.linalg.lstsq(J, -c, rcond=None)[0]
                    if not np.all(np.isfinite(dv)):
                        raise np.linalg.LinAlgError
                else:
                    dv = np.linalg.solve(J.T @ J + lam * np.eye(nv), -J.T @ c)
            except np.linalg.LinAlgError:
                lam = max(lam * 10, 1e-8)
                continue
            alpha = 1.0
            for _ in range(max(1, bisec + 1)):
                if calls >= maxcall:
                    break
                trial = set_v(v0 + alpha * dv)
                ct, ctx_t = evaluate()
                pent = float(np.linalg.norm(ct))
                if pent < pen:
                    v0, c, ctx, pen = trial, ct, ctx_t, pent
                    accepted = True
                    break
                alpha *= 0.5
            if accepted or calls >= maxcall:
                break
            lam = max(lam * 10, 1e-8)
        if not accepted:
            set_v(v0)
            break
        iters += 1
        lam = 0.0 if lam <= 1e-8 else lam / 10
        if info >= 2:
            print(f"iter {iters:3d}  calls {calls:4d}  penalty {pen:.6e}")
        if converged(c, pen):
            status = "converged"

    set_v(v0)
    summary = _summary(eqs, c, vars_, v0, vinit)
    if info >= 1:
        print(summary)
    return MatchResult(status, iters, calls, pen, {v.name: float(x) for v, x
                                                   in zip(vars_, v0)}, summary)
