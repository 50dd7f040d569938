"""Dense nonlinear least-squares engine with manifold parameter blocks.

Levenberg-Marquardt on normal equations, robust (Huber) per-row losses,
and Schur-complement marginalization that emits a linearized Gaussian prior
in square-root form. Problems at the scale of a sliding window (a couple of
hundred tangent dimensions) are solved densely.

Residual blocks return whitened residuals and Jacobians; a block may carry
many rows (e.g. one row per point-to-plane measurement) so that evaluation
stays vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rotations import quat_conj, quat_exp, quat_log, quat_mul


# --------------------------------------------------------------------------- #
# Manifolds and parameter blocks
# --------------------------------------------------------------------------- #

class EuclideanManifold:
    def __init__(self, dim: int):
        self.ambient_dim = dim
        self.tangent_dim = dim

    def plus(self, x: np.ndarray, delta: np.ndarray) -> np.ndarray:
        return x + delta

    def minus(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        return y - x


class QuaternionManifold:
    """Unit quaternion (w, x, y, z) with a right-perturbation 3-dof tangent."""

    ambient_dim = 4
    tangent_dim = 3

    def plus(self, x: np.ndarray, delta: np.ndarray) -> np.ndarray:
        return quat_mul(x, quat_exp(delta))

    def minus(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        return quat_log(quat_mul(quat_conj(x), y))


class ParameterBlock:
    """One optimization variable: values plus a manifold for updates."""

    def __init__(self, values: np.ndarray, manifold=None, name: str = "",
                 constant: bool = False):
        self.values = np.asarray(values, dtype=float).copy()
        self.manifold = manifold if manifold is not None else EuclideanManifold(len(self.values))
        if self.manifold.ambient_dim != len(self.values):
            raise ValueError(f"block '{name}': {len(self.values)} values vs "
                             f"manifold ambient dim {self.manifold.ambient_dim}")
        self.name = name
        self.constant = constant

    @property
    def tangent_dim(self) -> int:
        return self.manifold.tangent_dim

    def plus(self, delta: np.ndarray) -> None:
        self.values = self.manifold.plus(self.values, delta)

    def __repr__(self) -> str:
        return f"ParameterBlock({self.name or 'anon'}, dim={len(self.values)})"


# --------------------------------------------------------------------------- #
# Losses and residual blocks
# --------------------------------------------------------------------------- #

def huber_weight(r: float | np.ndarray, delta: float) -> float | np.ndarray:
    """IRLS weight of the Huber loss: 1 inside delta, delta/|r| outside."""
    if delta <= 0.0:
        raise ValueError("huber delta must be positive")
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


@dataclass
class HuberLoss:
    delta: float = 1.0

    def weights(self, r: np.ndarray) -> np.ndarray:
        return huber_weight(r, self.delta)

    def cost(self, r: np.ndarray) -> float:
        a = np.abs(r)
        quad = a <= self.delta
        return float(
            0.5 * np.sum(r[quad] ** 2)
            + np.sum(self.delta * a[~quad] - 0.5 * self.delta**2)
        )


class ResidualBlock:
    """Interface: whitened residual rows over a fixed set of parameter blocks.

    ``evaluate`` returns (r, jacs) with r of shape (m,) and jacs a list of
    (m, tangent_dim) arrays aligned with ``blocks`` (or None when jacobians
    were not requested). Rows are treated as independent scalar factors by
    the robust loss.
    """

    blocks: list[ParameterBlock]
    loss: HuberLoss | None = None

    def evaluate(self, values: list[np.ndarray], jacobians: bool):
        raise NotImplementedError


class FunctionResidual(ResidualBlock):
    """Residual defined by a callback; handy for tests and small problems."""

    def __init__(self, blocks, fn, loss=None):
        self.blocks = list(blocks)
        self.fn = fn
        self.loss = loss

    def evaluate(self, values, jacobians):
        return self.fn(values, jacobians)


class MarginalPrior(ResidualBlock):
    """Linearized Gaussian prior r(x) = offset + sqrt_info * (x [-] x_lin)."""

    def __init__(self, blocks: list[ParameterBlock], sqrt_info: np.ndarray,
                 offset: np.ndarray, lin_values: list[np.ndarray]):
        self.blocks = list(blocks)
        self.sqrt_info = sqrt_info
        self.offset = offset
        self.lin_values = [v.copy() for v in lin_values]
        self.loss = None
        self._slices = []
        c = 0
        for b in self.blocks:
            self._slices.append(slice(c, c + b.tangent_dim))
            c += b.tangent_dim
        if sqrt_info.shape[1] != c:
            raise ValueError("sqrt_info columns do not match block tangents")

    @classmethod
    def diagonal(cls, blocks: list[ParameterBlock], sigmas: np.ndarray) -> "MarginalPrior":
        """Independent prior at the blocks' current values with given stds."""
        sigmas = np.asarray(sigmas, dtype=float)
        dim = sum(b.tangent_dim for b in blocks)
        if len(sigmas) != dim:
            raise ValueError(f"{dim} tangent dims but {len(sigmas)} sigmas")
        A = np.diag(1.0 / sigmas)
        return cls(blocks, A, np.zeros(dim), [b.values for b in blocks])

    def information(self) -> np.ndarray:
        return self.sqrt_info.T @ self.sqrt_info

    def evaluate(self, values, jacobians):
        delta = np.concatenate([
            b.manifold.minus(v, lin)
            for b, v, lin in zip(self.blocks, values, self.lin_values)
        ])
        r = self.offset + self.sqrt_info @ delta
        if not jacobians:
            return r, None
        return r, [self.sqrt_info[:, s] for s in self._slices]


# --------------------------------------------------------------------------- #
# Problem and Levenberg-Marquardt
# --------------------------------------------------------------------------- #

@dataclass
class SolveOptions:
    max_iterations: int = 30
    gradient_tol: float = 1e-8
    param_tol: float = 1e-12
    function_tol: float = 1e-14
    # First solve is undamped (exact Gauss-Newton on linear problems); the
    # escalation base kicks in on the first rejected or singular step.
    lambda_escalation: float = 1e-4
    lambda_max: float = 1e10


@dataclass
class SolveSummary:
    success: bool
    termination: str
    iterations: int = 0
    accepted_steps: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    gradient_norm: float = 0.0
    message: str = ""


class Problem:
    """A set of residual blocks over shared parameter blocks."""

    def __init__(self):
        self.residuals: list[ResidualBlock] = []

    def add(self, residual: ResidualBlock) -> None:
        self.residuals.append(residual)

    def free_blocks(self) -> list[ParameterBlock]:
        seen: dict[int, ParameterBlock] = {}
        for res in self.residuals:
            for b in res.blocks:
                if not b.constant and id(b) not in seen:
                    seen[id(b)] = b
        return list(seen.values())

    # -- evaluation ---------------------------------------------------------

    def cost(self) -> float:
        total = 0.0
        for res in self.residuals:
            r, _ = res.evaluate([b.values for b in res.blocks], False)
            if res.loss is None:
                total += 0.5 * float(r @ r)
            else:
                total += res.loss.cost(r)
        return total

    def _linearize(self, blocks: list[ParameterBlock]):
        index = {id(b): i for i, b in enumerate(blocks)}
        offsets = np.zeros(len(blocks) + 1, dtype=int)
        for i, b in enumerate(blocks):
            offsets[i + 1] = offsets[i] + b.tangent_dim
        dim = int(offsets[-1])
        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        cost = 0.0
        for res in self.residuals:
            r, jacs = res.evaluate([b.values for b in res.blocks], True)
            if res.loss is None:
                cost += 0.5 * float(r @ r)
                w = None
            else:
                cost += res.loss.cost(r)
                w = np.sqrt(res.loss.weights(r))
                r = r * w
            active = []
            for b, J in zip(res.blocks, jacs):
                if b.constant or J is None:
                    continue
                if w is not None:
                    J = J * w[:, None]
                i = index[id(b)]
                sl = slice(offsets[i], offsets[i + 1])
                active.append((sl, J))
                g[sl] += J.T @ r
            for a, (sa, Ja) in enumerate(active):
                for sb, Jb in active[a:]:
                    blockH = Ja.T @ Jb
                    H[sa, sb] += blockH
                    if sa != sb:
                        H[sb, sa] += blockH.T
        return H, g, cost, offsets

    # -- solving ------------------------------------------------------------

    def solve(self, options: SolveOptions | None = None) -> SolveSummary:
        opts = options or SolveOptions()
        blocks = self.free_blocks()
        if not self.residuals:
            return SolveSummary(False, "no_residuals", message="problem is empty")
        if not blocks:
            c = self.cost()
            return SolveSummary(True, "all_constant", initial_cost=c, final_cost=c)

        lam = 0.0
        summary = SolveSummary(False, "max_iterations")
        cost = None
        for it in range(opts.max_iterations):
            summary.iterations = it + 1
            H, g, cost_lin, offsets = self._linearize(blocks)
            if cost is None:
                cost = cost_lin
                summary.initial_cost = cost_lin
            summary.gradient_norm = float(np.max(np.abs(g))) if g.size else 0.0
            if summary.gradient_norm < opts.gradient_tol:
                summary.success = True
                summary.termination = "gradient_tol"
                break

            diag = np.maximum(np.diag(H), 1e-12)
            snapshot = [b.values.copy() for b in blocks]
            accepted = False
            while True:
                Hd = H + np.diag(lam * diag) if lam > 0.0 else H
                try:
                    delta = np.linalg.solve(Hd, -g)
                    solvable = np.all(np.isfinite(delta))
                except np.linalg.LinAlgError:
                    solvable = False
                if solvable:
                    for i, b in enumerate(blocks):
                        b.plus(delta[offsets[i]:offsets[i + 1]])
                    new_cost = self.cost()
                    if np.isfinite(new_cost) and new_cost <= cost * (1 + 1e-14) + 1e-300:
                        accepted = True
                        break
                    for b, v in zip(blocks, snapshot):
                        b.values = v.copy()
                lam = opts.lambda_escalation if lam == 0.0 else lam * 10.0
                if lam > opts.lambda_max:
                    summary.termination = (
                        "singular_normal_equations" if not solvable else "damping_exhausted"
                    )
                    summary.final_cost = cost
                    summary.message = (
                        "normal equations unsolvable at max damping" if not solvable
                        else "no cost-decreasing step found at max damping"
                    )
                    # a fully stalled solve at an existing minimum still counts
                    summary.success = summary.accepted_steps > 0
                    return summary

            summary.accepted_steps += 1
            step_size = float(np.max(np.abs(delta)))
            decrease = cost - new_cost
            cost = new_cost
            lam = 0.0 if lam < 1e-12 else lam / 10.0
            if step_size < opts.param_tol:
                summary.success = True
                summary.termination = "param_tol"
                break
            if decrease <= opts.function_tol * max(cost, 1.0):
                summary.success = True
                summary.termination = "function_tol"
                break
        summary.final_cost = cost if cost is not None else self.cost()
        if summary.termination == "max_iterations":
            summary.success = summary.accepted_steps > 0
        return summary

    # -- covariance ---------------------------------------------------------

    def covariance(self, query_blocks: list[ParameterBlock]) -> np.ndarray:
        """Joint marginal covariance of the queried blocks' tangents."""
        blocks = self.free_blocks()
        H, _, _, offsets = self._linearize(blocks)
        try:
            cov = np.linalg.inv(H)
        except np.linalg.LinAlgError as exc:
            raise ValueError("normal equations are singular; no covariance") from exc
        index = {id(b): i for i, b in enumerate(blocks)}
        sel = []
        for b in query_blocks:
            if id(b) not in index:
                raise ValueError(f"block {b!r} not part of the problem")
            i = index[id(b)]
            sel.extend(range(offsets[i], offsets[i + 1]))
        sel = np.asarray(sel, dtype=int)
        return cov[np.ix_(sel, sel)]


# --------------------------------------------------------------------------- #
# Marginalization
# --------------------------------------------------------------------------- #

def _clipped_pinv(M: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    tol = max(vals.max(), 0.0) * 1e-12 + 1e-300
    inv_vals = np.where(vals > tol, 1.0 / np.maximum(vals, tol), 0.0)
    return (vecs * inv_vals) @ vecs.T


def marginalize(residuals: list[ResidualBlock],
                drop: list[ParameterBlock]) -> MarginalPrior | None:
    """Schur-complement the dropped blocks out of the supplied residuals.

    The dropped blocks must not appear in any residual outside ``residuals``.
    Returns a square-root-form prior over the remaining (non-constant) blocks,
    or None when nothing remains. Negative eigenvalues of the reduced
    information matrix are clipped at zero.
    """
    drop_ids = {id(b) for b in drop}
    keep: list[ParameterBlock] = []
    seen = set()
    for res in residuals:
        for b in res.blocks:
            if b.constant or id(b) in drop_ids or id(b) in seen:
                continue
            seen.add(id(b))
            keep.append(b)

    ordered = keep + [b for b in drop if not b.constant]
    prob = Problem()
    for res in residuals:
        prob.add(res)
    H, g, _, offsets = prob._linearize(ordered) if ordered else (None, None, None, None)
    if not keep:
        return None

    nk = sum(b.tangent_dim for b in keep)
    Hkk = H[:nk, :nk]
    Hkm = H[:nk, nk:]
    Hmm = H[nk:, nk:]
    gk = g[:nk]
    gm = g[nk:]
    if Hmm.size:
        Hmm_inv = _clipped_pinv(Hmm)
        H_red = Hkk - Hkm @ Hmm_inv @ Hkm.T
        g_red = gk - Hkm @ Hmm_inv @ gm
    else:
        H_red, g_red = Hkk, gk

    vals, vecs = np.linalg.eigh(0.5 * (H_red + H_red.T))
    tol = max(vals.max(), 0.0) * 1e-12 + 1e-300
    vals = np.where(vals > tol, vals, 0.0)
    sqrt_vals = np.sqrt(vals)
    A = (vecs * sqrt_vals).T
    inv_sqrt = np.where(sqrt_vals > 0.0, 1.0 / np.maximum(sqrt_vals, 1e-300), 0.0)
    b_vec = (vecs * inv_sqrt).T @ g_red

    return MarginalPrior(keep, A, b_vec, [b.values for b in keep])
