"""Two-stage alternating optimizer for the inverse-rendering energy.

Stage 1 freezes normals at the guide values and fits albedo/shadow with
periodic closed-form lighting re-solves in the prior subspace. Stage 2
frees all parameters; lighting is either still re-solved periodically or
relaxed by gradient (config switch). Adam supplies the gradient steps.

Solves are deterministic: given identical inputs and config, two runs
produce bit-identical reports.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import jax
import jax.numpy as jnp
import numpy as np

from unrender import energy
from unrender.shlight import basis_matrix, _rank
from unrender.types import ImageRGB, LossWeights, Mask, NormalMap, PriorModel

ADAM_EPS = 1e-8
CONVERGENCE_WINDOW = 50


@dataclass(frozen=True)
class SolveConfig:
    """Iteration budget, step sizes, and schedule of one solve."""

    stage1_iters: int = 300
    stage2_iters: int = 1200
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    light_resolve_every: int = 10  # 0 disables re-solves
    lighting_mode: str = "resolve"  # "resolve" | "gradient" (stage 2 only)
    lighting_ridge: float = 0.01  # prior-aware damping of the re-solve; 0 = pure LS
    deterministic: bool = False
    seed: int = 0
    tolerance: float = 1e-7  # relative energy decrease over the trailing window

    def __post_init__(self):
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.lighting_ridge < 0:
            raise ValueError("lighting_ridge must be >= 0")
        if self.lighting_mode not in ("resolve", "gradient"):
            raise ValueError(f"unknown lighting_mode {self.lighting_mode!r}")


@dataclass
class SolveReport:
    """Energy trace and decoded outputs of one view's solve."""

    trace: list                 # per-iteration term breakdowns
    state: energy.EnergyState
    albedo: object
    shadow: object
    normals: object
    lighting: object
    lighting_alpha: np.ndarray
    degenerate_resolves: int
    wall_time: float

    @property
    def final_energy(self):
        return self.trace[-1]["total"]

    def trace_json(self):
        return [{k: v for k, v in row.items()} for row in self.trace]


def _bootstrap_lighting(scene, guide: NormalMap):
    """Unbiased lighting regression assuming a constant gray albedo.

    A flat albedo carries no shading, so fitting the prior-subspace
    lighting against the shadow-free observation over the guide normals
    regresses out true albedo variation as noise instead of absorbing the
    shading field into the albedo gauge.
    """
    mask = scene.sky & guide.valid
    isf = np.minimum(1.0, scene.ilin)
    gray = float(np.median(isf[mask]))
    basis = np.asarray(basis_matrix(guide.data))[mask]
    qs = scene.prior.basis_scaled()
    mean = scene.prior.mean.reshape(3, 9)
    rows, rhs = [], []
    for c in range(3):
        rows.append(gray * (basis @ qs[9 * c:9 * (c + 1), :]))
        rhs.append(isf[mask][:, c] - gray * (basis @ mean[c]))
    m = np.concatenate(rows)
    r = np.concatenate(rhs)
    gram = m.T @ m
    lam = 1e-9 * np.trace(gram) / gram.shape[0]
    return np.linalg.solve(gram + lam * np.eye(gram.shape[0]), m.T @ r)


def init_state(img: ImageRGB, sky: Mask, prior: PriorModel,
               guide: Optional[NormalMap] = None) -> energy.EnergyState:
    """Initial parameters: lighting bootstrapped by a flat-albedo regression
    when guide normals exist (prior mean otherwise), albedo from the
    shadow-free image divided by that lighting's shading, shadow near one,
    normals from the guide where available."""
    scene = energy.SceneInputs.from_observation(img, sky, prior, guide)
    isf = np.minimum(1.0, scene.ilin)  # shadow-free at s = 1
    h, w = scene.shape
    alpha0 = np.zeros(prior.dim)
    if guide is not None:
        alpha0 = _bootstrap_lighting(scene, guide)
        lighting0 = prior.reconstruct(alpha0)
        shading = np.asarray(basis_matrix(guide.data)) @ lighting0.per_channel().T
        shading = np.where(guide.valid[..., None] & (shading > 1e-3),
                           shading, np.maximum(prior.mean[[0, 9, 18]], 1e-3))
        denom = shading
    else:
        denom = np.maximum(prior.mean[[0, 9, 18]], 1e-3)
    # cap below 1: the tanh coding saturates there and would freeze albedo
    albedo0 = np.clip(isf / denom, 0.05, 0.98)
    # 0.98 rather than exactly 1 for the same saturation reason
    shadow0 = np.full((h, w), 0.98)
    pq = np.zeros((h, w, 2))
    if guide is not None:
        gv = guide.valid
        pq[gv, 0] = guide.data[gv, 0] / guide.data[gv, 2]
        pq[gv, 1] = guide.data[gv, 1] / guide.data[gv, 2]
    params = {
        "albedo_raw": jnp.asarray(energy.encode_albedo(albedo0)),
        "shadow_raw": jnp.asarray(energy.encode_shadow(shadow0)),
        "normal_pq": jnp.asarray(pq),
        "light_alpha": jnp.asarray(alpha0),
    }
    return energy.EnergyState(params=params, scene=scene)


def _stack_observation(scene):
    """Channel-major (3K,) linearized observation over the sky mask."""
    sel = scene.ilin[scene.sky]
    return jnp.asarray(np.concatenate([sel[:, 0], sel[:, 1], sel[:, 2]]))


def _make_resolver(scene, weights, ridge_scale):
    """Closed-form lighting re-solve in the prior subspace.

    With ridge_scale > 0 the solve is damped toward the prior mean by
    lambda = ridge_scale * (w5/w1) * sqrt(N * SSR), balancing the exact
    least-squares fit against the squared-norm prior term at the current
    residual level; ridge_scale = 0 recovers the plain pseudoinverse solve.
    """
    igamma_stacked = _stack_observation(scene)
    mask = scene.sky
    qs = scene.prior.basis_scaled()
    mean = jnp.asarray(scene.prior.mean).reshape(3, 9)
    n_obs = igamma_stacked.shape[0]
    w_ratio = 0.0
    if ridge_scale > 0 and weights.appearance > 0:
        w_ratio = ridge_scale * weights.lighting / weights.appearance

    @jax.jit
    def resolve(params):
        albedo = energy.decode_albedo(params["albedo_raw"])
        shadow = energy.decode_shadow(params["shadow_raw"])
        normals = energy.decode_normals(params["normal_pq"])
        basis = basis_matrix(normals)[mask]
        shad = shadow[mask]
        alb = albedo[mask]
        k = basis.shape[0]
        rows = []
        rhs = []
        for c in range(3):
            w = alb[:, c] * shad
            rows.append(w[:, None] * (basis @ jnp.asarray(qs)[9 * c:9 * (c + 1), :]))
            rhs.append(igamma_stacked[c * k:(c + 1) * k] - w * (basis @ mean[c]))
        m = jnp.concatenate(rows)
        r = jnp.concatenate(rhs)
        if w_ratio == 0.0:
            return jnp.linalg.pinv(m, rtol=1e-8) @ r
        current = m @ params["light_alpha"] - r
        lam = w_ratio * jnp.sqrt(n_obs * jnp.sum(current * current))
        gram = m.T @ m + lam * jnp.eye(m.shape[1])
        return jnp.linalg.solve(gram, m.T @ r)

    return resolve


def _resolve_rank(params, scene):
    """Rank of the reduced lighting system at the current state."""
    albedo = np.asarray(energy.decode_albedo(params["albedo_raw"]))
    shadow = np.asarray(energy.decode_shadow(params["shadow_raw"]))
    normals = np.asarray(energy.decode_normals(params["normal_pq"]))
    mask = scene.sky
    basis = np.asarray(basis_matrix(normals))[mask]
    qs = scene.prior.basis_scaled()
    rows = [(albedo[mask][:, c] * shadow[mask])[:, None]
            * (basis @ qs[9 * c:9 * (c + 1), :])
            for c in range(3)]
    return _rank(np.concatenate(rows))


def rgb_residual(params, scene) -> float:
    """Unweighted RGB least-squares residual of the stacked lighting system."""
    albedo = energy.decode_albedo(params["albedo_raw"])
    shadow = energy.decode_shadow(params["shadow_raw"])
    normals = energy.decode_normals(params["normal_pq"])
    lighting = energy.decode_lighting(params["light_alpha"], scene.prior.mean,
                                      scene.prior.basis_scaled())
    model = jnp.asarray(albedo) * jnp.asarray(shadow)[..., None] \
        * (basis_matrix(normals) @ jnp.asarray(lighting).reshape(3, 9).T)
    resid = (model - scene.ilin)[scene.sky]
    return float(jnp.sum(resid * resid))


def _adam_update(params, grads, m, v, t, lr, b1, b2, frozen):
    new_params, new_m, new_v = {}, {}, {}
    for k in params:
        g = grads[k] * 0.0 if k in frozen else grads[k]
        new_m[k] = b1 * m[k] + (1 - b1) * g
        new_v[k] = b2 * v[k] + (1 - b2) * g * g
        mhat = new_m[k] / (1 - b1 ** t)
        vhat = new_v[k] / (1 - b2 ** t)
        step = lr * mhat / (jnp.sqrt(vhat) + ADAM_EPS)
        new_params[k] = params[k] - (0.0 if k in frozen else 1.0) * step
    return new_params, new_m, new_v


def _converged(totals, tol):
    if len(totals) <= CONVERGENCE_WINDOW:
        return False
    ref = totals[-1 - CONVERGENCE_WINDOW]
    improvement = ref - totals[-1]
    # a negative improvement is oscillation, not convergence
    return 0.0 <= improvement < tol * max(abs(ref), 1e-12)


def _check_finite(total, terms):
    if np.isfinite(total):
        return
    for name, value in terms.items():
        if value is not None and not np.isfinite(float(value)):
            raise RuntimeError(f"non-finite energy in term {name!r}")
    raise RuntimeError("non-finite total energy")


def _record(terms, total):
    row = {k: (None if v is None else float(v)) for k, v in terms.items()}
    row["total"] = float(total)
    return row


def solve(state: energy.EnergyState, supervision: energy.Supervision = energy.Supervision(),
          weights: LossWeights = LossWeights(),
          config: SolveConfig = SolveConfig(), transforms=None) -> SolveReport:
    """Run the two-stage schedule on a single view."""
    t_start = time.perf_counter()
    transforms = energy.default_transforms(weights) if transforms is None else transforms
    scene = state.scene
    has_guide = scene.guide_normals is not None

    def loss_fn(params):
        return energy.total_loss_arrays(params, scene, supervision, weights, transforms)

    value_and_grad = jax.jit(jax.value_and_grad(loss_fn, has_aux=True))
    eval_loss = jax.jit(loss_fn)
    resolver = _make_resolver(scene, weights, config.lighting_ridge)

    params = dict(state.params)
    m = {k: jnp.zeros_like(p) for k, p in params.items()}
    v = {k: jnp.zeros_like(p) for k, p in params.items()}
    trace = []
    degenerate = 0

    total0, terms0 = eval_loss(params)
    _check_finite(float(total0), terms0)
    trace.append(_record(terms0, total0))

    def run_stage(params, m, v, iters, frozen, resolve_period):
        nonlocal degenerate
        totals = [trace[-1]["total"]]
        t = 0
        for it in range(iters):
            if resolve_period and it % resolve_period == 0:
                if _resolve_rank(params, scene) < scene.prior.dim:
                    degenerate += 1
                    params = dict(params, light_alpha=jnp.zeros(scene.prior.dim))
                else:
                    params = dict(params, light_alpha=resolver(params))
            t += 1
            (total, terms), grads = value_and_grad(params)
            params, m, v = _adam_update(params, grads, m, v, t,
                                        config.step_size, config.beta1,
                                        config.beta2, frozen)
            _check_finite(float(total), terms)
            trace.append(_record(terms, total))
            totals.append(trace[-1]["total"])
            if _converged(totals, config.tolerance):
                break
        return params, m, v

    stage1 = config.stage1_iters
    if stage1 > 0 and not has_guide:
        warnings.warn("stage 1 requires guide normals; skipping pre-training stage")
        stage1 = 0

    if stage1 > 0:
        frozen = frozenset({"normal_pq", "light_alpha"})
        params, m, v = run_stage(params, m, v, stage1, frozen,
                                 config.light_resolve_every)

    if config.stage2_iters > 0:
        if config.lighting_mode == "resolve":
            frozen = frozenset({"light_alpha"})
            period = config.light_resolve_every
        else:
            frozen = frozenset()
            period = 0
        params, m, v = run_stage(params, m, v, config.stage2_iters, frozen, period)

    final_state = energy.EnergyState(params=params, scene=scene)
    albedo, shadow, normals, alpha, lighting = final_state.decoded()
    return SolveReport(trace=trace, state=final_state, albedo=albedo,
                       shadow=shadow, normals=normals, lighting=lighting,
                       lighting_alpha=alpha, degenerate_resolves=degenerate,
                       wall_time=time.perf_counter() - t_start)


def solve_pair(state_i: energy.EnergyState, state_j: energy.EnergyState,
               pair_i: energy.Supervision, pair_j: energy.Supervision,
               weights: LossWeights = LossWeights(),
               config: SolveConfig = SolveConfig(), transforms=None):
    """Joint two-view solve with coupled consistency terms.

    `pair_i` holds PairView stencils whose live partner is view j, and vice
    versa; the fixed shadow/lighting/albedo slots of those PairViews are
    ignored in favour of the partner's decoded parameters.
    """
    t_start = time.perf_counter()
    transforms = energy.default_transforms(weights) if transforms is None else transforms
    scenes = {"i": state_i.scene, "j": state_j.scene}
    sups = {"i": pair_i, "j": pair_j}

    def live_quantities(params_side, scene):
        albedo = energy.decode_albedo(params_side["albedo_raw"])
        shadow = energy.decode_shadow(params_side["shadow_raw"])
        lighting = energy.decode_lighting(params_side["light_alpha"],
                                          scene.prior.mean, scene.prior.basis_scaled())
        return albedo, shadow, lighting

    def joint_loss(params):
        partner = {"i": "j", "j": "i"}
        total = 0.0
        both_terms = {}
        for side in ("i", "j"):
            other = partner[side]
            live = [live_quantities(params[other], scenes[other])
                    for _ in sups[side].pair_views]
            t_side, terms = energy.total_loss_arrays(
                params[side], scenes[side], sups[side], weights, transforms,
                partner_quantities=live)
            total = total + t_side
            both_terms[side] = terms
        return total, both_terms

    value_and_grad = jax.jit(jax.value_and_grad(joint_loss, has_aux=True))
    eval_loss = jax.jit(joint_loss)
    resolvers = {s: _make_resolver(scenes[s], weights, config.lighting_ridge)
                 for s in ("i", "j")}

    params = {"i": dict(state_i.params), "j": dict(state_j.params)}
    m = jax.tree_util.tree_map(jnp.zeros_like, params)
    v = jax.tree_util.tree_map(jnp.zeros_like, params)
    traces = {"i": [], "j": []}
    degenerate = {"i": 0, "j": 0}

    def record(both_terms, total):
        for side in ("i", "j"):
            row = _record(both_terms[side], total)
            traces[side].append(row)

    total0, terms0 = eval_loss(params)
    for side in ("i", "j"):
        _check_finite(float(total0), terms0[side])
    record(terms0, total0)

    def resolve_all(params):
        for side in ("i", "j"):
            if _resolve_rank(params[side], scenes[side]) < scenes[side].prior.dim:
                degenerate[side] += 1
                params[side] = dict(params[side],
                                    light_alpha=jnp.zeros(scenes[side].prior.dim))
            else:
                params[side] = dict(params[side],
                                    light_alpha=resolvers[side](params[side]))
        return params

    def run_stage(params, m, v, iters, frozen, resolve_period):
        totals = [traces["i"][-1]["total"]]
        t = 0
        for it in range(iters):
            if resolve_period and it % resolve_period == 0:
                params = resolve_all(params)
            t += 1
            (total, both_terms), grads = value_and_grad(params)
            for side in ("i", "j"):
                params[side], m[side], v[side] = _adam_update(
                    params[side], grads[side], m[side], v[side], t,
                    config.step_size, config.beta1, config.beta2, frozen)
                _check_finite(float(total), both_terms[side])
            record(both_terms, total)
            totals.append(float(total))
            if _converged(totals, config.tolerance):
                break
        return params, m, v

    has_guides = all(scenes[s].guide_normals is not None for s in ("i", "j"))
    stage1 = config.stage1_iters
    if stage1 > 0 and not has_guides:
        warnings.warn("stage 1 requires guide normals on both views; skipping")
        stage1 = 0
    if stage1 > 0:
        params, m, v = run_stage(params, m, v, stage1,
                                 frozenset({"normal_pq", "light_alpha"}),
                                 config.light_resolve_every)
    if config.stage2_iters > 0:
        if config.lighting_mode == "resolve":
            frozen, period = frozenset({"light_alpha"}), config.light_resolve_every
        else:
            frozen, period = frozenset(), 0
        params, m, v = run_stage(params, m, v, config.stage2_iters, frozen, period)

    wall = time.perf_counter() - t_start
    reports = []
    for side, base in (("i", state_i), ("j", state_j)):
        final = energy.EnergyState(params=params[side], scene=scenes[side])
        albedo, shadow, normals, alpha, lighting = final.decoded()
        reports.append(SolveReport(
            trace=traces[side], state=final, albedo=albedo, shadow=shadow,
            normals=normals, lighting=lighting, lighting_alpha=alpha,
            degenerate_resolves=degenerate[side], wall_time=wall))
    return reports[0], reports[1]
