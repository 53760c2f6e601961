"""Warped Bayesian linear regression per region, fit by evidence maximization.

Model for one region: the warped response z = f(y) follows

    z = w^T phi(x) + e,   e ~ N(0, 1/beta),   w ~ N(0, I/alpha)

with f the sinh-arcsinh warp. Hyperparameters theta = (log_alpha, log_beta,
epsilon, log_delta) are chosen by minimizing the negative log marginal
likelihood (evidence)

    NLL(theta) = E(m) + 1/2 log|A| + N/2 log(2 pi)
                 - M/2 log(alpha) - N/2 log(beta) - sum_i log f'(y_i)

where A = alpha I + beta Phi^T Phi is the posterior precision,
m = beta A^{-1} Phi^T z the posterior mean, and
E(m) = beta/2 ||z - Phi m||^2 + alpha/2 m^T m. Gradients are analytic; the
terms through m's dependence on theta vanish because m minimizes E
(envelope theorem), leaving

    dNLL/dlog(alpha) = -M/2 + alpha/2 (m^T m + tr A^{-1})
    dNLL/dlog(beta)  = -N/2 + beta/2 (||r||^2 + tr(A^{-1} Phi^T Phi))
    dNLL/deps        = -beta sum_i r_i cosh(u_i) + sum_i tanh(u_i)
    dNLL/dlog(delta) = beta delta sum_i r_i cosh(u_i) asinh(y_i)
                       - sum_i (1 + delta asinh(y_i) tanh(u_i))

with r = z - Phi m and u = delta asinh(y) - eps.

Each region fits twice: once with the warp pinned to identity, once with all
four hyperparameters free, and keeps whichever reaches the lower NLL. That
guarantees the warped model never loses to the plain Gaussian one.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg as sla
from scipy import stats
from scipy.optimize import minimize

from ._version import __version__
from .cohort import Cohort
from .design import DesignSchema, ModelConfig, apply_design, fit_design
from .errors import InputError, NumericalError, SchemaError
from .serialize import dump_json, load_json
from .warp import WarpParams, warp_forward, warp_inverse, warp_log_jacobian

log = logging.getLogger(__name__)

LN_2PI = float(np.log(2.0 * np.pi))

# box constraints keeping the evidence finite during optimization
_BOUNDS_FREE = ((-20.0, 20.0), (-20.0, 20.0), (-5.0, 5.0), (-3.0, 3.0))
_BOUNDS_IDENTITY = ((-20.0, 20.0), (-20.0, 20.0), (0.0, 0.0), (0.0, 0.0))
_PENALTY = 1e300


@dataclass(frozen=True)
class Hyperparams:
    """Evidence-optimized quantities: precisions on log scale plus the warp."""

    log_alpha: float = 0.0
    log_beta: float = 0.0
    warp: WarpParams = field(default_factory=WarpParams)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    @property
    def beta(self) -> float:
        return float(np.exp(self.log_beta))

    def to_vector(self) -> np.ndarray:
        return np.array(
            [self.log_alpha, self.log_beta, self.warp.epsilon, self.warp.log_delta]
        )

    @classmethod
    def from_vector(cls, theta: np.ndarray) -> "Hyperparams":
        return cls(
            log_alpha=float(theta[0]),
            log_beta=float(theta[1]),
            warp=WarpParams(epsilon=float(theta[2]), log_delta=float(theta[3])),
        )

    def to_dict(self) -> dict:
        return {
            "log_alpha": float(self.log_alpha),
            "log_beta": float(self.log_beta),
            "warp": self.warp.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(
            log_alpha=float(d["log_alpha"]),
            log_beta=float(d["log_beta"]),
            warp=WarpParams.from_dict(d["warp"]),
        )


@dataclass(frozen=True)
class OptimizerSettings:
    """L-BFGS stopping rules: relative NLL change, gradient norm, iteration cap."""

    tol: float = 1e-6
    grad_tol: float = 1e-6
    max_iter: int = 500


@dataclass
class _EvidenceState:
    """Posterior and evidence pieces at one hyperparameter setting."""

    z: np.ndarray
    m: np.ndarray
    chol: np.ndarray
    residual: np.ndarray
    rss: float
    nll: float


class _EvidenceProblem:
    """Caches design products and asinh(y) so repeated evaluations stay cheap."""

    def __init__(self, phi: np.ndarray, y: np.ndarray, gram: np.ndarray | None = None):
        self.phi = np.asarray(phi, dtype=float)
        self.y = np.asarray(y, dtype=float)
        if self.phi.ndim != 2 or self.y.ndim != 1:
            raise InputError("design must be 2-d and responses 1-d")
        if self.phi.shape[0] != self.y.shape[0]:
            raise SchemaError(
                f"design has {self.phi.shape[0]} rows but responses have {self.y.shape[0]}"
            )
        self.n, self.m_dim = self.phi.shape
        self.gram = self.phi.T @ self.phi if gram is None else gram
        self.asinh_y = np.arcsinh(self.y)
        self.log1p_y2 = np.log1p(np.square(self.y))
        self.eye = np.eye(self.m_dim)

    def _warp_pieces(self, eps: float, log_delta: float):
        if eps == 0.0 and log_delta == 0.0:
            return self.y.copy(), 0.0
        delta = np.exp(log_delta)
        u = delta * self.asinh_y - eps
        z = np.sinh(u)
        log_cosh = np.logaddexp(u, -u) - np.log(2.0)
        log_jac = log_delta + log_cosh - 0.5 * self.log1p_y2
        return z, float(np.sum(log_jac))

    def state(self, h: Hyperparams) -> _EvidenceState:
        alpha, beta = h.alpha, h.beta
        z, log_jac_sum = self._warp_pieces(h.warp.epsilon, h.warp.log_delta)
        a_mat = alpha * self.eye + beta * self.gram
        try:
            chol = sla.cholesky(a_mat, lower=True)
        except sla.LinAlgError:
            raise NumericalError(
                f"posterior precision not positive definite "
                f"(alpha={alpha:.3g}, beta={beta:.3g}, "
                f"cond={np.linalg.cond(a_mat):.3g})"
            ) from None
        m = beta * sla.cho_solve((chol, True), self.phi.T @ z)
        residual = z - self.phi @ m
        rss = float(residual @ residual)
        e_m = 0.5 * (beta * rss + alpha * float(m @ m))
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        nll = (
            e_m
            + 0.5 * logdet
            + 0.5 * self.n * LN_2PI
            - 0.5 * self.m_dim * h.log_alpha
            - 0.5 * self.n * h.log_beta
            - log_jac_sum
        )
        return _EvidenceState(
            z=z, m=m, chol=chol, residual=residual, rss=rss, nll=float(nll)
        )

    def value(self, theta: np.ndarray) -> float:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                v = self.state(Hyperparams.from_vector(theta)).nll
        except NumericalError:
            return _PENALTY
        return v if np.isfinite(v) else _PENALTY

    def value_and_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        h = Hyperparams.from_vector(theta)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                st = self.state(h)
                if not np.isfinite(st.nll):
                    return _PENALTY, np.zeros(4)
                grad = self._grad(h, st)
                if not np.all(np.isfinite(grad)):
                    return _PENALTY, np.zeros(4)
        except NumericalError:
            return _PENALTY, np.zeros(4)
        return st.nll, grad

    def _grad(self, h: Hyperparams, st: _EvidenceState) -> np.ndarray:
        alpha, beta = h.alpha, h.beta
        a_inv = sla.cho_solve((st.chol, True), self.eye)
        tr_a_inv = float(np.trace(a_inv))
        tr_a_inv_gram = float(np.sum(a_inv * self.gram))
        d_log_alpha = -0.5 * self.m_dim + 0.5 * alpha * (float(st.m @ st.m) + tr_a_inv)
        d_log_beta = -0.5 * self.n + 0.5 * beta * (st.rss + tr_a_inv_gram)

        eps, log_delta = h.warp.epsilon, h.warp.log_delta
        delta = np.exp(log_delta)
        u = delta * self.asinh_y - eps
        cosh_u = np.cosh(u)
        tanh_u = np.tanh(u)
        d_eps = -beta * float(st.residual @ cosh_u) + float(np.sum(tanh_u))
        d_log_delta = beta * delta * float(
            st.residual @ (cosh_u * self.asinh_y)
        ) - float(np.sum(1.0 + delta * self.asinh_y * tanh_u))
        return np.array([d_log_alpha, d_log_beta, d_eps, d_log_delta])


def neg_log_evidence(phi: np.ndarray, y: np.ndarray, h: Hyperparams) -> float:
    """Negative log marginal likelihood of one region's data."""
    return _EvidenceProblem(phi, y).state(h).nll


def neg_log_evidence_grad(phi: np.ndarray, y: np.ndarray, h: Hyperparams) -> np.ndarray:
    """Analytic gradient wrt (log_alpha, log_beta, epsilon, log_delta)."""
    problem = _EvidenceProblem(phi, y)
    st = problem.state(h)
    return problem._grad(h, st)


@dataclass(eq=False)
class RegionModel:
    """Fitted posterior for one region; chol_precision is lower-Cholesky of A."""

    region: str
    weights: np.ndarray
    chol_precision: np.ndarray
    hyperparams: Hyperparams
    train_z_mean: float
    train_z_var: float
    n_train: int
    converged: bool = True
    nll: float = float("nan")
    nll_identity: float = field(default=float("nan"), repr=False)
    nll_path: tuple[float, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "region": self.region,
            "weights": [float(v) for v in self.weights],
            "chol_precision": [[float(v) for v in row] for row in self.chol_precision],
            "hyperparams": self.hyperparams.to_dict(),
            "train_z_mean": float(self.train_z_mean),
            "train_z_var": float(self.train_z_var),
            "n_train": int(self.n_train),
            "converged": bool(self.converged),
            "nll": float(self.nll),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionModel":
        return cls(
            region=d["region"],
            weights=np.asarray(d["weights"], dtype=float),
            chol_precision=np.asarray(d["chol_precision"], dtype=float),
            hyperparams=Hyperparams.from_dict(d["hyperparams"]),
            train_z_mean=float(d["train_z_mean"]),
            train_z_var=float(d["train_z_var"]),
            n_train=int(d["n_train"]),
            converged=bool(d["converged"]),
            nll=float(d["nll"]),
        )


def _warp_engagement_margin(problem: _EvidenceProblem, x_identity: np.ndarray) -> float:
    """Evidence gain the free warp must clear before it replaces the identity fit.

    With epsilon and delta free, the warp can absorb the identity solution's
    location and scale outright: the weights shrink to zero and the refit
    recovers the weight-complexity part of the evidence without changing the
    fitted distribution of y. That bookkeeping gain is bounded by the identity
    fit's own complexity term, 0.5*ln|A| - (M/2)*ln(alpha), plus the prior
    shrinkage cost of about half the effective weight count. Requiring the
    free fit to beat the identity fit by more than that (plus a flat 3 nat
    allowance for two shape parameters chasing sample moments) keeps the warp
    disengaged on Gaussian data while leaving genuinely skewed responses,
    whose gain grows linearly with N, far above the bar.
    """
    h = Hyperparams.from_vector(x_identity)
    st = problem.state(h)
    logdet = 2.0 * float(np.sum(np.log(np.diag(st.chol))))
    complexity = 0.5 * logdet - 0.5 * problem.m_dim * h.log_alpha
    a_inv = sla.cho_solve((st.chol, True), problem.eye)
    eff_dof = problem.m_dim - h.alpha * float(np.trace(a_inv))
    return complexity + 0.5 * eff_dof + 3.0


def fit_region(
    phi: np.ndarray,
    y: np.ndarray,
    region: str = "region",
    init: Hyperparams | None = None,
    opts: OptimizerSettings | None = None,
    gram: np.ndarray | None = None,
) -> RegionModel:
    """Fit one region by evidence minimization with an identity-warp fallback.

    Two L-BFGS runs share the starting point (log_alpha = 0,
    log_beta = -log Var(y), identity warp, unless `init` overrides it): one
    with the warp coordinates pinned at identity, one fully free. The free
    run wins only when it beats the identity optimum by more than the
    reparametrization margin (see _warp_engagement_margin); otherwise the
    identity solution is returned.
    """
    opts = opts or OptimizerSettings()
    y = np.asarray(y, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if y.shape[0] < 2:
        raise InputError(f"region '{region}': need at least 2 observations")
    if float(np.ptp(y)) == 0.0:
        raise InputError(f"region '{region}': constant response cannot be fit")
    problem = _EvidenceProblem(phi, y, gram=gram)

    if init is not None:
        x0 = init.to_vector()
    else:
        x0 = np.array([0.0, -np.log(float(np.var(y))), 0.0, 0.0])
    x0_identity = np.array([x0[0], x0[1], 0.0, 0.0])

    def run(x_start: np.ndarray, bounds) -> tuple:
        path = [problem.value(x_start)]
        res = minimize(
            problem.value_and_grad,
            x_start,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            callback=lambda xk: path.append(problem.value(xk)),
            options={
                "maxiter": opts.max_iter,
                "ftol": opts.tol,
                "gtol": opts.grad_tol,
            },
        )
        return res, path

    res_id, path_id = run(x0_identity, _BOUNDS_IDENTITY)
    res_free, path_free = run(x0, _BOUNDS_FREE)
    margin = _warp_engagement_margin(problem, res_id.x)
    if res_free.fun < res_id.fun - margin:
        chosen, path = res_free, path_free
    else:
        chosen, path = res_id, path_id
        # exact identity warp on fallback
        chosen.x[2:] = 0.0
    if not chosen.success:
        log.warning(
            "region '%s': evidence optimization stopped without convergence (%s)",
            region,
            getattr(chosen, "message", ""),
        )

    h = Hyperparams.from_vector(chosen.x)
    st = problem.state(h)
    z = st.z
    return RegionModel(
        region=region,
        weights=st.m,
        chol_precision=st.chol,
        hyperparams=h,
        train_z_mean=float(np.mean(z)),
        train_z_var=float(np.var(z)),
        n_train=int(y.shape[0]),
        converged=bool(chosen.success),
        nll=float(st.nll),
        nll_identity=float(res_id.fun),
        nll_path=tuple(float(v) for v in path),
    )


@dataclass
class RegionPrediction:
    """Per-row latent mean, posterior variance, shared noise variance, and yhat."""

    zhat: np.ndarray
    model_variance: np.ndarray
    noise_variance: float
    yhat: np.ndarray


def predict_region(model: RegionModel, phi_star: np.ndarray) -> RegionPrediction:
    phi_star = np.atleast_2d(np.asarray(phi_star, dtype=float))
    if phi_star.shape[1] != model.weights.shape[0]:
        raise SchemaError(
            f"region '{model.region}': design has {phi_star.shape[1]} columns "
            f"but the model expects {model.weights.shape[0]}"
        )
    zhat = phi_star @ model.weights
    solved = sla.cho_solve((model.chol_precision, True), phi_star.T)
    model_variance = np.maximum(np.einsum("ij,ij->j", phi_star.T, solved), 0.0)
    noise_variance = 1.0 / model.hyperparams.beta
    yhat = warp_inverse(zhat, model.hyperparams.warp)
    return RegionPrediction(
        zhat=zhat,
        model_variance=model_variance,
        noise_variance=noise_variance,
        yhat=yhat,
    )


@dataclass(eq=False)
class NormativeModel:
    """All fitted regions plus the shared design schema and provenance."""

    region_models: tuple[RegionModel, ...]
    config: ModelConfig
    schema: DesignSchema
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for rm in self.region_models:
            if rm.weights.shape[0] != self.schema.n_columns:
                raise SchemaError(
                    f"region '{rm.region}' has {rm.weights.shape[0]} weights "
                    f"but the schema defines {self.schema.n_columns} columns"
                )

    @property
    def region_names(self) -> tuple[str, ...]:
        return tuple(rm.region for rm in self.region_models)


def fit_normative(
    train: Cohort,
    config: ModelConfig | None = None,
    opts: OptimizerSettings | None = None,
    workers: int = 1,
    seed: int | None = None,
) -> NormativeModel:
    """Fit every region independently; results do not depend on worker count."""
    config = config or ModelConfig()
    dm = fit_design(train, config)
    phi = dm.values
    gram = phi.T @ phi

    def fit_one(d: int) -> RegionModel:
        return fit_region(
            phi, train.responses[:, d], region=train.regions[d], opts=opts, gram=gram
        )

    indices = range(train.n_regions)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            region_models = tuple(pool.map(fit_one, indices))
    else:
        region_models = tuple(fit_one(d) for d in indices)
    provenance = {
        "cohort_hash": train.content_hash(),
        "seed": seed,
        "version": __version__,
        "n_train": train.n_subjects,
    }
    return NormativeModel(
        region_models=region_models,
        config=config,
        schema=dm.schema,
        provenance=provenance,
    )


@dataclass
class DeviationMatrix:
    """Standardized latent deviations Z and original-unit errors E = y - yhat."""

    ids: tuple[str, ...]
    regions: tuple[str, ...]
    Z: np.ndarray
    E: np.ndarray
    yhat: np.ndarray


def _check_regions(model: NormativeModel, cohort: Cohort) -> list[int]:
    """Column index into cohort responses for each model region, in model order."""
    cohort_idx = {r: i for i, r in enumerate(cohort.regions)}
    missing = [r for r in model.region_names if r not in cohort_idx]
    extra = [r for r in cohort.regions if r not in set(model.region_names)]
    if missing or extra:
        raise SchemaError(
            f"region mismatch: missing from cohort {missing[:10]}, "
            f"not in model {extra[:10]}"
        )
    return [cohort_idx[r] for r in model.region_names]


def deviations(model: NormativeModel, cohort: Cohort) -> DeviationMatrix:
    """Score a cohort against the reference model.

    Z = (z - zhat) / sqrt(noise_variance + model_variance) on the latent scale,
    E = y - yhat in original units.
    """
    cols = _check_regions(model, cohort)
    phi = apply_design(cohort.subjects, model.schema).values
    n, d_count = cohort.n_subjects, len(cols)
    z_scores = np.empty((n, d_count))
    errors = np.empty((n, d_count))
    yhats = np.empty((n, d_count))
    for j, (rm, col) in enumerate(zip(model.region_models, cols)):
        y = cohort.responses[:, col]
        pred = predict_region(rm, phi)
        z = warp_forward(y, rm.hyperparams.warp)
        denom = np.sqrt(pred.noise_variance + pred.model_variance)
        z_scores[:, j] = (z - pred.zhat) / denom
        errors[:, j] = y - pred.yhat
        yhats[:, j] = pred.yhat
    return DeviationMatrix(
        ids=cohort.ids,
        regions=model.region_names,
        Z=z_scores,
        E=errors,
        yhat=yhats,
    )


def explained_variance(y: np.ndarray, yhat: np.ndarray) -> float | None:
    """1 - Var(y - yhat)/Var(y) with population variances; None when Var(y) = 0."""
    y = np.asarray(y, dtype=float)
    var_y = float(np.var(y))
    if var_y == 0.0:
        return None
    return 1.0 - float(np.var(y - np.asarray(yhat, dtype=float))) / var_y


def standardized_log_loss(
    z: np.ndarray,
    zhat: np.ndarray,
    var_pred: np.ndarray,
    baseline_mean: float,
    baseline_var: float,
) -> float:
    """Mean log loss of the model minus that of the training-baseline Gaussian.

    The baseline predicts every point with the training latent mean/variance;
    scoring the baseline against itself gives exactly 0.
    """
    z = np.asarray(z, dtype=float)
    model_ll = 0.5 * np.log(2.0 * np.pi * var_pred) + np.square(z - zhat) / (
        2.0 * var_pred
    )
    base_ll = 0.5 * np.log(2.0 * np.pi * baseline_var) + np.square(
        z - baseline_mean
    ) / (2.0 * baseline_var)
    return float(np.mean(model_ll - base_ll))


@dataclass
class RegionFitMetrics:
    region: str
    explained_variance: float | None
    msll: float
    skew: float
    kurtosis: float


def fit_metrics(model: NormativeModel, cohort: Cohort) -> list[RegionFitMetrics]:
    """Per-region fit quality on a cohort: EV, MSLL, and Z-moment diagnostics."""
    cols = _check_regions(model, cohort)
    phi = apply_design(cohort.subjects, model.schema).values
    out = []
    for rm, col in zip(model.region_models, cols):
        y = cohort.responses[:, col]
        pred = predict_region(rm, phi)
        z = warp_forward(y, rm.hyperparams.warp)
        var_pred = pred.noise_variance + pred.model_variance
        z_dev = (z - pred.zhat) / np.sqrt(var_pred)
        out.append(
            RegionFitMetrics(
                region=rm.region,
                explained_variance=explained_variance(y, pred.yhat),
                msll=standardized_log_loss(
                    z, pred.zhat, var_pred, rm.train_z_mean, rm.train_z_var
                ),
                skew=float(stats.skew(z_dev)),
                kurtosis=float(stats.kurtosis(z_dev)),
            )
        )
    return out


MODEL_FILE = "model.json"
REGIONS_FILE = "regions.json"
_BUNDLE_FORMAT = "normgauge-model"


def save_bundle(model: NormativeModel, out_dir: str | Path) -> None:
    """Write model.json (config, schema, provenance) and regions.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(
        {
            "format": _BUNDLE_FORMAT,
            "format_version": 1,
            "config": model.config.to_dict(),
            "design_schema": model.schema.to_dict(),
            "provenance": model.provenance,
            "regions": list(model.region_names),
        },
        out / MODEL_FILE,
    )
    dump_json(
        {"regions": [rm.to_dict() for rm in model.region_models]},
        out / REGIONS_FILE,
    )


def load_bundle(bundle_dir: str | Path) -> NormativeModel:
    """Inverse of save_bundle; numeric state is restored bit-for-bit."""
    bundle = Path(bundle_dir)
    meta = load_json(bundle / MODEL_FILE)
    if meta.get("format") != _BUNDLE_FORMAT:
        raise SchemaError(f"{bundle / MODEL_FILE}: not a model bundle")
    regions_doc = load_json(bundle / REGIONS_FILE)
    region_models = tuple(RegionModel.from_dict(d) for d in regions_doc["regions"])
    if list(meta.get("regions", [])) != [rm.region for rm in region_models]:
        raise SchemaError(f"{bundle}: region lists disagree between bundle files")
    return NormativeModel(
        region_models=region_models,
        config=ModelConfig.from_dict(meta["config"]),
        schema=DesignSchema.from_dict(meta["design_schema"]),
        provenance=meta.get("provenance", {}),
    )
