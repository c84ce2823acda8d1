"""Variational objective, Adam, hypervolume checkpoint selection, and the train loop.

The maximised objective is

    (N/|B|) Σ_batch E_q[log p(y | x, Θ)]  -  KL(q_Φ ‖ p_Φ)
        + E_q[log p̃(0 | X̃, Θ_h, M, S)]  -  τ_s ‖loc(s)‖²

with Φ = {Θ_h, M}. ``bayes_standard`` keeps the first two terms with an
isotropic Gaussian prior on every weight; ``deterministic`` keeps only the
likelihood.
"""

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ContractError, IncompatibleCheckpointError, TrainingError
from .evalmetrics import aggregate_metrics, PredictionSet
from .fusionnet import ParameterSet, features, init_parameters, logits as net_logits
from .m2d2prior import M2d2Config, context_log_likelihood, sample_context_batch
from .variational import (
    PriorSpec,
    VariationalPosterior,
    init_posterior,
    kl_gaussian_diag,
    s_penalty,
    sample_posterior,
)

logger = logging.getLogger(__name__)

MODES = ("deterministic", "bayes_standard", "bayes_m2d2")
PROB_EPS = 1e-7
LOG_COLUMNS = (
    "epoch", "steps", "objective", "loglik", "kl", "uncertainty", "s_penalty",
    "val_auroc", "val_auprc", "val_sel_auroc", "val_sel_auprc", "hypervolume",
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    batch_size: int = 16
    learning_rate: float = 2e-4
    mc_samples_train: int = 1
    mc_samples_eval: int = 32
    seed: int = 0
    mode: str = "bayes_m2d2"
    use_kl: bool = True
    use_uncertainty: bool = True

    def __post_init__(self):
        for name in ("epochs", "batch_size", "mc_samples_train", "mc_samples_eval"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"train.{name}", "must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate", "must be > 0")
        if self.mode not in MODES:
            raise ConfigError("train.mode", f"must be one of {MODES}, got {self.mode!r}")


@dataclass
class Checkpoint:
    step: int
    epoch: int
    mode: str
    arrays: dict
    metrics: np.ndarray
    hypervolume: float


@dataclass
class TrainResult:
    best: Checkpoint
    log: list = field(default_factory=list)
    final_arrays: dict = None


# ---------------------------------------------------------------- objective pieces


def bce_log_likelihood(y, probs):
    """Σ y log p + (1 - y) log(1 - p) with p clamped to [1e-7, 1 - 1e-7]."""
    p = dc.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(dc.as_tensor(y).data)
    return dc.sum_(y * dc.log(p) + (1.0 - y) * dc.log(1.0 - p))


def hypervolume(metrics):
    """Volume of the 4-ball whose radius is the Euclidean norm of the metric 4-vector."""
    m = np.asarray(metrics, dtype=np.float64)
    if m.shape != (4,):
        raise ContractError(f"hypervolume needs 4 metrics, got shape {m.shape}")
    if np.any(np.isnan(m)) or np.any(m < 0.0) or np.any(m > 1.0):
        raise ContractError(f"metrics must lie in [0, 1], got {m.tolist()}")
    r2 = float(np.sum(m * m))
    return math.pi**2 * r2 * r2 / 2.0


def state_leaves(arrays):
    return {k: dc.Tensor(v, requires_grad=True) for k, v in arrays.items()}


def split_deterministic(arrays):
    theta_h = {k[len("theta_h/") :]: v for k, v in arrays.items() if k.startswith("theta_h/")}
    return ParameterSet(theta_h, arrays["theta_L"])


def deterministic_arrays(params):
    out = {f"theta_h/{k}": dc.as_tensor(v).data for k, v in params.theta_h.items()}
    out["theta_L"] = dc.as_tensor(params.theta_L).data
    return out


def mode_of(arrays):
    if "theta_L" in arrays:
        return "deterministic"
    return "bayes_m2d2" if "s_loc" in arrays else "bayes_standard"


def init_state(mode, net_config, rng, prior=None):
    prior = prior or PriorSpec()
    if mode == "deterministic":
        return deterministic_arrays(init_parameters(net_config, rng))
    post = init_posterior(net_config, rng, with_s=(mode == "bayes_m2d2"), sigma_s=prior.sigma_s)
    return post.to_arrays()


def objective(state, x_ehr, x_cxr, y, n_train, net_config, prior, m2d2, train_cfg,
              rng, context=None, noise=None):
    """Scalar objective (to maximise) plus a dict of its separately computed terms.

    ``state`` maps names to graph leaves (or arrays). ``noise`` is a list of
    per-MC-sample noise dicts; pass the returned list back in to freeze ε.
    """
    mode = train_cfg.mode
    batch = x_ehr.shape[0]
    scale = n_train / batch
    y = np.asarray(y)
    terms = {}

    if mode == "deterministic":
        params = split_deterministic(state)
        probs = dc.sigmoid(net_logits(x_ehr, x_cxr, params, net_config))
        terms["loglik"] = scale * bce_log_likelihood(y, probs)
        return _assemble(terms), terms, noise

    post = VariationalPosterior.from_arrays(state, prior.sigma_s)
    with_context = mode == "bayes_m2d2" and train_cfg.use_uncertainty and context is not None
    if with_context:
        ehr_all = np.concatenate([x_ehr, context.x_ehr])
        cxr_all = np.concatenate([x_cxr, context.x_cxr])
    else:
        ehr_all, cxr_all = x_ehr, x_cxr

    draws = train_cfg.mc_samples_train
    noise = noise if noise is not None else [None] * draws
    loglik, uncert = None, None

    for i in range(draws):
        sample, noise[i] = sample_posterior(post, rng, noise[i])
        H = features(ehr_all, cxr_all, sample.params.theta_h, net_config)
        probs = dc.sigmoid(dc.matmul(H[:batch], sample.params.theta_L))
        ll = bce_log_likelihood(y, probs)
        loglik = ll if loglik is None else loglik + ll
        if with_context:
            u = context_log_likelihood(H[batch:], sample.m, sample.s, m2d2)
            uncert = u if uncert is None else uncert + u
    terms["loglik"] = (scale / draws) * loglik

    if train_cfg.use_kl:
        kl = kl_gaussian_diag(post.theta_h, 0.0, prior.theta_h_var)
        if mode == "bayes_m2d2":
            kl = kl + kl_gaussian_diag(post.head, prior.m_loc, 1.0 / prior.m_prec)
        else:
            kl = kl + kl_gaussian_diag(post.head, 0.0, prior.theta_h_var)
        terms["kl"] = kl
    if with_context:
        terms["uncertainty"] = uncert / draws
    if mode == "bayes_m2d2" and train_cfg.use_uncertainty:
        terms["s_penalty"] = s_penalty(post.s, prior.s_tau)
    return _assemble(terms), terms, noise


def _assemble(terms):
    total = terms["loglik"]
    if "kl" in terms:
        total = total - terms["kl"]
    if "uncertainty" in terms:
        total = total + terms["uncertainty"]
    if "s_penalty" in terms:
        total = total - terms["s_penalty"]
    return total


# ---------------------------------------------------------------- optimiser


class NonFiniteGradient(ContractError):
    pass


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam descent step; returns new param dict, mutates ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}; step rejected")
    state.t += 1
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - beta1**state.t)
        v_hat = v / (1.0 - beta2**state.t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


# ---------------------------------------------------------------- prediction


def predict(arrays, x_ehr, x_cxr, net_config, mc_samples, rng, sigma_s=0.1, chunk=512):
    """Posterior-predictive probabilities: mean of sigmoid(logits) over posterior draws."""
    n = x_ehr.shape[0]
    mode = mode_of(arrays)
    out = np.zeros((n, net_config.num_labels))
    with dc.no_grad():
        if mode == "deterministic":
            params = split_deterministic(arrays)
            for lo in range(0, n, chunk):
                sl = slice(lo, lo + chunk)
                out[sl] = dc.sigmoid(net_logits(x_ehr[sl], x_cxr[sl], params, net_config)).data
            return out
        post = VariationalPosterior.from_arrays(arrays, sigma_s)
        for _ in range(mc_samples):
            sample, _ = sample_posterior(post, rng)
            for lo in range(0, n, chunk):
                sl = slice(lo, lo + chunk)
                out[sl] += dc.sigmoid(net_logits(x_ehr[sl], x_cxr[sl], sample.params, net_config)).data
    return out / mc_samples


def validation_metrics(arrays, split, net_config, mc_samples, rng, sigma_s=0.1):
    probs = predict(arrays, split.x_ehr, split.x_cxr, net_config, mc_samples, rng, sigma_s)
    return aggregate_metrics(PredictionSet(probs, split.y))


# ---------------------------------------------------------------- training loop


def train(dataset, net_config, train_cfg, prior=None, m2d2=None, init=None, callback=None):
    """Minibatch Adam on the objective; keep the epoch with the best validation hypervolume."""
    prior = prior or PriorSpec()
    m2d2 = m2d2 or M2d2Config()
    tr, val = dataset["train"], dataset["val"]
    init_ss, order_ss, mc_ss, ctx_ss, val_ss = np.random.SeedSequence(train_cfg.seed).spawn(5)
    arrays = dict(init) if init is not None else init_state(
        train_cfg.mode, net_config, np.random.default_rng(init_ss), prior
    )
    order_rng = np.random.default_rng(order_ss)
    mc_rng = np.random.default_rng(mc_ss)
    ctx_rng = np.random.default_rng(ctx_ss)
    val_rng = np.random.default_rng(val_ss)
    adam = AdamState()
    n = tr.n
    use_context = train_cfg.mode == "bayes_m2d2" and train_cfg.use_uncertainty
    best, log, step = None, [], 0

    for epoch in range(1, train_cfg.epochs + 1):
        perm = order_rng.permutation(n)
        sums = dict.fromkeys(("objective", "loglik", "kl", "uncertainty", "s_penalty"), 0.0)
        steps = 0
        for lo in range(0, n, train_cfg.batch_size):
            rows = perm[lo : lo + train_cfg.batch_size]
            try:
                context = sample_context_batch(tr.x_ehr, tr.x_cxr, m2d2, ctx_rng) if use_context else None
                leaves = state_leaves(arrays)
                total, terms, _ = objective(
                    leaves, tr.x_ehr[rows], tr.x_cxr[rows], tr.y[rows], n,
                    net_config, prior, m2d2, train_cfg, mc_rng, context,
                )
                names = list(leaves)
                grads = dc.backward(total, wrt=[leaves[k] for k in names])
                # maximise the objective: descend on its negation
                arrays = optimizer_step(arrays, {k: -g for k, g in zip(names, grads)}, adam, train_cfg.learning_rate)
            except Exception as exc:
                raise TrainingError(epoch, step, exc) from exc
            step += 1
            steps += 1
            sums["objective"] += total.item()
            for key, val_t in terms.items():
                sums[key] += val_t.item()

        metrics = validation_metrics(arrays, val, net_config, train_cfg.mc_samples_eval, val_rng, prior.sigma_s)
        hv = hypervolume(np.nan_to_num(metrics, nan=0.0))
        row = {"epoch": epoch, "steps": steps}
        row.update({k: v / steps for k, v in sums.items()})
        row.update(dict(zip(("val_auroc", "val_auprc", "val_sel_auroc", "val_sel_auprc"), metrics.tolist())))
        row["hypervolume"] = hv
        log.append(row)
        logger.info("epoch %d objective %.4f hypervolume %.4f", epoch, row["objective"], hv)
        if callback is not None:
            callback(row)
        if best is None or hv > best.hypervolume:
            best = Checkpoint(step, epoch, train_cfg.mode, copy.deepcopy(arrays), metrics, hv)
    return TrainResult(best, log, arrays)


def format_log(rows):
    """Tab-separated training log with a header line; floats in repr precision."""
    lines = ["\t".join(LOG_COLUMNS)]
    for row in rows:
        lines.append("\t".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


def parse_log(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split("\t")
    rows = []
    for ln in lines[1:]:
        vals = ln.split("\t")
        rows.append({h: (int(v) if h in ("epoch", "steps") else float(v)) for h, v in zip(header, vals)})
    return rows


# ---------------------------------------------------------------- checkpoint files

_META = ("meta/step", "meta/epoch", "meta/metrics", "meta/hypervolume")


def checkpoint_tensors(ckpt):
    """Flatten a Checkpoint into named arrays for the named-tensor container."""
    out = {k: np.asarray(v, dtype=np.float64) for k, v in ckpt.arrays.items()}
    out["meta/step"] = np.float64(ckpt.step)
    out["meta/epoch"] = np.float64(ckpt.epoch)
    out["meta/metrics"] = np.asarray(ckpt.metrics, dtype=np.float64)
    out["meta/hypervolume"] = np.float64(ckpt.hypervolume)
    return out


def checkpoint_from_tensors(tensors):
    missing = [k for k in _META if k not in tensors]
    if missing:
        raise IncompatibleCheckpointError(f"checkpoint lacks {missing}")
    arrays = {k: v for k, v in tensors.items() if not k.startswith("meta/")}
    return Checkpoint(
        int(tensors["meta/step"]),
        int(tensors["meta/epoch"]),
        mode_of(arrays),
        arrays,
        np.asarray(tensors["meta/metrics"]),
        float(tensors["meta/hypervolume"]),
    )


def check_compatible(arrays, net_config, prior=None):
    """Raise IncompatibleCheckpointError unless names and shapes match ``net_config``."""
    expected = init_state(mode_of(arrays), net_config, np.random.default_rng(0), prior)
    if set(expected) != set(arrays):
        extra = sorted(set(arrays) - set(expected))
        lacking = sorted(set(expected) - set(arrays))
        raise IncompatibleCheckpointError(f"tensor names differ: unexpected {extra}, missing {lacking}")
    for name, ref in expected.items():
        if np.shape(arrays[name]) != np.shape(ref):
            raise IncompatibleCheckpointError(
                f"{name}: checkpoint shape {np.shape(arrays[name])} but config implies {np.shape(ref)}"
            )
