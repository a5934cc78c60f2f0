"""Residual-risk router.

A 15 -> 128 -> 64 -> 1 feed-forward scorer (GELU, per-layer batch
normalization with tracked running statistics, dropout 0.2, sigmoid output,
post-hoc temperature) trained on the CVaR-constrained Lagrangian

    min_psi max_{lam>=0}  E_z[R(z)] + lam * (CVaR_alpha(R(z)) - eps) + lam_B * Brier

where R(z) is the per-seed mean of the cost surrogate
c_slm*(1-p) + c_llm*p + kappa*y*(1-p). Backprop is hand-coded; the primal
uses AdamW with cosine annealing, the dual does Adam ascent on log(lam), so
lam >= 0 holds structurally. Empirical CVaR is the mean of the worst
ceil(alpha*n) values (alpha is the tail mass), with the subgradient flowing
through the selected tail seeds.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import seeds
from .domain import CostSpec, CVaRSpec, RoutingExample
from .evaluation import ece

ROUTER_SCHEMA = "router@1"
BN_EPS = 1e-5

_PARAM_NAMES = ("w1", "b1", "g1", "be1", "w2", "b2", "g2", "be2", "w3", "b3")


def gelu_parts(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(gelu(x), standard-normal CDF of x); the CDF is reused by backward."""
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    return x * cdf, cdf


def gelu(x: np.ndarray) -> np.ndarray:
    return gelu_parts(x)[0]


def gelu_grad(x: np.ndarray, cdf: np.ndarray | None = None) -> np.ndarray:
    if cdf is None:
        cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    return cdf + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class RouterNet:
    """Parameters plus batch-norm running statistics and post-hoc temperature."""

    params: dict[str, np.ndarray]
    run_mean1: np.ndarray
    run_var1: np.ndarray
    run_mean2: np.ndarray
    run_var2: np.ndarray
    temperature: float = 1.0
    tau_route: float | None = None
    dropout: float = 0.2

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int = 15,
             h1: int = 128, h2: int = 64) -> "RouterNet":
        params = {
            "w1": rng.normal(0.0, math.sqrt(2.0 / in_dim), size=(in_dim, h1)),
            "b1": np.zeros(h1),
            "g1": np.ones(h1),
            "be1": np.zeros(h1),
            "w2": rng.normal(0.0, math.sqrt(2.0 / h1), size=(h1, h2)),
            "b2": np.zeros(h2),
            "g2": np.ones(h2),
            "be2": np.zeros(h2),
            "w3": rng.normal(0.0, math.sqrt(2.0 / h2), size=(h2, 1)),
            "b3": np.zeros(1),
        }
        return cls(
            params=params,
            run_mean1=np.zeros(h1),
            run_var1=np.ones(h1),
            run_mean2=np.zeros(h2),
            run_var2=np.ones(h2),
        )

    @classmethod
    def zeros(cls, in_dim: int = 15, h1: int = 128, h2: int = 64) -> "RouterNet":
        net = cls.init(np.random.default_rng(0), in_dim, h1, h2)
        for name in ("w1", "w2", "w3"):
            net.params[name][:] = 0.0
        return net

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def logits_eval(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        p = self.params
        a1 = x @ p["w1"] + p["b1"]
        h1 = gelu(p["g1"] * (a1 - self.run_mean1) / np.sqrt(self.run_var1 + BN_EPS) + p["be1"])
        a2 = h1 @ p["w2"] + p["b2"]
        h2 = gelu(p["g2"] * (a2 - self.run_mean2) / np.sqrt(self.run_var2 + BN_EPS) + p["be2"])
        return (h2 @ p["w3"] + p["b3"]).ravel()

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Eval-mode probabilities with the post-hoc temperature applied."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not np.all(np.isfinite(x)):
            raise ValueError("router input must be finite")
        return sigmoid(self.logits_eval(x) / self.temperature)

    def save(self, path, extra: dict | None = None) -> None:
        arrays = dict(self.params)
        arrays.update(
            run_mean1=self.run_mean1, run_var1=self.run_var1,
            run_mean2=self.run_mean2, run_var2=self.run_var2,
        )
        order = sorted(arrays)
        header = {
            "schema": ROUTER_SCHEMA,
            "temperature": self.temperature,
            "tau_route": self.tau_route,
            "dropout": self.dropout,
            "arrays": {k: list(arrays[k].shape) for k in order},
        }
        if extra:
            header.update(extra)
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
            for k in order:
                fh.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> tuple["RouterNet", dict]:
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            if header.get("schema") != ROUTER_SCHEMA:
                raise ValueError(f"not a router checkpoint: {path}")
            blob = np.frombuffer(fh.read(), dtype="<f8")
        arrays = {}
        pos = 0
        for k in sorted(header["arrays"]):
            shape = tuple(header["arrays"][k])
            n = int(np.prod(shape)) if shape else 1
            arrays[k] = blob[pos : pos + n].reshape(shape).copy()
            pos += n
        net = cls(
            params={k: arrays[k] for k in _PARAM_NAMES},
            run_mean1=arrays["run_mean1"], run_var1=arrays["run_var1"],
            run_mean2=arrays["run_mean2"], run_var2=arrays["run_var2"],
            temperature=header["temperature"],
            tau_route=header["tau_route"],
            dropout=header["dropout"],
        )
        return net, header


def forward(net: RouterNet, f, mode: str = "eval", rng: np.random.Generator | None = None):
    """Router probability for a feature batch; train mode uses batch statistics."""
    x = np.atleast_2d(np.asarray(f, dtype=float))
    if not np.all(np.isfinite(x)):
        raise ValueError("router input must be finite")
    if mode == "eval":
        return net.predict(x)
    if mode != "train":
        raise ValueError("mode must be 'train' or 'eval'")
    masks = make_dropout_masks(net, len(x), rng or np.random.default_rng(0))
    logit, _ = logits_train(net, x, masks)
    return sigmoid(logit / net.temperature)


def make_dropout_masks(net: RouterNet, n: int, rng: np.random.Generator):
    """Inverted-dropout masks, values in {0, 1/(1-rate)}."""
    rate = net.dropout
    h1 = net.params["b1"].size
    h2 = net.params["b2"].size
    if rate <= 0.0:
        return np.ones((n, h1)), np.ones((n, h2))
    keep = 1.0 - rate
    return (
        (rng.random((n, h1)) >= rate).astype(float) / keep,
        (rng.random((n, h2)) >= rate).astype(float) / keep,
    )


def logits_train(net: RouterNet, x: np.ndarray, masks) -> tuple[np.ndarray, dict]:
    """Train-mode forward: batch-stat normalization + dropout.

    Pure in (params, x, masks): finite differences through this path are what
    the gradient check compares against.
    """
    p = net.params
    m1, m2 = masks
    cache: dict = {"x": x, "m1": m1, "m2": m2}

    a1 = x @ p["w1"] + p["b1"]
    mu1 = a1.mean(axis=0)
    var1 = a1.var(axis=0)
    std1 = np.sqrt(var1 + BN_EPS)
    xhat1 = (a1 - mu1) / std1
    z1 = p["g1"] * xhat1 + p["be1"]
    act1, cdf1 = gelu_parts(z1)
    h1 = act1 * m1
    cache.update(mu1=mu1, var1=var1, std1=std1, xhat1=xhat1, z1=z1, cdf1=cdf1, h1=h1)

    a2 = h1 @ p["w2"] + p["b2"]
    mu2 = a2.mean(axis=0)
    var2 = a2.var(axis=0)
    std2 = np.sqrt(var2 + BN_EPS)
    xhat2 = (a2 - mu2) / std2
    z2 = p["g2"] * xhat2 + p["be2"]
    act2, cdf2 = gelu_parts(z2)
    h2 = act2 * m2
    cache.update(mu2=mu2, var2=var2, std2=std2, xhat2=xhat2, z2=z2, cdf2=cdf2, h2=h2)

    logit = (h2 @ p["w3"] + p["b3"]).ravel()
    return logit, cache


def _bn_backward(dz, xhat, std, gamma):
    n = dz.shape[0]
    dxhat = dz * gamma
    return (
        dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)
    ) / std, (dz * xhat).sum(axis=0), dz.sum(axis=0)


def backward(net: RouterNet, cache: dict, dlogit: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss wrt all parameters given d loss / d logit."""
    p = net.params
    dlogit = dlogit.reshape(-1, 1)
    grads = {"w3": cache["h2"].T @ dlogit, "b3": dlogit.sum(axis=0)}

    dh2 = (dlogit @ p["w3"].T) * cache["m2"]
    dz2 = dh2 * gelu_grad(cache["z2"], cache["cdf2"])
    da2, grads["g2"], grads["be2"] = _bn_backward(dz2, cache["xhat2"], cache["std2"], p["g2"])
    grads["w2"] = cache["h1"].T @ da2
    grads["b2"] = da2.sum(axis=0)

    dh1 = (da2 @ p["w2"].T) * cache["m1"]
    dz1 = dh1 * gelu_grad(cache["z1"], cache["cdf1"])
    da1, grads["g1"], grads["be1"] = _bn_backward(dz1, cache["xhat1"], cache["std1"], p["g1"])
    grads["w1"] = cache["x"].T @ da1
    grads["b1"] = da1.sum(axis=0)
    return grads


def update_running_stats(net: RouterNet, cache: dict, momentum: float = 0.1) -> None:
    net.run_mean1 = (1 - momentum) * net.run_mean1 + momentum * cache["mu1"]
    net.run_var1 = (1 - momentum) * net.run_var1 + momentum * cache["var1"]
    net.run_mean2 = (1 - momentum) * net.run_mean2 + momentum * cache["mu2"]
    net.run_var2 = (1 - momentum) * net.run_var2 + momentum * cache["var2"]


# --- losses -------------------------------------------------------------------


def route_surrogate(p, y, costs: CostSpec):
    """Cost surrogate c_slm*(1-p) + c_llm*p + kappa*y*(1-p); accepts arrays."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    out = costs.c_slm * (1.0 - p) + costs.c_llm * p + costs.kappa * y * (1.0 - p)
    return float(out) if out.ndim == 0 else out


def brier(p, y):
    """Squared error between predicted probability and binary label."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    out = (p - y) ** 2
    return float(out) if out.ndim == 0 else out


def brier_mean(p, y) -> float:
    return float(np.mean(brier(p, y)))


def cvar(values, alpha: float) -> float:
    """Empirical CVaR: mean of the worst ceil(alpha*n) values (alpha = tail mass)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("CVaR of an empty list is undefined")
    if not (0.0 < alpha <= 1.0):
        raise ValueError("alpha must lie in (0, 1]")
    m = max(1, math.ceil(alpha * v.size - 1e-9))
    tail = np.sort(v)[::-1][:m]
    return float(tail.mean())


def seed_risk(examples, net: RouterNet, costs: CostSpec) -> dict[int, float]:
    """Per-seed mean routing surrogate under the net's eval-mode predictions."""
    groups: dict[int, list[RoutingExample]] = {}
    for ex in examples:
        groups.setdefault(ex.seed_id, []).append(ex)
    table = {}
    for sid in sorted(groups):
        block = groups[sid]
        x = np.array([ex.features for ex in block], dtype=float)
        y = np.array([ex.label for ex in block], dtype=float)
        p = net.predict(x)
        table[sid] = float(np.mean(route_surrogate(p, y, costs)))
    return table


# --- training -----------------------------------------------------------------


@dataclass(frozen=True)
class TrainSpec:
    """Router training recipe; defaults follow the canonical setup."""

    costs: CostSpec = field(default_factory=CostSpec)
    cvar: CVaRSpec = field(default_factory=CVaRSpec)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    dual_lr: float = 1e-2
    epochs: int = 20
    batch_steps: int = 4096
    dropout: float = 0.2
    bn_momentum: float = 0.1


class _Adam:
    def __init__(self, shapes: dict[str, tuple], b1=0.9, b2=0.999, eps=1e-8):
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1**self.t)
            vhat = self.v[k] / (1 - self.b2**self.t)
            out[k] = mhat / (np.sqrt(vhat) + self.eps)
        return out


def batch_objective(net, x, y, seed_index, n_seeds, costs, cv: CVaRSpec, lam, masks,
                    want_grads: bool = True):
    """Train-mode Lagrangian on one minibatch of whole seeds.

    seed_index maps each row to a local seed slot in [0, n_seeds); returns the
    loss, its components, and (optionally) parameter gradients.
    """
    logit, cache = logits_train(net, x, masks)
    p = sigmoid(logit)
    losses = route_surrogate(p, y, costs)
    counts = np.bincount(seed_index, minlength=n_seeds).astype(float)
    risks = np.bincount(seed_index, weights=losses, minlength=n_seeds) / counts
    mean_risk = float(risks.mean())

    m = max(1, math.ceil(cv.alpha * n_seeds - 1e-9))
    order = np.lexsort((np.arange(n_seeds), -risks))
    tail = order[:m]
    cvar_value = float(risks[tail].mean())
    brier_value = brier_mean(p, y)
    loss = mean_risk + lam * (cvar_value - cv.epsilon) + cv.lambda_b * brier_value

    result = {
        "loss": float(loss),
        "mean_risk": mean_risk,
        "cvar": cvar_value,
        "brier": brier_value,
        "cache": cache,
    }
    if not want_grads:
        return result

    in_tail = np.zeros(n_seeds)
    in_tail[tail] = 1.0
    seed_w = (1.0 / n_seeds + lam * in_tail / m) / counts
    dldp = seed_w[seed_index] * (costs.c_llm - costs.c_slm - costs.kappa * y)
    dldp = dldp + cv.lambda_b * 2.0 * (p - y) / len(y)
    dlogit = dldp * p * (1.0 - p)
    result["grads"] = backward(net, cache, dlogit)
    return result


def train_router(
    examples,
    spec: TrainSpec,
    seed: int = 0,
) -> tuple[RouterNet, list[dict]]:
    """Alternating primal descent / dual ascent on the CVaR Lagrangian.

    Minibatches are composed of whole seeds so the per-seed risk is computable
    inside every batch. Returns the net and a per-epoch training report
    (batch-averaged mean risk, CVaR, Brier, and the multiplier).
    """
    examples = list(examples)
    x_all = np.array([ex.features for ex in examples], dtype=float)
    y_all = np.array([ex.label for ex in examples], dtype=float)
    seed_ids = np.array([ex.seed_id for ex in examples], dtype=int)
    uniq = np.unique(seed_ids)
    if uniq.size < 2:
        raise ValueError("router training needs at least two seeds")
    if len(np.unique(y_all)) < 2:
        raise ValueError("router training needs both labels present")

    rng = seeds.stream("router-train", seed)
    net = RouterNet.init(rng, in_dim=x_all.shape[1])
    net.dropout = spec.dropout

    rows_by_seed = {int(s): np.flatnonzero(seed_ids == s) for s in uniq}
    primal = _Adam({k: v.shape for k, v in net.params.items()})
    dual = _Adam({"u": ()})
    log_lam = math.log(max(spec.cvar.lambda_init, 1e-8))

    batches_per_epoch = max(1, math.ceil(len(examples) / spec.batch_steps))
    total_steps = max(1, spec.epochs * batches_per_epoch)
    step_count = 0
    report: list[dict] = []

    for epoch in range(spec.epochs):
        order = rng.permutation(uniq)
        chunk: list[int] = []
        chunks: list[list[int]] = []
        size = 0
        for s in order:
            chunk.append(int(s))
            size += rows_by_seed[int(s)].size
            if size >= spec.batch_steps:
                chunks.append(chunk)
                chunk, size = [], 0
        if chunk:
            chunks.append(chunk)

        epoch_stats = []
        for chunk in chunks:
            rows = np.concatenate([rows_by_seed[s] for s in chunk])
            local = np.concatenate(
                [np.full(rows_by_seed[s].size, i) for i, s in enumerate(chunk)]
            )
            xb, yb = x_all[rows], y_all[rows]
            masks = make_dropout_masks(net, len(rows), rng)
            lam = math.exp(log_lam)
            out = batch_objective(
                net, xb, yb, local, len(chunk), spec.costs, spec.cvar, lam, masks
            )
            # primal: AdamW with cosine-annealed lr, weight decay decoupled
            frac = min(1.0, step_count / total_steps)
            lr_t = spec.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
            directions = primal.step(out["grads"])
            for k, d in directions.items():
                net.params[k] *= 1.0 - lr_t * spec.weight_decay
                net.params[k] -= lr_t * d
            update_running_stats(net, out["cache"], spec.bn_momentum)
            # dual: Adam ascent on log(lambda) with the constraint violation
            g = out["cvar"] - spec.cvar.epsilon
            log_lam += spec.dual_lr * dual.step({"u": np.asarray(g)})["u"]
            log_lam = float(np.clip(log_lam, -30.0, 30.0))
            step_count += 1
            epoch_stats.append((out["mean_risk"], out["cvar"], out["brier"]))

        # training log: what the optimizer saw this epoch, averaged over batches
        stats = np.mean(np.array(epoch_stats), axis=0)
        report.append(
            {
                "epoch": epoch,
                "mean_risk": float(stats[0]),
                "cvar": float(stats[1]),
                "brier": float(stats[2]),
                "lam": math.exp(log_lam),
            }
        )
    return net, report


# --- calibration and thresholds -------------------------------------------------


def fit_temperature_logits(logits, labels, ece_bins: int = 15) -> float:
    """1-D golden-section search on log T in [-3, 3] minimizing validation NLL.

    Falls back to T = 1 when labels are degenerate or when scaling would
    worsen ECE by more than 0.005 on the same set.
    """
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(np.unique(y)) < 2:
        warnings.warn("degenerate validation labels; temperature left at 1")
        return 1.0

    def nll(log_t: float) -> float:
        zz = z / math.exp(log_t)
        return float(np.mean(np.logaddexp(0.0, zz) - y * zz))

    lo, hi = -3.0, 3.0
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - ratio * (hi - lo)
    d = lo + ratio * (hi - lo)
    fc, fd = nll(c), nll(d)
    for _ in range(200):
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - ratio * (hi - lo)
            fc = nll(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + ratio * (hi - lo)
            fd = nll(d)
        if hi - lo < 1e-10:
            break
    t_cand = math.exp(0.5 * (lo + hi))
    before = ece(sigmoid(z), y, bins=ece_bins)
    after = ece(sigmoid(z / t_cand), y, bins=ece_bins)
    if after > before + 0.005:
        return 1.0
    return t_cand


def fit_temperature(net: RouterNet, x_val, y_val, ece_bins: int = 15) -> float:
    """Fit and install the post-hoc temperature from validation data."""
    t = fit_temperature_logits(net.logits_eval(np.asarray(x_val, dtype=float)),
                               y_val, ece_bins=ece_bins)
    net.temperature = t
    return t


def bayes_threshold(costs: CostSpec) -> float:
    """Clamped cost-optimal escalation cutoff (c_llm - c_slm) / kappa."""
    return float(min(1.0, max(0.0, (costs.c_llm - costs.c_slm) / costs.kappa)))


def threshold_grid() -> np.ndarray:
    return np.arange(1, 100) / 100.0


def hard_surrogate_mean(p, y, costs: CostSpec, tau: float) -> float:
    d = (np.asarray(p, dtype=float) >= tau).astype(float)
    return float(np.mean(route_surrogate(d, y, costs)))


def sweep_threshold(p, y, costs: CostSpec) -> float:
    """Grid-search tau in {0.01..0.99} minimizing the hard routing surrogate.

    Ties break toward the lowest threshold.
    """
    grid = threshold_grid()
    cost_per_tau = np.array([hard_surrogate_mean(p, y, costs, t) for t in grid])
    return float(grid[int(np.argmin(cost_per_tau))])


def select_threshold(net: RouterNet, x_val, y_val, costs: CostSpec,
                     mode: str = "bayes") -> float:
    """Routing threshold: the Bayes formula or a validation sweep."""
    if mode == "bayes":
        return bayes_threshold(costs)
    if mode == "sweep":
        p = net.predict(np.asarray(x_val, dtype=float))
        return sweep_threshold(p, np.asarray(y_val, dtype=float), costs)
    raise ValueError("mode must be 'bayes' or 'sweep'")
