"""Pipeline orchestration: config handling, stage artifacts, stage functions.

Stages mirror the training pipeline's order (teacher collection -> BC ->
pairs -> recovery distillation -> routing data -> router -> rollouts ->
evaluation) and each artifact records its stage tag and the config hash, so
out-of-order invocation fails loudly and hash drift across stages warns.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .distill import DistillConfig, PreferencePair, build_preferences, train_recovery
from .domain import (
    ConfigError,
    CostSpec,
    CVaRSpec,
    EnvConfig,
    StageOrderError,
    derive_splits,
    episode_from_dict,
    episode_to_dict,
    read_rljson,
    routing_example_from_dict,
    routing_example_to_dict,
    write_rljson,
    _context_from_dict,
    _context_to_dict,
)
from .env import HazardChainEnv
from .evaluation import compute_metrics, sweep
from .features import FeatureMask
from .policy import PolicyFeaturizer, SoftmaxPolicy, TeacherPolicy, collect_teacher_trajectories, train_bc
from .router import RouterNet, TrainSpec, fit_temperature, select_threshold, train_router
from .runtime import (
    RoutingPolicy,
    calibrate_entropy_threshold,
    calibrate_heuristic_threshold,
    collect_routing_dataset,
    hindsight_table,
    routing_grid,
    run_episode,
)
from .verifier import VerifierSpec

ENV_PREFIX = "STEPROUTER_"

DEFAULT_CONFIG: dict = {
    "env": {
        "state_count": 12,
        "action_count": 6,
        "horizon": 20,
        "goal_vocab_size": 64,
        "reward_success": 1.0,
        "discount": 1.0,
        "perturbation_families": ["ToolFlaky", "PartialObs", "Injection", "Distractor"],
        "family_intensities": {
            "ToolFlaky": 0.15,
            "PartialObs": 0.30,
            "Injection": 0.15,
            "Distractor": 0.15,
        },
        "rng_seed": 42,
        "storm_fraction": 0.4,
        "storm_boost": 2.2,
        "task_count": 24,
    },
    "policy": {
        "teacher_error_rate": 0.02,
        "temperature": 1.0,
        "bc_epochs": 80,
        "bc_lr": 4.0,
        "pert_seeds_per_task": 5,
    },
    "verifier": {"eta_v": 0.2, "gamma_threshold": 0.55, "regime": None},
    "distill": {"beta": 2.0, "lambda_cons": 0.20, "epochs": 60, "lr": 4.0},
    "features": {"mask": "Full"},
    "router": {
        "alpha": 0.20,
        "epsilon": 0.10,
        "lambda_b": 1.0,
        "lambda_init": 1.0,
        "lr": 1e-3,
        "weight_decay": 1e-4,
        "dual_lr": 1e-2,
        "epochs": 150,
        "batch_steps": 4096,
        "dropout": 0.2,
        "c_slm": 1.0,
        "c_llm": 50.0,
        "kappa": 98.0,
        "threshold_mode": "sweep",
        "train_seed": 0,
    },
    "runtime": {
        "k_candidates": 5,
        "budget_limit": None,
        "routing_seeds_per_task": 10,
        "harness_salt": 0,
    },
    "eval": {
        "eval_seeds_per_task": 25,
        "task_ids": None,  # null = the test split
        "bootstrap_resamples": 1000,
        "level": 0.95,
        "ece_bins": 15,
        "bootstrap_seed": 0,
    },
    "split": {"fractions": [0.70, 0.15, 0.15], "seed": 42},
}

VERIFIER_REGIMES = {"low": 0.05, "high": 0.25}

VARIANT_ORDER = ("slm", "llm", "entropy", "heuristic", "r2v", "oracle")

CVAR_ABLATION_GRID = [
    (0.05, 0.02), (0.05, 0.10), (0.10, 0.02), (0.10, 0.10),
    (0.20, 0.10), (0.20, 0.15), (0.50, 0.10), (0.50, 0.15),
]
LAMBDA_CONS_GRID = [0.0, 0.05, 0.20, 0.50, 1.0]

# the stressed operating point used by the Pareto acceptance battery: storm
# seeds dominate failures, the verifier is weak per step, and cost units are
# scaled so the CVaR constraint is commensurate with epsilon
HIGH_RISK_OVERRIDES = [
    "env.rng_seed=1",
    "env.task_count=24",
    'env.family_intensities={"ToolFlaky":0.2,"PartialObs":0.35,"Injection":0.2,"Distractor":0.2}',
    "env.storm_boost=2.5",
    "verifier.eta_v=0.3",
    "runtime.routing_seeds_per_task=50",
    "eval.eval_seeds_per_task=40",
    "router.epochs=120",
    "router.c_slm=0.002",
    "router.c_llm=0.1",
    "router.kappa=0.196",
]


# --- config ------------------------------------------------------------------


def _deep_merge(base: dict, overlay: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_dotted(cfg: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(f"unknown config path {dotted!r}")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config path {dotted!r}")
    node[keys[-1]] = _parse_value(raw)


def load_config(path: str | None = None, overrides=(), environ=None) -> dict:
    """Defaults, then config file, then STEPROUTER_* env vars, then --set flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _deep_merge(cfg, file_cfg)
    environ = os.environ if environ is None else environ
    for key, value in sorted(environ.items()):
        if key.startswith(ENV_PREFIX):
            dotted = key[len(ENV_PREFIX):].lower().replace("__", ".")
            _apply_dotted(cfg, dotted, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        _apply_dotted(cfg, dotted, raw)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    make_env(cfg)
    make_cost_spec(cfg)
    make_cvar_spec(cfg)
    mask_name = cfg["features"]["mask"]
    try:
        FeatureMask(mask_name)
    except ValueError as exc:
        raise ConfigError(f"unknown feature mask {mask_name!r}") from exc
    regime = cfg["verifier"]["regime"]
    if regime is not None and regime not in VERIFIER_REGIMES:
        raise ConfigError(f"unknown verifier regime {regime!r}")
    mode = cfg["router"]["threshold_mode"]
    if mode not in ("bayes", "sweep"):
        raise ConfigError(f"unknown threshold mode {mode!r}")
    fr = cfg["split"]["fractions"]
    if len(fr) != 3 or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError("split fractions must be a triple summing to 1")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def make_env(cfg: dict) -> HazardChainEnv:
    e = cfg["env"]
    try:
        env_cfg = EnvConfig(
            state_count=e["state_count"],
            action_count=e["action_count"],
            horizon=e["horizon"],
            goal_vocab_size=e["goal_vocab_size"],
            reward_success=e["reward_success"],
            discount=e["discount"],
            perturbation_families=tuple(e["perturbation_families"]),
            family_intensities=dict(e["family_intensities"]),
            rng_seed=e["rng_seed"],
            storm_fraction=e["storm_fraction"],
            storm_boost=e["storm_boost"],
        )
        return HazardChainEnv(env_cfg, task_count=e["task_count"])
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid env config: {exc}") from exc


def make_teacher(cfg: dict) -> TeacherPolicy:
    return TeacherPolicy(error_rate=cfg["policy"]["teacher_error_rate"])


def make_verifier(cfg: dict, env: HazardChainEnv) -> VerifierSpec:
    v = cfg["verifier"]
    eta = VERIFIER_REGIMES[v["regime"]] if v["regime"] else v["eta_v"]
    return VerifierSpec.for_env(env, eta_v=eta, gamma_threshold=v["gamma_threshold"])


def make_cost_spec(cfg: dict) -> CostSpec:
    r = cfg["router"]
    try:
        return CostSpec(c_slm=r["c_slm"], c_llm=r["c_llm"], kappa=r["kappa"])
    except ValueError as exc:
        raise ConfigError(f"invalid cost spec: {exc}") from exc


def make_cvar_spec(cfg: dict) -> CVaRSpec:
    r = cfg["router"]
    try:
        return CVaRSpec(alpha=r["alpha"], epsilon=r["epsilon"],
                        lambda_b=r["lambda_b"], lambda_init=r["lambda_init"])
    except ValueError as exc:
        raise ConfigError(f"invalid CVaR spec: {exc}") from exc


def make_train_spec(cfg: dict, alpha: float | None = None,
                    epsilon: float | None = None) -> TrainSpec:
    r = cfg["router"]
    cv = make_cvar_spec(cfg)
    if alpha is not None or epsilon is not None:
        cv = CVaRSpec(
            alpha=cv.alpha if alpha is None else alpha,
            epsilon=cv.epsilon if epsilon is None else epsilon,
            lambda_b=cv.lambda_b,
            lambda_init=cv.lambda_init,
        )
    return TrainSpec(
        costs=make_cost_spec(cfg),
        cvar=cv,
        lr=r["lr"],
        weight_decay=r["weight_decay"],
        dual_lr=r["dual_lr"],
        epochs=r["epochs"],
        batch_steps=r["batch_steps"],
        dropout=r["dropout"],
    )


# --- artifacts -----------------------------------------------------------------


ARTIFACTS = {
    "gen-tasks": "tasks.json",
    "collect": "episodes.rljson",
    "train-bc": "policy_bc.bin",
    "build-pairs": "pairs.rljson",
    "distill": "policy_distilled.bin",
    "collect-routing": "routing.rljson",
    "train-router": "router.bin",
}


def artifact_path(workdir: Path, stage: str) -> Path:
    return Path(workdir) / ARTIFACTS[stage]


def require_stage(workdir: Path, stage: str, cfg_hash: str) -> Path:
    path = artifact_path(workdir, stage)
    if not path.exists():
        raise StageOrderError(
            f"missing stage {stage!r} artifact ({path.name}); run `{stage}` first"
        )
    header = read_header(path)
    if header.get("config_hash") not in (None, cfg_hash):
        print(
            f"warning: {path.name} was built under config hash "
            f"{header.get('config_hash')} but the current hash is {cfg_hash}",
            file=sys.stderr,
        )
    return path


def read_header(path: Path) -> dict:
    path = Path(path)
    if path.suffix == ".json":
        with open(path) as fh:
            return json.load(fh)
    with open(path, "rb") as fh:
        return json.loads(fh.readline().decode())


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _csv_cell(row.get(k)) for k in columns})


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return value


# --- stages ----------------------------------------------------------------------


def stage_gen_tasks(cfg: dict, workdir: Path) -> Path:
    env = make_env(cfg)
    split = derive_splits(
        range(env.task_count),
        fractions=tuple(cfg["split"]["fractions"]),
        seed=cfg["split"]["seed"],
    )
    tasks = []
    for task_id in range(env.task_count):
        spec = env.task_spec(task_id)
        tasks.append(
            {
                "id": task_id,
                "start": spec.start,
                "subgoals": list(spec.subgoals),
                "terminal": spec.terminal,
            }
        )
    split_payload = {
        "train": list(split.train),
        "valid": list(split.valid),
        "test": list(split.test),
    }
    payload = {
        "schema": "tasks@1",
        "stage": "gen-tasks",
        "config_hash": config_hash(cfg),
        "tasks": tasks,
        "split": split_payload,
    }
    out = artifact_path(workdir, "gen-tasks")
    _write_json(out, payload)
    _write_json(
        Path(workdir) / "split.json",
        {
            "schema": "split@1",
            "config_hash": config_hash(cfg),
            "fractions": list(split.fractions),
            "split_seed": split.split_seed,
            **split_payload,
        },
    )
    return out


def load_split(cfg: dict, workdir: Path) -> dict:
    path = require_stage(workdir, "gen-tasks", config_hash(cfg))
    with open(path) as fh:
        return json.load(fh)["split"]


def _collect_job(args):
    cfg, task_ids = args
    env = make_env(cfg)
    teacher = make_teacher(cfg)
    pool = collect_teacher_trajectories(
        env, teacher, task_ids, cfg["policy"]["pert_seeds_per_task"]
    )
    return [episode_to_dict(ep) for ep in pool]


def _parallel_map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def stage_collect(cfg: dict, workdir: Path, workers: int = 1) -> Path:
    split = load_split(cfg, workdir)
    train_ids = split["train"]
    chunks = [[tid] for tid in train_ids]
    results = _parallel_map(_collect_job, [(cfg, chunk) for chunk in chunks], workers)
    records = [rec for block in results for rec in block]
    out = artifact_path(workdir, "collect")
    write_rljson(
        out,
        records,
        header={"schema": "episodes@1", "stage": "collect",
                "config_hash": config_hash(cfg), "count": len(records)},
    )
    return out


def load_episodes(path: Path):
    episodes = []
    for _, rec in read_rljson(path):
        if "stage" in rec and "schema" in rec and "steps" not in rec:
            continue  # header record
        episodes.append(episode_from_dict(rec))
    return episodes


def stage_train_bc(cfg: dict, workdir: Path) -> Path:
    h = config_hash(cfg)
    pool = load_episodes(require_stage(workdir, "collect", h))
    env = make_env(cfg)
    policy, trace = train_bc(
        pool,
        PolicyFeaturizer.for_env(env),
        epochs=cfg["policy"]["bc_epochs"],
        lr=cfg["policy"]["bc_lr"],
    )
    out = artifact_path(workdir, "train-bc")
    policy.save(out, extra={"config_hash": h, "final_loss": trace[-1]})
    return out


def stage_build_pairs(cfg: dict, workdir: Path) -> Path:
    h = config_hash(cfg)
    pool = load_episodes(require_stage(workdir, "collect", h))
    bc_policy = SoftmaxPolicy.load(require_stage(workdir, "train-bc", h))
    if bc_policy.stage != "bc":
        raise StageOrderError("train-bc artifact does not hold a BC-stage policy")
    env = make_env(cfg)
    pairs, views, counters = build_preferences(
        bc_policy, pool, make_verifier(cfg, env), make_teacher(cfg), env,
        k=cfg["runtime"]["k_candidates"],
    )
    records = [
        {
            "kind": "pair",
            "context": _context_to_dict(p.context),
            "a_plus": p.a_plus,
            "a_minus": p.a_minus,
            "source": p.source,
        }
        for p in pairs
    ]
    records += [
        {
            "kind": "cons",
            "context_a": _context_to_dict(a),
            "context_b": _context_to_dict(b),
        }
        for a, b in views
    ]
    out = artifact_path(workdir, "build-pairs")
    write_rljson(
        out,
        records,
        header={"schema": "pairs@1", "stage": "build-pairs", "config_hash": h,
                "counters": counters},
    )
    return out


def load_pairs(path: Path):
    pairs, views = [], []
    for _, rec in read_rljson(path):
        kind = rec.get("kind")
        if kind == "pair":
            pairs.append(
                PreferencePair(
                    context=_context_from_dict(rec["context"]),
                    a_plus=int(rec["a_plus"]),
                    a_minus=int(rec["a_minus"]),
                    source=rec["source"],
                )
            )
        elif kind == "cons":
            views.append(
                (_context_from_dict(rec["context_a"]), _context_from_dict(rec["context_b"]))
            )
    return pairs, views


def stage_distill(cfg: dict, workdir: Path) -> Path:
    h = config_hash(cfg)
    bc_policy = SoftmaxPolicy.load(require_stage(workdir, "train-bc", h))
    pairs_path = require_stage(workdir, "build-pairs", h)
    pairs, views = load_pairs(pairs_path)
    d = cfg["distill"]
    distilled, report = train_recovery(
        bc_policy, pairs, views,
        DistillConfig(beta=d["beta"], lambda_cons=d["lambda_cons"],
                      epochs=d["epochs"], lr=d["lr"]),
    )
    out = artifact_path(workdir, "distill")
    distilled.save(out, extra={"config_hash": h, "reference_hash": report["reference_hash"]})
    _write_json(
        Path(workdir) / "distill_report.json",
        {
            "schema": "distill-report@1",
            "config_hash": h,
            "pair_count": report["pair_count"],
            "pair_counts_by_source": read_header(pairs_path).get("counters", {}),
            "view_count": report["view_count"],
            "final_loss": report["final_loss"],
            "reference_hash": report["reference_hash"],
        },
    )
    return out


def _routing_job(args):
    cfg, task_ids, split_name, offset = args
    workdir = Path(cfg["_workdir"])
    cfg = {k: v for k, v in cfg.items() if k != "_workdir"}
    env = make_env(cfg)
    slm = SoftmaxPolicy.load(artifact_path(workdir, "distill"))
    salt = cfg["runtime"]["harness_salt"]
    examples, episodes = collect_routing_dataset(
        env,
        slm,
        make_teacher(cfg),
        make_verifier(cfg, env),
        task_ids,
        cfg["runtime"]["routing_seeds_per_task"],
        k=cfg["runtime"]["k_candidates"],
        tag=f"routing-{split_name}-{salt}",
        split=split_name,
        seed_id_offset=offset,
    )
    return [routing_example_to_dict(ex) for ex in examples]


def stage_collect_routing(cfg: dict, workdir: Path, workers: int = 1) -> Path:
    h = config_hash(cfg)
    require_stage(workdir, "distill", h)
    split = load_split(cfg, workdir)
    per_task = cfg["runtime"]["routing_seeds_per_task"]
    jobs = []
    cfg_with_wd = dict(cfg)
    cfg_with_wd["_workdir"] = str(workdir)
    offset = 0
    for split_name in ("train", "valid"):
        for tid in split[split_name]:
            jobs.append((cfg_with_wd, [tid], split_name, offset))
            offset += per_task
    results = _parallel_map(_routing_job, jobs, workers)
    records = [rec for block in results for rec in block]
    out = artifact_path(workdir, "collect-routing")
    write_rljson(
        out,
        records,
        header={"schema": "routing@1", "stage": "collect-routing",
                "config_hash": h, "count": len(records)},
    )
    return out


def load_routing_examples(path: Path):
    examples = []
    for _, rec in read_rljson(path):
        if "stage" in rec and "features" not in rec:
            continue
        examples.append(routing_example_from_dict(rec))
    return examples


def stage_train_router(cfg: dict, workdir: Path,
                       alpha: float | None = None, epsilon: float | None = None,
                       train_seed: int | None = None,
                       out_name: str | None = None) -> Path:
    h = config_hash(cfg)
    examples = load_routing_examples(require_stage(workdir, "collect-routing", h))
    train_examples = [ex for ex in examples if ex.split == "train"]
    valid_examples = [ex for ex in examples if ex.split == "valid"] or train_examples
    spec = make_train_spec(cfg, alpha=alpha, epsilon=epsilon)
    seed = cfg["router"]["train_seed"] if train_seed is None else train_seed
    seed = seed + 1000 * cfg["runtime"]["harness_salt"]
    net, report = train_router(train_examples, spec, seed=seed)

    x_val = np.array([ex.features for ex in valid_examples], dtype=float)
    y_val = np.array([ex.label for ex in valid_examples], dtype=float)
    temperature = fit_temperature(net, x_val, y_val, ece_bins=cfg["eval"]["ece_bins"])
    costs = spec.costs
    net.tau_route = select_threshold(net, x_val, y_val, costs,
                                     mode=cfg["router"]["threshold_mode"])
    tau_h = calibrate_entropy_threshold(valid_examples, costs)
    theta_v = calibrate_heuristic_threshold(valid_examples, costs)

    out = Path(workdir) / (out_name or ARTIFACTS["train-router"])
    net.save(
        out,
        extra={
            "stage": "train-router",
            "config_hash": h,
            "tau_h": tau_h,
            "theta_v": theta_v,
            "fitted_temperature": temperature,
        },
    )
    if out_name is None:
        _write_csv(
            Path(workdir) / "router_report.csv",
            report,
            ["epoch", "mean_risk", "cvar", "brier", "lam"],
        )
    return out


def eval_grid(cfg: dict, workdir: Path):
    task_ids = cfg["eval"]["task_ids"]
    if task_ids is None:
        task_ids = load_split(cfg, workdir)["test"]
    env = make_env(cfg)
    salt = cfg["runtime"]["harness_salt"]
    return routing_grid(env, task_ids, cfg["eval"]["eval_seeds_per_task"],
                        f"eval-{salt}")


def _build_routing_policy(cfg: dict, workdir: Path, variant: str,
                          router_path: Path | None = None,
                          mask: FeatureMask | None = None) -> RoutingPolicy:
    h = config_hash(cfg)
    budget = cfg["runtime"]["budget_limit"]
    if variant == "slm":
        return RoutingPolicy.slm_only()
    if variant == "llm":
        return RoutingPolicy.llm_only(budget)
    router_file = router_path or require_stage(workdir, "train-router", h)
    header = read_header(router_file)
    if variant == "entropy":
        return RoutingPolicy.entropy_router(header["tau_h"], budget)
    if variant == "heuristic":
        return RoutingPolicy.heuristic_router(header["theta_v"], budget)
    if variant == "r2v":
        net, _ = RouterNet.load(router_file)
        mask = mask or FeatureMask(cfg["features"]["mask"])
        return RoutingPolicy.r2v(net, net.tau_route, mask=mask, budget_limit=budget)
    if variant == "oracle":
        slm_path = Path(workdir) / "eval_slm.rljson"
        if not slm_path.exists():
            raise StageOrderError(
                "oracle rollout needs the SLM-only rollout artifact (eval_slm.rljson)"
            )
        table = hindsight_table(load_episodes(slm_path))
        return RoutingPolicy.oracle_router(table, budget)
    raise ConfigError(f"unknown variant {variant!r}")


def _rollout_job(args):
    cfg, variant, grid_chunk, router_name, mask_name = args
    workdir = Path(cfg["_workdir"])
    cfg = {k: v for k, v in cfg.items() if k != "_workdir"}
    env = make_env(cfg)
    slm = SoftmaxPolicy.load(artifact_path(workdir, "distill"))
    teacher = make_teacher(cfg)
    vspec = make_verifier(cfg, env)
    router_path = workdir / router_name if router_name else None
    mask = FeatureMask(mask_name) if mask_name else None
    routing = _build_routing_policy(cfg, workdir, variant, router_path, mask)
    salt = cfg["runtime"]["harness_salt"]
    out = []
    for task_id, z in grid_chunk:
        ep = run_episode(env, task_id, z, slm, teacher, vspec, routing,
                         k=cfg["runtime"]["k_candidates"], salt=f"eval-{salt}")
        out.append(episode_to_dict(ep))
    return out


def stage_rollout(cfg: dict, workdir: Path, variant: str, workers: int = 1,
                  router_name: str | None = None, mask_name: str | None = None,
                  out_name: str | None = None) -> Path:
    h = config_hash(cfg)
    require_stage(workdir, "distill", h)
    if variant in ("entropy", "heuristic", "r2v"):
        require_stage(workdir, "train-router", h)
    grid = eval_grid(cfg, workdir)
    cfg_with_wd = dict(cfg)
    cfg_with_wd["_workdir"] = str(workdir)
    n_chunks = max(1, min(workers, len(grid))) if workers > 1 else 1
    chunks = [grid[i::n_chunks] for i in range(n_chunks)]
    results = _parallel_map(
        _rollout_job,
        [(cfg_with_wd, variant, chunk, router_name, mask_name) for chunk in chunks],
        workers,
    )
    by_key = {}
    for block in results:
        for rec in block:
            by_key[(rec["task_id"], rec["z"])] = rec
    records = [by_key[key] for key in grid]
    out = Path(workdir) / (out_name or f"eval_{variant}.rljson")
    write_rljson(
        out,
        records,
        header={"schema": "episodes@1", "stage": "rollout", "variant": variant,
                "config_hash": h, "count": len(records)},
    )
    return out


def _metrics_for(cfg: dict, episodes):
    e = cfg["eval"]
    return compute_metrics(
        episodes,
        resamples=e["bootstrap_resamples"],
        level=e["level"],
        bins=e["ece_bins"],
        bootstrap_seed=e["bootstrap_seed"],
    )


def stage_evaluate(cfg: dict, workdir: Path, workers: int = 1) -> Path:
    h = config_hash(cfg)
    workdir = Path(workdir)
    rows = []
    summary_variants = {}
    for variant in VARIANT_ORDER:
        path = workdir / f"eval_{variant}.rljson"
        if not path.exists():
            stage_rollout(cfg, workdir, variant, workers=workers)
        metrics = _metrics_for(cfg, load_episodes(path))
        row = {"variant": variant}
        row.update(metrics.to_dict())
        rows.append(row)
        summary_variants[variant] = metrics.to_dict()

    columns = ["variant", "success_rate", "llm_rate", "ci_low", "ci_high",
               "ece", "brier", "auroc", "n_episodes", "n_steps"]
    _write_csv(workdir / "metrics.csv", rows, columns)
    _write_csv(
        workdir / "pareto.csv",
        [
            {
                "variant": r["variant"],
                "llm_rate": r["llm_rate"],
                "success_rate": r["success_rate"],
                "ci_low": r["ci_low"],
                "ci_high": r["ci_high"],
            }
            for r in rows
        ],
        ["variant", "llm_rate", "success_rate", "ci_low", "ci_high"],
    )
    router_header = read_header(workdir / ARTIFACTS["train-router"])
    summary = {
        "schema": "summary@1",
        "config_hash": h,
        "variants": summary_variants,
        "thresholds": {
            "tau_route": router_header.get("tau_route"),
            "tau_h": router_header.get("tau_h"),
            "theta_v": router_header.get("theta_v"),
            "temperature": router_header.get("temperature"),
        },
    }
    out = workdir / "summary.json"
    _write_json(out, summary)
    return out


# --- ablations -----------------------------------------------------------------


def stage_ablate(cfg: dict, workdir: Path, kind: str, workers: int = 1) -> Path:
    workdir = Path(workdir)
    if kind == "features":
        rows = _ablate_masks(cfg, workdir, workers)
        columns_lead = ["mask"]
    elif kind == "cvar":
        rows = _ablate_cvar(cfg, workdir, workers)
        columns_lead = ["alpha", "epsilon"]
    elif kind == "lambda":
        rows = _ablate_lambda(cfg, workdir, workers)
        columns_lead = ["lambda_cons"]
    else:
        raise ConfigError(f"unknown ablation kind {kind!r}")
    columns = columns_lead + ["success_rate", "llm_rate", "ci_low", "ci_high",
                              "ece", "brier", "auroc", "n_episodes", "n_steps"]
    out = workdir / f"ablate_{kind}.csv"
    _write_csv(out, rows, columns)
    return out


def _ablate_masks(cfg: dict, workdir: Path, workers: int):
    def run(point):
        name = point["mask"]
        path = stage_rollout(cfg, workdir, "r2v", workers=workers,
                             mask_name=name, out_name=f"eval_r2v_mask_{name}.rljson")
        return _metrics_for(cfg, load_episodes(path))

    return sweep([{"mask": m.value} for m in FeatureMask], run)


def _ablate_cvar(cfg: dict, workdir: Path, workers: int):
    def run(point):
        tag = f"a{point['alpha']}_e{point['epsilon']}".replace(".", "")
        router_name = f"router_{tag}.bin"
        stage_train_router(cfg, workdir, alpha=point["alpha"], epsilon=point["epsilon"],
                           out_name=router_name)
        path = stage_rollout(cfg, workdir, "r2v", workers=workers,
                             router_name=router_name,
                             out_name=f"eval_r2v_{tag}.rljson")
        return _metrics_for(cfg, load_episodes(path))

    return sweep([{"alpha": a, "epsilon": e} for a, e in CVAR_ABLATION_GRID], run)


def _ablate_lambda(cfg: dict, workdir: Path, workers: int):
    def run(point):
        lam = point["lambda_cons"]
        sub_cfg = copy.deepcopy(cfg)
        sub_cfg["distill"]["lambda_cons"] = lam
        sub_wd = workdir / f"lambda_{str(lam).replace('.', '')}"
        sub_wd.mkdir(parents=True, exist_ok=True)
        run_pipeline(sub_cfg, sub_wd, workers=workers, through="evaluate",
                     variants=("r2v",))
        return _metrics_for(sub_cfg, load_episodes(sub_wd / "eval_r2v.rljson"))

    return sweep([{"lambda_cons": lam} for lam in LAMBDA_CONS_GRID], run)


def run_pipeline(cfg: dict, workdir: Path, workers: int = 1,
                 through: str = "evaluate", variants=VARIANT_ORDER) -> None:
    """Run stages in order up to `through` (used by tests and ablations)."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    stage_gen_tasks(cfg, workdir)
    stage_collect(cfg, workdir, workers)
    stage_train_bc(cfg, workdir)
    stage_build_pairs(cfg, workdir)
    stage_distill(cfg, workdir)
    if through == "distill":
        return
    stage_collect_routing(cfg, workdir, workers)
    stage_train_router(cfg, workdir)
    if through == "train-router":
        return
    if through == "evaluate" and tuple(variants) == tuple(VARIANT_ORDER):
        stage_evaluate(cfg, workdir, workers)
    else:
        for variant in variants:
            if variant == "oracle" and not (workdir / "eval_slm.rljson").exists():
                stage_rollout(cfg, workdir, "slm", workers=workers)
            stage_rollout(cfg, workdir, variant, workers=workers)
