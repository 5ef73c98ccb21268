"""Experiment configuration, verification suites, sweeps and benchmarks.

Everything here returns plain rows or dicts; ``pcgsd.cli`` handles files,
formats and figures.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import oracle
from .asg_index import WEIGHT_RULES, GroupIndex, build_groups, load_embeddings, load_index, normalize
from .coarse import TokenDistribution, exact_group_identity_check, residual_sample_thinning
from .decoder import METHODS, DecodeConfig, generate, pcg_verify
from .errors import ConfigError
from .models import DEFAULT_TEMPERATURE, PRESETS, Instance, load_model, preset
from .rng import DecodeStreams, make_stream

# TV bound for 2e5 fixed-seed trials over <= 16 groups; scaled as 1/sqrt(trials)
REFERENCE_TRIALS = 200_000
REFERENCE_TV = 0.005


@dataclass
class ExperimentConfig:
    method: str = "pcg"
    methods: tuple = METHODS
    theta: float = 0.5
    thetas: tuple = (1.0, 0.95, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3)
    lookahead: int = 3
    lookaheads: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    temperature: float = DEFAULT_TEMPERATURE
    bias: float = 0.3
    cost_ratio: float = 0.05
    length: int = 2000
    trials: int = REFERENCE_TRIALS
    instances: int = 20
    seeds: tuple = (0,)
    preset: str = "clustered"
    preset_params: dict = field(default_factory=dict)
    embeddings: Optional[str] = None
    prenormalized: bool = False
    index: Optional[str] = None
    draft_model: Optional[str] = None
    target_model: Optional[str] = None
    weight_rule: str = "equal-split"
    suites: Optional[tuple] = None
    workers: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for th in (self.theta, *self.thetas):
            if not -1.0 < th <= 1.0:
                raise ConfigError(f"theta {th} outside (-1, 1]")
        for la in (self.lookahead, *self.lookaheads):
            if int(la) != la or la < 1:
                raise ConfigError(f"lookahead {la} must be an integer >= 1")
        if not 0.0 <= self.bias <= 1.0:
            raise ConfigError("bias must lie in [0, 1]")
        if not self.cost_ratio > 0:
            raise ConfigError("cost ratio must be positive")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.length < 0 or self.trials < 1 or self.instances < 1:
            raise ConfigError("length must be >= 0, trials and instances >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}")
        if self.weight_rule not in WEIGHT_RULES:
            raise ConfigError(f"unknown weight rule {self.weight_rule!r}")
        if self.suites is not None:
            for s in self.suites:
                if s not in SUITES:
                    raise ConfigError(f"unknown suite {s!r}; expected one of {tuple(SUITES)}")
        if (self.draft_model is None) != (self.target_model is None):
            raise ConfigError("draft_model and target_model must be given together")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def decode_config(self, lookahead: Optional[int] = None) -> DecodeConfig:
        return DecodeConfig(lookahead=int(lookahead or self.lookahead), bias=self.bias,
                            cost_ratio=self.cost_ratio)


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {path}")
    return p


def resolve_instance(config: ExperimentConfig) -> Instance:
    """Models from files when configured, else the named preset; then overrides."""
    if config.draft_model is not None:
        inst = Instance(load_model(_existing(config.draft_model, "draft model"), role="draft"),
                        load_model(_existing(config.target_model, "target model"), role="target"))
    else:
        params = dict(config.preset_params)
        if config.preset in ("clustered", "identical", "graded"):
            params.setdefault("temperature", config.temperature)
        try:
            inst = preset(config.preset, **params)
        except TypeError as exc:
            raise ConfigError(f"bad preset parameters: {exc}") from exc
    if config.embeddings is not None:
        inst.embeddings = load_embeddings(_existing(config.embeddings, "embeddings"), config.prenormalized)
        inst.index = None
    if config.index is not None:
        inst.index = load_index(_existing(config.index, "index"))
    return inst


def index_for(inst: Instance, theta: float, weight_rule: str = "equal-split") -> GroupIndex:
    if inst.embeddings is not None:
        idx = build_groups(inst.embeddings, theta)
    elif inst.index is not None:
        idx = inst.index
    else:
        raise ConfigError("this instance has neither embeddings nor a group index")
    if idx.weight_rule != weight_rule:
        idx = idx.with_weight_rule(weight_rule)
    return idx


# ---------------------------------------------------------------------------
# random verification instances


@dataclass
class RandomInstance:
    p: TokenDistribution
    q: TokenDistribution
    index: GroupIndex
    seed: int


def random_instance(seed: int, n_range=(4, 12), d: int = 3, theta_range=(0.2, 0.8),
                    weight_rule: str = "equal-split") -> RandomInstance:
    """Small overlapping index from random embeddings plus Dirichlet p and q."""
    rng = make_stream(seed, "instance").generator
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    emb = normalize(rng.standard_normal((n, d)))
    idx = build_groups(emb, float(rng.uniform(*theta_range)))
    if weight_rule != "equal-split":
        idx = idx.with_weight_rule(weight_rule)
    p = TokenDistribution(rng.dirichlet(np.ones(n)), role="draft")
    q = TokenDistribution(rng.dirichlet(np.ones(n)), role="target")
    return RandomInstance(p, q, idx, seed)


def tv_threshold(trials: int) -> float:
    return REFERENCE_TV * math.sqrt(REFERENCE_TRIALS / trials) if trials < REFERENCE_TRIALS else REFERENCE_TV


# ---------------------------------------------------------------------------
# suite building blocks


def single_step_counts(p, q, index: GroupIndex, trials: int, seed: int):
    """Run ``trials`` independent single PCG steps.

    Returns the counts of proposed group labels, of emitted groups, and the
    number of accepted steps.
    """
    streams = DecodeStreams.for_sequence(seed)
    proposed = [0] * index.M
    emitted = [0] * index.M
    accepted = 0
    draw = p.sample
    for _ in range(trials):
        x = draw(streams.draft)
        o = pcg_verify(0, x, p, q, index, streams)
        proposed[o.label] += 1
        emitted[o.group] += 1
        accepted += o.accepted
    return np.array(proposed), np.array(emitted), accepted


def residual_counts(p, q, index: GroupIndex, calls: int, seed: int):
    stream = make_stream(seed, "residual")
    counts = [0] * index.M
    trials = 0
    fallbacks = 0
    for _ in range(calls):
        r = residual_sample_thinning(p, q, index, stream)
        counts[r.group] += 1
        trials += r.trials
        fallbacks += r.fallback
    return np.array(counts), trials / calls, fallbacks


def _suite(name, metric, threshold, passed, **details):
    return {"suite": name, "metric": metric, "threshold": threshold, "passed": bool(passed), **details}


def suite_weight_normalization(config: ExperimentConfig) -> dict:
    worst = 0.0
    negative = False
    for s in range(config.instances):
        inst = random_instance(s, weight_rule=config.weight_rule)
        for w in inst.index.token_weights:
            worst = max(worst, abs(float(w.sum()) - 1.0))
            negative |= bool(np.any(w < 0))
    return _suite("weight-normalization", worst, 1e-12, worst <= 1e-12 and not negative,
                  negative_weights=negative)


def suite_proposition_algebraic(config: ExperimentConfig, count: int = 1000, n_range=(2, 16)) -> dict:
    worst_identity = 0.0
    worst_emitted = 0.0
    worst_norm = 0.0
    for s in range(count):
        inst = random_instance(10_000 + s, n_range=n_range, weight_rule=config.weight_rule)
        worst_identity = max(worst_identity, exact_group_identity_check(inst.p, inst.q, inst.index))
        qc = oracle.exact_coarse(inst.q, inst.index).probs
        pc = oracle.exact_coarse(inst.p, inst.index).probs
        em = oracle.exact_emitted(inst.p, inst.q, inst.index).probs
        worst_emitted = max(worst_emitted, float(np.max(np.abs(em - qc))))
        worst_norm = max(worst_norm, abs(pc.sum() - 1.0), abs(qc.sum() - 1.0))
    worst = max(worst_identity, worst_emitted)
    return _suite("proposition-algebraic", worst, 1e-12, worst <= 1e-12 and worst_norm <= 1e-9,
                  instances=count, identity_deviation=worst_identity,
                  emitted_deviation=worst_emitted, normalization_deviation=worst_norm)


def suite_single_step(config: ExperimentConfig) -> list:
    """Emitted-group exactness and the proposal coupling, from the same trials."""
    thr = tv_threshold(config.trials)
    emitted_rows, coupling_rows = [], []
    for s in range(config.instances):
        inst = random_instance(s, weight_rule=config.weight_rule)
        proposed, emitted, _ = single_step_counts(inst.p, inst.q, inst.index, config.trials, 1000 + s)
        pc = oracle.exact_coarse(inst.p, inst.index).probs
        qc = oracle.exact_coarse(inst.q, inst.index).probs
        e = oracle.fit_counts(emitted, qc)
        c = oracle.fit_counts(proposed, pc)
        emitted_rows.append({"instance": s, "n": inst.index.n, "M": inst.index.M,
                             "tv": e.tv, "pvalue": e.pvalue})
        coupling_rows.append({"instance": s, "n": inst.index.n, "M": inst.index.M,
                              "tv": c.tv, "pvalue": c.pvalue})
    worst_e = max(r["tv"] for r in emitted_rows)
    worst_c = max(r["tv"] for r in coupling_rows)
    return [
        _suite("proposition-statistical", worst_e, thr, worst_e <= thr, trials=config.trials,
               instances=emitted_rows),
        _suite("coupling", worst_c, thr, worst_c <= thr, trials=config.trials, instances=coupling_rows),
    ]


def suite_thinning(config: ExperimentConfig, calls: Optional[int] = None) -> list:
    calls = calls or max(1, config.trials // 2)
    thr = tv_threshold(calls * 2)
    rows = []
    s = 0
    while len(rows) < config.instances:
        inst = random_instance(20_000 + s, weight_rule=config.weight_rule)
        s += 1
        pc = oracle.exact_coarse(inst.p, inst.index).probs
        qc = oracle.exact_coarse(inst.q, inst.index).probs
        tv = oracle.tv_distance(pc, qc)
        if tv < 0.05:
            continue
        counts, mean_trials, fallbacks = residual_counts(inst.p, inst.q, inst.index, calls, 3000 + s)
        try:
            resid = oracle.exact_residual(inst.p, inst.q, inst.index).probs
            fit = oracle.fit_counts(counts, resid)
            resid_tv = fit.tv
        except Exception:
            resid_tv = math.inf
        rows.append({"instance": 20_000 + s - 1, "coarse_tv": tv, "mean_trials": mean_trials,
                     "expected_trials": 1.0 / tv, "relative_error": abs(mean_trials * tv - 1.0),
                     "residual_tv": resid_tv, "fallbacks": fallbacks})
    worst_rel = max(r["relative_error"] for r in rows)
    worst_tv = max(r["residual_tv"] for r in rows)
    return [
        _suite("thinning-expectation", worst_rel, 0.05, worst_rel <= 0.05, calls=calls, instances=rows),
        _suite("residual-agreement", worst_tv, thr, worst_tv <= thr, calls=calls),
    ]


def suite_singleton_reduction(config: ExperimentConfig, count: int = 1000, mc_instances: int = 5,
                              rounds: int = 20_000) -> dict:
    worst = 0.0
    for s in range(count):
        inst = random_instance(40_000 + s, n_range=(2, 32), weight_rule=config.weight_rule)
        single = GroupIndex.singletons(inst.index.n)
        if config.weight_rule != "equal-split":
            single = single.with_weight_rule(config.weight_rule)
        worst = max(worst, abs(oracle.pcg_acceptance(inst.p, inst.q, single)
                               - oracle.sd_acceptance(inst.p, inst.q)))
    mc = []
    for s in range(mc_instances):
        inst = random_instance(40_000 + s, n_range=(2, 32))
        single = GroupIndex.singletons(inst.index.n)
        rates = {}
        for method in ("pcg", "sd"):
            tr = generate(method, _Memoryless(inst.p), _Memoryless(inst.q), [], rounds,
                          DecodeConfig(lookahead=1, cost_ratio=0.0), index=single,
                          streams=DecodeStreams.for_sequence(50_000 + s))
            rates[method] = tr.acceptance_rate
        a = oracle.sd_acceptance(inst.p, inst.q)
        sigma = math.sqrt(a * (1 - a) / rounds)
        mc.append({"instance": 40_000 + s, "analytic": a, "pcg_rate": rates["pcg"], "sd_rate": rates["sd"],
                   "within_3sigma": all(abs(r - a) <= 3 * sigma + 1e-12 for r in rates.values())})
    passed = worst <= 1e-12 and all(m["within_3sigma"] for m in mc)
    return _suite("singleton-reduction", worst, 1e-12, passed, instances=count, monte_carlo=mc)


class _Memoryless:
    def __init__(self, dist: TokenDistribution):
        self.dist = dist
        self.n = len(dist)
        self.cost = 1.0

    def next_distribution(self, prefix):
        return self.dist


def suite_embedding_index(config: ExperimentConfig) -> dict:
    if config.embeddings is None:
        raise ConfigError("the embedding-index suite needs an embeddings path")
    emb = load_embeddings(_existing(config.embeddings, "embeddings"), config.prenormalized)
    if emb.shape[0] > oracle.ENUMERATION_LIMIT:
        raise ConfigError(f"embedding suite enumerates groups; n must be <= {oracle.ENUMERATION_LIMIT}")
    idx = build_groups(emb, config.theta)
    if config.weight_rule != "equal-split":
        idx = idx.with_weight_rule(config.weight_rule)
    rng = make_stream(0, "instance", 99).generator
    worst = 0.0
    for _ in range(20):
        p = rng.dirichlet(np.ones(idx.n))
        q = rng.dirichlet(np.ones(idx.n))
        worst = max(worst, float(np.max(np.abs(oracle.exact_emitted(p, q, idx).probs
                                               - oracle.exact_coarse(q, idx).probs))))
    return _suite("embedding-index", worst, 1e-12, worst <= 1e-12, n=idx.n, M=idx.M, theta=config.theta)


SUITES = {
    "weight-normalization": suite_weight_normalization,
    "proposition-algebraic": suite_proposition_algebraic,
    "single-step": suite_single_step,
    "thinning": suite_thinning,
    "singleton-reduction": suite_singleton_reduction,
    "embedding-index": suite_embedding_index,
}
DEFAULT_SUITES = ("weight-normalization", "proposition-algebraic", "single-step", "thinning",
                  "singleton-reduction")


def run_verification(config: ExperimentConfig) -> dict:
    """Run the configured suites; ``passed`` is true only if every suite passes."""
    config.validate()
    names = config.suites
    if names is None:
        names = DEFAULT_SUITES + (("embedding-index",) if config.embeddings else ())
    results = []
    for name in names:
        out = SUITES[name](config)
        results.extend(out if isinstance(out, list) else [out])
    return {"config": config.to_dict(), "suites": results, "passed": all(r["passed"] for r in results)}


# ---------------------------------------------------------------------------
# sweeps and benchmark


THETA_COLUMNS = ("theta", "seed", "M", "mean_group_size", "acceptance_rate", "tokens_per_round",
                 "modeled_speedup", "ssd_coarse_tv")
BENCH_COLUMNS = ("acceptance_rate", "analytic_acceptance", "tokens_per_round", "modeled_speedup",
                 "mean_thinning_trials", "rounds", "proposals", "fallbacks")
LOOKAHEAD_COLUMNS = ("lookahead", "seed", "method", "acceptance_rate", "tokens_per_round",
                     "closed_form_tokens_per_round", "modeled_speedup", "closed_form_speedup")


def _map(func, tasks, workers: int):
    if workers <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, tasks))


def _theta_point(task) -> dict:
    cfg_dict, theta, seed = task
    config = ExperimentConfig.from_dict(cfg_dict)
    inst = resolve_instance(config)
    if inst.embeddings is None:
        raise ConfigError("sweep-theta needs embeddings (a clustered preset or an embeddings file)")
    idx = index_for(inst, theta, config.weight_rule)
    st_sizes = [g.size for g in idx.groups]
    trace = generate("pcg", inst.draft, inst.target, [], config.length, config.decode_config(),
                     index=idx, streams=DecodeStreams.for_sequence(seed))
    p0 = inst.draft.next_distribution([])
    q0 = inst.target.next_distribution([])
    if idx.n <= oracle.ENUMERATION_LIMIT:
        ssd_groups = oracle.exact_coarse(oracle.ssd_emitted_tokens(p0, q0, config.bias), idx).probs
        ssd_tv = oracle.tv_distance(ssd_groups, oracle.exact_coarse(q0, idx).probs)
    else:
        ssd_tv = math.nan
    return {
        "theta": theta,
        "seed": seed,
        "M": idx.M,
        "mean_group_size": float(np.mean(st_sizes)),
        "acceptance_rate": trace.acceptance_rate,
        "tokens_per_round": trace.tokens_per_round,
        "modeled_speedup": trace.speedup,
        "ssd_coarse_tv": ssd_tv,
    }


def sweep_theta(config: ExperimentConfig) -> list:
    config.validate()
    tasks = [(config.to_dict(), float(th), int(s)) for th in config.thetas for s in config.seeds]
    return _map(_theta_point, tasks, config.workers)


def _analytic_acceptance(method: str, inst: Instance, idx, bias: float) -> float:
    p0 = inst.draft.next_distribution([])
    q0 = inst.target.next_distribution([])
    if method == "pcg":
        return oracle.pcg_acceptance(p0, q0, idx)
    if method == "ssd":
        return oracle.ssd_acceptance(p0, q0, bias)
    return oracle.sd_acceptance(p0, q0)


def _lookahead_point(task) -> dict:
    cfg_dict, lookahead, seed = task
    config = ExperimentConfig.from_dict(cfg_dict)
    inst = resolve_instance(config)
    method = config.method
    if method == "target-only":
        raise ConfigError("sweep-lookahead needs a speculative method")
    idx = index_for(inst, config.theta, config.weight_rule) if method == "pcg" else None
    trace = generate(method, inst.draft, inst.target, [], config.length,
                     config.decode_config(lookahead), index=idx,
                     streams=DecodeStreams.for_sequence(seed))
    a = _analytic_acceptance(method, inst, idx, config.bias)
    return {
        "lookahead": lookahead,
        "seed": seed,
        "method": method,
        "acceptance_rate": trace.acceptance_rate,
        "tokens_per_round": trace.tokens_per_round,
        "closed_form_tokens_per_round": oracle.expected_tokens_per_round(a, lookahead),
        "modeled_speedup": trace.speedup,
        "closed_form_speedup": oracle.modeled_speedup(a, lookahead, config.cost_ratio),
    }


def sweep_lookahead(config: ExperimentConfig) -> list:
    """One row per lookahead per seed.

    Closed-form columns use the empty-prefix acceptance probability, which is
    the exact per-position rate for memoryless model pairs.
    """
    config.validate()
    tasks = [(config.to_dict(), int(la), int(s)) for la in config.lookaheads for s in config.seeds]
    return _map(_lookahead_point, tasks, config.workers)


def bench(config: ExperimentConfig) -> dict:
    """Per-method acceptance, tokens/round, modeled speedup and thinning trials, pooled over seeds."""
    config.validate()
    inst = resolve_instance(config)
    idx = index_for(inst, config.theta, config.weight_rule) if "pcg" in config.methods else None
    out = {}
    for method in config.methods:
        agg = {"tokens": 0, "rounds": 0, "proposals": 0, "acceptances": 0, "cost": 0.0,
               "residual_calls": 0, "residual_trials": 0, "fallbacks": 0}
        for seed in config.seeds:
            tr = generate(method, inst.draft, inst.target, [], config.length, config.decode_config(),
                          index=idx, streams=DecodeStreams.for_sequence(int(seed)))
            agg["tokens"] += tr.emitted
            agg["rounds"] += tr.n_rounds
            agg["proposals"] += tr.proposals
            agg["acceptances"] += tr.acceptances
            agg["cost"] += tr.cost
            agg["residual_calls"] += tr.residual_calls
            agg["residual_trials"] += tr.residual_trials
            agg["fallbacks"] += tr.fallbacks
        out[method] = {
            "acceptance_rate": agg["acceptances"] / agg["proposals"] if agg["proposals"] else None,
            "tokens_per_round": agg["tokens"] / agg["rounds"] if agg["rounds"] else 0.0,
            "modeled_speedup": agg["tokens"] / agg["cost"] if agg["cost"] else 0.0,
            "mean_thinning_trials": (agg["residual_trials"] / agg["residual_calls"]
                                     if method == "pcg" and agg["residual_calls"] else None),
            "rounds": agg["rounds"],
            "proposals": agg["proposals"],
            "fallbacks": agg["fallbacks"],
        }
        out[method]["analytic_acceptance"] = (None if method == "target-only"
                                              else _analytic_acceptance(method, inst, idx, config.bias))
    return {"config": config.to_dict(),
            "index": None if idx is None else {"theta": idx.theta, "M": idx.M, "n": idx.n},
            "methods": out}
