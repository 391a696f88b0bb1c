"""Adversarial perception-error search.

``heuristic_search`` drops each agent's whole track, then narrows the drop
window of every agent whose removal alone causes a failure.
``random_search`` starts from such a drop and walks along the failure
boundary: proposals turn part of a false-negative run into slightly wrong
detections, are screened on the perception metric using the previous
rollout's ground truth, and one improving proposal per step is checked with
a full rollout.  Simulation is open loop, so the scripted agents' truth is
identical in every rollout and the screen is exact for the NDS objectives.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics, pem
from .errors import ErrorSequence, apply_errors, full_drop_error, perturb, segment_drop_error
from .scenario import GroundTruthSequence, Scenario, generate_ground_truth
from .simulation import Rollout, rollout

OBJECTIVES = ("nds", "nds-t", "pem-ll")
N_STEPS = 40
N_PROPOSALS = 100
MAX_DX = 5.0  # metres
DPHI_STD = 0.1  # radians
BISECT_ITERS = 3


class PreconditionError(RuntimeError):
    """The search cannot start (perfect perception unsafe, or e0 not failing)."""


def bisect(pred, lo: int, hi: int, iters: int = BISECT_ITERS, pred_lo=None, pred_hi=None) -> int:
    """Integer bisection of a monotone predicate on ``[lo, hi]``.

    ``pred(lo)`` and ``pred(hi)`` must differ; known endpoint values can be
    passed to save evaluations.  Returns the endpoint of the final bracket on
    the side where ``pred`` holds, at most ``ceil((hi - lo) / 2**iters) - 1``
    frames from the boundary.
    """
    if lo > hi:
        raise ValueError("lo must not exceed hi")
    p_lo = pred(lo) if pred_lo is None else bool(pred_lo)
    p_hi = pred(hi) if pred_hi is None else bool(pred_hi)
    if p_lo == p_hi:
        raise ValueError(f"predicate does not bracket a boundary on [{lo}, {hi}]")
    for _ in range(iters):
        if hi - lo <= 1:
            break
        mid = (lo + hi) // 2
        if bool(pred(mid)) == p_lo:
            lo = mid
        else:
            hi = mid
    return lo if p_lo else hi


# -- scoring -----------------------------------------------------------------


class Evaluator:
    """Runs rollouts for one scenario and scores error sequences.

    Every call to ``rollout`` is one full simulation and is counted.
    """

    def __init__(self, scenario: Scenario, pem_model: pem.PemModel | None = None):
        self.scenario = scenario
        self.ground_truth: GroundTruthSequence = generate_ground_truth(scenario)
        self.pem_model = pem_model or pem.PRESETS[pem.DEFAULT_PRESET]
        self.rollouts = 0
        self._features: dict[int, tuple] = {}

    def rollout(self, e: ErrorSequence) -> Rollout:
        self.rollouts += 1
        return rollout(self.scenario, e, ground_truth=self.ground_truth)

    def fails(self, e: ErrorSequence) -> bool:
        return self.rollout(e).failed

    def _pem_features(self, world: GroundTruthSequence):
        key = id(world)
        if key not in self._features:
            self._features = {key: (world, pem.sequence_features(world))}
        return self._features[key][1]

    def breakdown(self, e: ErrorSequence, world: GroundTruthSequence | None = None) -> dict:
        """All perception scores of ``e``; ``world`` sets the ego used for PEM bins."""
        rep = metrics.report(self.ground_truth, apply_errors(self.ground_truth, e))
        ll = pem.log_likelihood(self.pem_model, world or self.ground_truth, e,
                                features=self._pem_features(world) if world is not None else None)
        return {
            "fn": e.fn_count,
            "tp": e.tp_count,
            "mpe": e.mean_position_error(),
            "maoe": e.mean_abs_orientation_error(),
            "nds": rep.nds,
            "nds_t": rep.nds_t,
            "map": rep.map,
            "ate": rep.ate,
            "aoe": rep.aoe,
            "longest_drop_fraction": rep.longest_drop_fraction,
            "pem_ll": ll,
        }

    def alpha(self, e: ErrorSequence, objective: str, world: GroundTruthSequence | None = None) -> float:
        if objective == "nds":
            return metrics.report(self.ground_truth, apply_errors(self.ground_truth, e)).nds
        if objective == "nds-t":
            return metrics.report(self.ground_truth, apply_errors(self.ground_truth, e)).nds_t
        if objective == "pem-ll":
            features = self._pem_features(world) if world is not None else None
            return pem.squash(pem.log_likelihood(self.pem_model, world or self.ground_truth, e, features))
        raise ValueError(f"unknown objective {objective!r}; choose from {', '.join(OBJECTIVES)}")


# -- heuristic search --------------------------------------------------------


@dataclass
class HeuristicResult:
    errors: list[ErrorSequence]
    status: str  # "ok" | "no-influential-agents"
    influential: list[int]
    windows: list[tuple[int, int, int]]  # (agent index, t_start, t_end)
    full_drop_rules: list[float]
    rollout_count: int  # excludes the perfect-perception precondition rollout
    worlds: list[GroundTruthSequence] = field(default_factory=list, repr=False)
    rules: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "influential": self.influential,
            "windows": [list(w) for w in self.windows],
            "full_drop_rules": self.full_drop_rules,
            "rules": self.rules,
            "rollout_count": self.rollout_count,
        }


def heuristic_search(scenario: Scenario, evaluator: Evaluator | None = None) -> HeuristicResult:
    """Per-agent track drops narrowed to a short failure-causing window.

    The window start is pushed as late as possible, then the end as early as
    possible, each with ``BISECT_ITERS`` bisection steps.  Rollouts after the
    precondition check: ``d`` full drops plus at most seven per influential
    agent (six bisection probes and one confirmation).
    """
    ev = evaluator or Evaluator(scenario)
    T, d = scenario.duration_T, scenario.n_agents
    base = ev.rollout(ErrorSequence.zeros(T, d))
    if base.failed:
        raise PreconditionError(
            f"{scenario.scenario_id}: rule already violated with perfect perception (r = {base.rule_value:.3f})"
        )
    start = ev.rollouts
    full_rules, influential = [], []
    for j in range(d):
        r = ev.rollout(full_drop_error(j, T, d)).rule_value
        full_rules.append(r)
        if r < 0:
            influential.append(j)

    errors, windows, worlds, rules = [], [], [], []
    for j in influential:
        def drop_from(t, j=j):
            # t == T is the empty drop, known to pass
            return ev.fails(segment_drop_error(j, t, T - 1, T, d))

        t_start = bisect(drop_from, 0, T, pred_lo=True, pred_hi=False)

        def drop_until(t, j=j, t_start=t_start):
            return ev.fails(segment_drop_error(j, t_start, t, T, d))

        t_end = bisect(drop_until, t_start - 1, T - 1, pred_lo=False, pred_hi=True)
        e = segment_drop_error(j, t_start, t_end, T, d)
        confirm = ev.rollout(e)
        if not confirm.failed:  # only possible if determinism is broken
            raise RuntimeError(f"confirmation rollout passed for agent {j} window [{t_start}, {t_end}]")
        errors.append(e)
        windows.append((j, t_start, t_end))
        worlds.append(confirm.world)
        rules.append(confirm.rule_value)

    return HeuristicResult(
        errors=errors,
        status="ok" if errors else "no-influential-agents",
        influential=influential,
        windows=windows,
        full_drop_rules=full_rules,
        rollout_count=ev.rollouts - start,
        worlds=worlds,
        rules=rules,
    )


# -- random search -----------------------------------------------------------


def propose(e: ErrorSequence, scenario: Scenario | None = None, seed=0) -> ErrorSequence:
    """Turn a random stretch of a false-negative run into detections.

    The stretch gets one position offset (uniform direction, magnitude
    uniform on ``[0, 5]`` m) and per-frame heading noise ``N(0, 0.1^2)``.
    Without false negatives a random stretch of one agent's detections is
    re-jittered the same way instead.
    """
    rng = np.random.default_rng(seed)
    T, d = e.shape
    if scenario is not None and (T, d) != (scenario.duration_T, scenario.n_agents):
        raise ValueError("error sequence does not match the scenario")
    runs = e.fn_runs()
    if runs:
        j, a, b = runs[int(rng.integers(len(runs)))]
    else:
        if d == 0:
            return e.copy()
        j, a, b = int(rng.integers(d)), 0, T - 1
    s, t = sorted(int(v) for v in rng.integers(a, b + 1, size=2))
    theta = rng.uniform(0.0, 2.0 * math.pi)
    mag = rng.uniform(0.0, MAX_DX)
    dx, dphi, fn = e.dx.copy(), e.dphi.copy(), e.fn.copy()
    fn[s:t + 1, j] = False
    dx[s:t + 1, j] = (mag * math.cos(theta), mag * math.sin(theta))
    dphi[s:t + 1, j] = rng.normal(0.0, DPHI_STD, size=t - s + 1)
    return ErrorSequence(dx, dphi, fn)


@dataclass
class TraceEntry:
    rollout_index: int
    alpha: float
    rule_value: float
    metrics: dict


@dataclass
class AttackResult:
    objective: str
    best_alpha: float
    best_error: ErrorSequence
    trace: list[TraceEntry]
    rollout_count: int  # full rollouts in the random search, including any replay of e0
    search_rollouts: int  # full rollouts issued by the search steps
    best_rule_value: float
    best_metrics: dict
    heuristic: dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self, error_file: str = "attack.err") -> dict:
        return {
            "objective": self.objective,
            "seed": self.seed,
            "best_alpha": self.best_alpha,
            "best_rule_value": self.best_rule_value,
            "rollout_count": self.rollout_count,
            "search_rollouts": self.search_rollouts,
            "error_file": error_file,
            "summary": self.best_metrics,
            "heuristic": self.heuristic,
            "trace": [
                {"rollout_index": t.rollout_index, "alpha": t.alpha, "rule_value": t.rule_value,
                 "metrics": t.metrics}
                for t in self.trace
            ],
        }

    def write_trace_csv(self, path) -> None:
        cols = ("fn", "tp", "mpe", "maoe", "nds", "nds_t", "pem_ll")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("rollout_index", "alpha", "rule_value") + cols)
            for t in self.trace:
                w.writerow([t.rollout_index, _num(t.alpha), _num(t.rule_value)]
                           + [_num(t.metrics[c]) for c in cols])

    def write_json(self, path, error_file: str = "attack.err") -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(error_file), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _num(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def random_search(
    scenario: Scenario,
    e0: ErrorSequence,
    objective: str = "nds-t",
    n_steps: int = N_STEPS,
    n_proposals: int = N_PROPOSALS,
    seed: int = 0,
    evaluator: Evaluator | None = None,
    initial: tuple[GroundTruthSequence, float] | None = None,
) -> AttackResult:
    """Boundary walk from a failing ``e0``; ``alpha`` never decreases.

    Each step draws ``n_proposals`` proposals from the current iterate,
    keeps those whose metric beats the current ``alpha`` on the previous
    rollout's ground truth, picks one uniformly and simulates it.  It is
    accepted iff the rollout still violates the rule and the metric,
    rescored on the new rollout, still beats ``alpha``.  Steps without an
    improving proposal issue no rollout.  ``initial`` may carry the
    already-simulated ``(world, rule_value)`` of ``e0`` to skip its replay.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}; choose from {', '.join(OBJECTIVES)}")
    ev = evaluator or Evaluator(scenario)
    start = ev.rollouts
    if initial is None:
        ro = ev.rollout(e0)
        initial = (ro.world, ro.rule_value)
    world, rule = initial
    if not rule < 0:
        raise PreconditionError(f"initial error sequence does not cause a failure (r = {rule:.3f})")
    current = e0
    replayed = ev.rollouts - start
    alpha = ev.alpha(current, objective, world)
    trace = [TraceEntry(0, alpha, rule, ev.breakdown(current, world))]
    index = 0
    for step in range(1, n_steps + 1):
        proposals = [propose(current, scenario, np.random.SeedSequence([seed, step, j]))
                     for j in range(n_proposals)]
        improving = [p for p in proposals if ev.alpha(p, objective, world) > alpha]
        if not improving:
            continue
        pick_rng = np.random.default_rng(np.random.SeedSequence([seed, step, n_proposals]))
        candidate = improving[int(pick_rng.integers(len(improving)))]
        cand_ro = ev.rollout(candidate)
        index += 1
        if not cand_ro.failed:
            continue
        cand_alpha = ev.alpha(candidate, objective, cand_ro.world)
        if cand_alpha <= alpha:
            continue
        current, world, rule, alpha = candidate, cand_ro.world, cand_ro.rule_value, cand_alpha
        trace.append(TraceEntry(index, alpha, rule, ev.breakdown(current, world)))
    return AttackResult(
        objective=objective,
        best_alpha=alpha,
        best_error=current,
        trace=trace,
        rollout_count=ev.rollouts - start,
        search_rollouts=ev.rollouts - start - replayed,
        best_rule_value=rule,
        best_metrics=trace[-1].metrics,
        seed=seed,
    )


def _initial_index(heur: HeuristicResult, objective: str, evaluator: Evaluator) -> int:
    if not heur.errors:
        raise PreconditionError("heuristic search found no influential agent")
    scores = [evaluator.alpha(e, objective, w) for e, w in zip(heur.errors, heur.worlds)]
    return int(np.argmax(scores))


def pick_initial(heur: HeuristicResult, objective: str, evaluator: Evaluator) -> ErrorSequence:
    """The heuristic output with the highest ``alpha`` (first on ties)."""
    return heur.errors[_initial_index(heur, objective, evaluator)]


def attack(scenario: Scenario, objective: str = "nds-t", seed: int = 0, n_steps: int = N_STEPS,
           n_proposals: int = N_PROPOSALS, pem_model: pem.PemModel | None = None) -> AttackResult:
    """Heuristic initialisation followed by the random boundary search."""
    ev = Evaluator(scenario, pem_model)
    heur = heuristic_search(scenario, ev)
    i = _initial_index(heur, objective, ev)
    # the heuristic's confirmation rollout already simulated e0
    result = random_search(scenario, heur.errors[i], objective, n_steps, n_proposals, seed, ev,
                           initial=(heur.worlds[i], heur.rules[i]))
    result.heuristic = heur.to_dict()
    return result


# -- robustness --------------------------------------------------------------


@dataclass
class ProbePoint:
    strength: float
    adversarial_fraction: float
    mean_nds: float
    mean_nds_t: float
    n: int


def robustness_probe(scenario: Scenario, e_star: ErrorSequence, strengths, n: int = 10, seed: int = 0,
                     evaluator: Evaluator | None = None) -> list[ProbePoint]:
    """Failure rate and mean perception quality of ``n`` random perturbations per strength."""
    ev = evaluator or Evaluator(scenario)
    if not ev.rollout(e_star).failed:
        raise PreconditionError("the error sequence to probe does not cause a failure")
    curve = []
    for k, s in enumerate(strengths):
        fails, nds_v, ndst_v = 0, [], []
        for i in range(n):
            e = perturb(e_star, float(s), np.random.SeedSequence([seed, k, i]))
            fails += ev.fails(e)
            rep = metrics.report(ev.ground_truth, apply_errors(ev.ground_truth, e))
            nds_v.append(rep.nds)
            ndst_v.append(rep.nds_t)
        curve.append(ProbePoint(float(s), fails / n, float(np.mean(nds_v)), float(np.mean(ndst_v)), n))
    return curve


def write_probe_csv(curve: list[ProbePoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("strength", "adversarial_fraction", "mean_nds", "mean_nds_t", "n"))
        for p in curve:
            w.writerow([_num(p.strength), _num(p.adversarial_fraction), _num(p.mean_nds), _num(p.mean_nds_t), p.n])
