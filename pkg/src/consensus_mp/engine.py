"""Sequential message-passing executor with consensus hooks.

One iteration is a bottom-up sweep over the layers followed by a top-down
sweep. In iteration 1 each consensus predictor fires at the head of its
target layer, i.e. once every contextual message from the layer below has
been computed and before any standard message reaches that layer.
"""
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import expfam
from .expfam import Bernoulli, Gaussian, MvGaussian, PointMass
from .factors import EP, VMP, Prior

log = logging.getLogger(__name__)

CONSENSUS = "consensus"
STANDARD = "standard"
UP = "up"
DOWN = "down"
RETAIN = "retain"
RETRACT = "retract"


class EngineError(RuntimeError):
    pass


class ScheduleError(ValueError):
    pass


@dataclass
class EngineConfig:
    iterations: int = 50
    mode: str = VMP
    # (factor kind name, target role) -> step size in (0, 1]
    damping: dict = field(default_factory=dict)
    # stop when no natural parameter moves by more than tol * (1 + |value|)
    convergence_tol: float = None
    seed: int = 0
    # "retain": consensus stays in the belief as extra evidence for the whole run;
    # "retract": it is divided out after iteration 1 so fixed points match plain MP
    consensus_retention: str = RETAIN

    def __post_init__(self):
        if self.mode not in (VMP, EP):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.consensus_retention not in (RETAIN, RETRACT):
            raise ValueError(f"unknown consensus retention {self.consensus_retention!r}")
        for key, a in self.damping.items():
            if not 0.0 < a <= 1.0:
                raise ValueError(f"damping step for {key} must be in (0, 1]")

    @classmethod
    def from_dict(cls, d):
        damping = {}
        for k, a in d.get("damping", {}).items():
            kind, role = k.split(":") if isinstance(k, str) else k
            damping[(kind, role)] = float(a)
        return cls(iterations=int(d.get("iterations", 50)), mode=d.get("mode", VMP),
                   damping=damping, convergence_tol=d.get("convergenceTol"),
                   seed=int(d.get("seed", 0)),
                   consensus_retention=d.get("consensusRetention", RETAIN))

    def to_dict(self):
        return {"iterations": self.iterations, "mode": self.mode,
                "damping": {f"{k}:{r}": a for (k, r), a in sorted(self.damping.items())},
                "convergenceTol": self.convergence_tol, "seed": self.seed,
                "consensusRetention": self.consensus_retention}


@dataclass(frozen=True)
class Action:
    phase: str
    layer: int
    direction: str
    # standard: (factor index, edge index); consensus: (predictor index, -1)
    node: int
    edge: int


@dataclass
class Schedule:
    first: list
    rest: list

    def actions(self, iteration):
        return self.first if iteration == 1 else self.rest

    @property
    def consensus_count(self):
        return sum(a.phase == CONSENSUS for a in self.first + self.rest)

    def describe(self, g, iteration=1):
        """Human-readable (phase, factor or predictor id, target id) triples."""
        out = []
        for a in self.actions(iteration):
            if a.phase == CONSENSUS:
                att = g.predictors[a.node]
                out.append((CONSENSUS, att.name, ",".join(att.targets[:3])))
            else:
                f = g.factors[a.node]
                out.append((STANDARD, f.id, f.edges[a.edge]))
        return out


def make_schedule(g, cfg=None):
    """Bottom-up then top-down sweep with consensus at the head of each layer."""
    layer = {v.id: v.layer for v in g.variables}
    observed = {v.id for v in g.variables if v.observed is not None}
    top = max(layer.values())
    up = {L: [] for L in range(top + 1)}
    within = {L: [] for L in range(top + 1)}
    down = {L: [] for L in range(top + 1)}
    for fi, f in enumerate(g.factors):
        if isinstance(f.kind, Prior):
            continue
        layers = [layer[v] for v in f.edges]
        lo = min(layers)
        same = all(x == lo for x in layers)
        for k, vid in enumerate(f.edges):
            if vid in observed:
                continue
            L = layer[vid]
            if same:
                within[L].append(Action(STANDARD, L, UP, fi, k))
            elif L > lo:
                up[L].append(Action(STANDARD, L, UP, fi, k))
            else:
                down[L].append(Action(STANDARD, L, DOWN, fi, k))
    cons = {L: [] for L in range(top + 1)}
    for pi, att in enumerate(g.predictors):
        tl = {layer[t] for t in att.targets}
        if len(tl) != 1:
            raise ScheduleError(f"{att.name}: targets span several layers")
        L = tl.pop()
        if not att.context:
            raise ScheduleError(f"{att.name}: empty context layer")
        cons[L].append(Action(CONSENSUS, L, UP, pi, -1))
    first, rest = [], []
    for L in range(top + 1):
        first += cons[L] + up[L] + within[L]
        rest += up[L] + within[L]
    for L in range(top, -1, -1):
        first += down[L]
        rest += down[L]
    return Schedule(first, rest)


def damp_message(old, new, alpha):
    """Convex combination ``alpha * new + (1 - alpha) * old`` in natural parameters."""
    if alpha == 1.0:
        return new
    if isinstance(new, PointMass) or isinstance(old, PointMass):
        return new
    if isinstance(new, Gaussian):
        return Gaussian(alpha * new.eta1 + (1 - alpha) * old.eta1,
                        alpha * new.eta2 + (1 - alpha) * old.eta2)
    if isinstance(new, MvGaussian):
        return MvGaussian(alpha * new.h + (1 - alpha) * old.h,
                          alpha * new.K + (1 - alpha) * old.K)
    return Bernoulli(alpha * new.log_odds + (1 - alpha) * old.log_odds)


def _finite(m):
    if isinstance(m, Gaussian):
        return math.isfinite(m.eta1) and math.isfinite(m.eta2)
    if isinstance(m, MvGaussian):
        return bool(np.isfinite(m.h).all() and np.isfinite(m.K).all())
    if isinstance(m, Bernoulli):
        return not math.isnan(m.log_odds)
    return True


def _admissible_belief(m):
    """Beliefs may be uniform but never have negative precision."""
    if isinstance(m, Gaussian):
        return m.eta2 <= 0.0
    if isinstance(m, MvGaussian):
        if not m.K.any():
            return True
        return expfam.eig_range(m.K)[0] > -expfam.NEG_PRECISION_TOL
    return True


@dataclass
class InferenceTrace:
    # beliefs[t][vid] for t = 0 (initial) .. iterations
    beliefs: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    # run-length log of (iteration, layer, phase, direction)
    actions: list = field(default_factory=list)
    contexts: dict = field(default_factory=dict)
    consensus: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    converged_at: int = None

    @property
    def iterations(self):
        return len(self.beliefs) - 1

    def mean(self, vid, t=-1):
        return expfam.mean_of(self.beliefs[t][vid])


class _State:
    def __init__(self, g, cfg):
        self.g = g
        self.cfg = cfg
        self.index = {v.id: i for i, v in enumerate(g.variables)}
        self.edges = [[self.index[v] for v in f.edges] for f in g.factors]
        self.belief = []
        for v in g.variables:
            self.belief.append(v.observed if v.observed is not None else v.uniform())
        self.msgs = []
        for fi, f in enumerate(g.factors):
            if isinstance(f.kind, Prior):
                m = f.kind.prior
                vi = self.edges[fi][0]
                if g.variables[vi].observed is None:
                    self.belief[vi] = expfam.multiply(self.belief[vi], m)
                self.msgs.append([m])
            else:
                self.msgs.append([g.variables[vi].uniform() for vi in self.edges[fi]])
        self.consensus = {}

    def set_message(self, fi, k, new, iteration, trace):
        vi = self.edges[fi][k]
        old = self.msgs[fi][k]
        if not _finite(new):
            trace.events.append(("nonfinite", self.g.factors[fi].id, iteration))
            log.warning("non-finite message from %s in iteration %d",
                        self.g.factors[fi].id, iteration)
            return
        b = self.belief[vi]
        if isinstance(b, PointMass):
            self.msgs[fi][k] = new
            return
        nb = expfam.multiply(expfam.divide(b, old), new) if not isinstance(new, PointMass) \
            else new
        if not _admissible_belief(nb):
            trace.events.append(("improper", self.g.factors[fi].id, iteration))
            log.debug("improper belief for %s after %s; update skipped",
                      self.g.variables[vi].id, self.g.factors[fi].id)
            return
        self.msgs[fi][k] = new
        self.belief[vi] = nb

    def retract_consensus(self, trace):
        for vid, m in self.consensus.items():
            vi = self.index[vid]
            nb = expfam.divide(self.belief[vi], m)
            if _admissible_belief(nb):
                self.belief[vi] = nb
            else:
                trace.events.append(("improper", vid, 2))
        self.consensus = {}

    def inputs(self, fi, use_beliefs):
        out = []
        for k, vi in enumerate(self.edges[fi]):
            b = self.belief[vi]
            if use_beliefs or isinstance(b, PointMass):
                out.append(b)
            else:
                out.append(expfam.divide(b, self.msgs[fi][k]))
        return out


def run_inference(g, cfg, schedule=None, *, consensus=True, capture=False,
                  track=None, stop_after_consensus=False):
    """Run message passing on a conditioned graph.

    consensus: when False, predictors never send (their capture points still
        run, so the standard trace is untouched).
    capture: record the context beliefs seen at each consensus point.
    track: variable ids whose beliefs are recorded every iteration
        (default: all non-observed variables above layer 0).
    stop_after_consensus: return right after the last consensus action of
        iteration 1 (used for training-data capture and forest-only runs).
    """
    from .graph import check_fully_observed
    check_fully_observed(g)
    if schedule is None:
        schedule = make_schedule(g, cfg)
    state = _State(g, cfg)
    trace = InferenceTrace()
    if track is None:
        track = [v.id for v in g.variables if v.layer > 0]
    tidx = [(vid, state.index[vid]) for vid in track]
    trace.beliefs.append({vid: state.belief[i] for vid, i in tidx})
    mode = cfg.mode
    damping = cfg.damping
    last_cons = max((i for i, a in enumerate(schedule.first) if a.phase == CONSENSUS),
                    default=-1)
    prev = None
    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        if it == 2 and cfg.consensus_retention == RETRACT:
            state.retract_consensus(trace)
        for ai, a in enumerate(schedule.actions(it)):
            key = (it, a.layer, a.phase, a.direction)
            if not trace.actions or trace.actions[-1] != key:
                trace.actions.append(key)
            if a.phase == CONSENSUS:
                _consensus_action(g, state, a, it, trace, consensus, capture)
                if stop_after_consensus and ai == last_cons:
                    trace.final = {v.id: state.belief[i] for i, v in enumerate(g.variables)}
                    return trace
                continue
            f = g.factors[a.node]
            kind = f.kind
            inputs = state.inputs(a.node, kind.uses_beliefs(mode))
            try:
                new = kind.message(a.edge, inputs, mode)
            except (expfam.ImproperMessageError, np.linalg.LinAlgError) as exc:
                trace.events.append(("message-failed", f.id, it))
                log.debug("message from %s skipped: %s", f.id, exc)
                continue
            if new is None:
                continue
            alpha = damping.get((kind.name, kind.roles[a.edge]))
            if alpha is not None:
                new = damp_message(state.msgs[a.node][a.edge], new, alpha)
            state.set_message(a.node, a.edge, new, it, trace)
        trace.wall.append(time.perf_counter() - t0)
        snap = {vid: state.belief[i] for vid, i in tidx}
        trace.beliefs.append(snap)
        if cfg.convergence_tol is not None:
            cur = np.concatenate([m.natural() for m in state.belief])
            if prev is not None and np.max(np.abs(cur - prev) / (1.0 + np.abs(prev))) \
                    < cfg.convergence_tol:
                trace.converged_at = it
                break
            prev = cur
    trace.final = {v.id: state.belief[i] for i, v in enumerate(g.variables)}
    return trace


def _consensus_action(g, state, a, it, trace, send, capture):
    att = g.predictors[a.node]
    ctx = [state.belief[state.index[v]] for v in att.context]
    if capture:
        trace.contexts[att.name] = ctx
    if not send or not att.active:
        return
    try:
        msgs = att.emit(ctx)
    except Exception as exc:  # degrade to standard message passing
        trace.events.append(("consensus-failed", att.name, it))
        log.warning("consensus %s skipped: %s", att.name, exc)
        return
    trace.consensus[att.name] = msgs
    for vid, m in zip(att.targets, msgs):
        vi = state.index[vid]
        b = state.belief[vi]
        nb = expfam.multiply(b, m)
        if not _admissible_belief(nb):
            trace.events.append(("improper", att.name, it))
            continue
        state.belief[vi] = nb
        state.consensus[vid] = m


def check_schedule_invariants(actions):
    """Assert the consensus scheduling rules on a trace's action log.

    * consensus actions only in iteration 1;
    * within a layer, consensus precedes standard actions;
    * the upward sweep visits layers in nondecreasing order, and consensus
      targets are visited bottom up.
    Raises AssertionError on any violation.
    """
    by_iter = {}
    for it, layer, phase, direction in actions:
        by_iter.setdefault(it, []).append((layer, phase, direction))
    for it, seq in by_iter.items():
        last_up = -1
        seen_down = False
        seen_standard_in = set()
        for layer, phase, direction in seq:
            if phase == CONSENSUS:
                assert it == 1, f"consensus action in iteration {it}"
                assert layer not in seen_standard_in, \
                    f"consensus after standard messages in layer {layer}"
                assert direction == UP and not seen_down, "consensus during downward sweep"
            else:
                if direction == UP:
                    seen_standard_in.add(layer)
            if direction == UP:
                assert not seen_down, "upward action after the downward sweep began"
                assert layer >= last_up, f"layer {layer} visited after layer {last_up}"
                last_up = layer
            else:
                seen_down = True
    return True
