"""Predictor attachments, training-data generation and consensus emission."""
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import expfam
from .engine import EngineConfig, run_inference
from .expfam import PointMass
from .forest import ForestConfig, train_forest
from .graph import GraphError, condition_observations

log = logging.getLogger(__name__)

# floor applied to emitted variances so a consensus message never pins a belief
MIN_CONSENSUS_VAR = 1e-6


class NotTrainedError(RuntimeError):
    pass


@dataclass
class PredictorAttachment:
    """A consensus predictor bound to target variables and a context layer.

    Type A has a single target; type B has one target per variable of a layer
    and the featurizer returns one feature row per target.
    """
    name: str
    targets: list
    context: list
    featurizer: object
    forest: object = None
    enabled: bool = True
    min_var: float = MIN_CONSENSUS_VAR
    # type B: seeded subsample of targets per training problem (None = all)
    max_targets_per_example: int = None
    # False allows a context from any lower layer (baseline-only predictors)
    adjacent_context: bool = True

    @property
    def active(self):
        return self.enabled

    @property
    def trained(self):
        return self.forest is not None

    @property
    def per_variable(self):
        return len(self.targets) > 1

    def check(self, g):
        missing = [v for v in self.targets + self.context if not g.has_var(v)]
        if missing:
            raise GraphError(f"{self.name}: unknown variables {missing[:3]}")
        tl = {g.var(t).layer for t in self.targets}
        cl = {g.var(c).layer for c in self.context}
        if len(tl) != 1 or len(cl) != 1:
            raise GraphError(f"{self.name}: targets and context must each lie in one layer")
        t, c = tl.pop(), cl.pop()
        if c != t - 1 and not (c < t and not self.adjacent_context):
            raise GraphError(f"{self.name}: context must lie in the layer below the targets")

    def features(self, ctx):
        T, R = self.featurizer(ctx)
        if T.shape[0] != len(self.targets) or R.shape[0] != len(self.targets):
            raise GraphError(f"{self.name}: featurizer returned {T.shape[0]} rows "
                             f"for {len(self.targets)} targets")
        return T, R

    def emit(self, ctx):
        """Consensus messages for every target, in target order."""
        if self.forest is None:
            raise NotTrainedError(f"{self.name} has no trained forest")
        T, R = self.features(ctx)
        return [self._floor(m) for m in self.forest.predict_many(T, R)]

    def _floor(self, m):
        if isinstance(m, PointMass):
            mu, cov = m.mean, m.cov
        else:
            mu, cov = m.mean, np.atleast_2d(expfam.var_of(m))
        if self.featurizer.output_family == "gaussian":
            return expfam.Gaussian.from_mean_var(float(np.ravel(mu)[0]),
                                                 max(float(cov[0, 0]), self.min_var))
        w, V = np.linalg.eigh(0.5 * (cov + cov.T))
        cov = (V * np.maximum(w, self.min_var)) @ V.T
        return expfam.MvGaussian.from_mean_cov(mu, cov)

    def describe(self):
        return {"name": self.name, "targets": len(self.targets),
                "firstTarget": self.targets[0], "context": len(self.context),
                "featurizer": self.featurizer.describe(), "trained": self.trained,
                "enabled": self.enabled}


def emit_consensus(att, ctx):
    return att.emit(ctx)


@dataclass
class TrainingExample:
    context: list
    oracle: object
    # row of the featurizer output for type-B attachments
    target_index: int = 0

    def to_dict(self):
        return {"context": [expfam.to_dict(m) for m in self.context],
                "oracle": expfam.to_dict(self.oracle), "target": self.target_index}

    @classmethod
    def from_dict(cls, d):
        return cls([expfam.from_dict(m) for m in d["context"]],
                   expfam.from_dict(d["oracle"]), d.get("target", 0))


def save_examples(path, examples):
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict()) + "\n")


def load_examples(path):
    with open(path) as fh:
        return [TrainingExample.from_dict(json.loads(line)) for line in fh if line.strip()]


@dataclass
class GenerationReport:
    examples: dict = field(default_factory=dict)
    discarded: int = 0
    skipped: int = 0


def capture_contexts(g, observations, cfg, attachments):
    """Iteration-1 context beliefs for each attachment.

    Attachments with a trained forest and ``enabled`` set fire as usual, so
    lower-layer predictors shape the contexts of upper-layer ones.
    """
    live = [replace(a, enabled=a.enabled and a.trained) for a in attachments]
    gc = condition_observations(g.with_predictors(live), observations)
    run_cfg = EngineConfig(iterations=1, mode=cfg.mode, damping=cfg.damping, seed=cfg.seed)
    trace = run_inference(gc, run_cfg, consensus=True, capture=True,
                          stop_after_consensus=True, track=[])
    return trace.contexts


def _select(att, k):
    """Indices of targets to keep for example k (all, or a seeded subsample)."""
    n = len(att.targets)
    limit = att.max_targets_per_example
    if limit is None or limit >= n:
        return range(n)
    rng = np.random.default_rng(k)
    return sorted(rng.choice(n, size=limit, replace=False))


def _add(report, att, k, ctx, oracle_for):
    out = report.examples.setdefault(att.name, [])
    for i in _select(att, k):
        o = oracle_for(att.targets[i])
        if o is None:
            report.skipped += 1
            continue
        out.append(TrainingExample(ctx, o, i))


def _point(value):
    value = np.asarray(value, dtype=float)
    return PointMass(float(value) if value.ndim == 0 else value)


def gen_training_from_convergence(g, problems, attachments, cfg, long_iterations=100,
                                  tol=1e-10):
    """Source 1: oracle = target marginal after a long standard run.

    problems: iterable of observation dicts. The run stops early once no
    natural parameter moves by more than ``tol`` in an iteration.
    """
    report = GenerationReport()
    train_atts = [a for a in attachments if not (a.trained and a.enabled)]
    for k, obs in enumerate(problems):
        contexts = capture_contexts(g, obs, cfg, attachments)
        gc = condition_observations(g, obs)
        run_cfg = EngineConfig(iterations=long_iterations, mode=cfg.mode,
                               damping=cfg.damping, convergence_tol=tol, seed=cfg.seed)
        try:
            trace = run_inference(gc, run_cfg, consensus=False, track=[])
        except Exception as exc:
            log.warning("oracle run %d failed: %s", k, exc)
            report.discarded += 1
            continue
        final = trace.final
        bad = [t for a in train_atts for t in a.targets if not _finite_proper(final[t])]
        if bad:
            report.discarded += 1
            continue
        for att in train_atts:
            _add(report, att, k, contexts[att.name], final.get)
    return report


def _finite_proper(m):
    if isinstance(m, PointMass):
        return True
    try:
        mu = np.atleast_1d(m.mean)
    except (np.linalg.LinAlgError, ZeroDivisionError):
        return False
    return bool(m.is_proper and np.isfinite(mu).all())


def gen_training_from_samples(g, sampler, D, attachments, cfg, seed=0):
    """Source 2: oracle = point mass at the sampled target value.

    sampler(seed) -> (latents, observations); ``latent_value(latents, vid)``
    must resolve target ids.
    """
    from .models import latent_value
    data = []
    for k in range(D):
        latents, obs = sampler(seed + k)
        data.append((obs, {t: latent_value(latents, t)
                           for a in attachments for t in a.targets}))
    return gen_training_from_labels(g, data, attachments, cfg)


def gen_training_from_labels(g, dataset, attachments, cfg):
    """Source 3: oracle = point mass at the provided label.

    dataset: iterable of (observations, labels) with labels keyed by variable id.
    """
    report = GenerationReport()
    train_atts = [a for a in attachments if not (a.trained and a.enabled)]
    for k, (obs, labels) in enumerate(dataset):
        contexts = capture_contexts(g, obs, cfg, attachments)

        def oracle(vid):
            if vid not in labels or labels[vid] is None:
                return None
            return _point(labels[vid])
        for att in train_atts:
            _add(report, att, k, contexts[att.name], oracle)
    return report


def featurize_examples(att, examples):
    """Stack (T, R, Y, OC) for a list of examples; shared contexts featurized once."""
    cache = {}
    T, R, Y, OC = [], [], [], []
    for ex in examples:
        key = id(ex.context)
        if key not in cache:
            cache[key] = att.features(ex.context)
        t, r = cache[key]
        T.append(t[ex.target_index])
        R.append(r[ex.target_index])
        o = ex.oracle
        Y.append(np.atleast_1d(expfam.mean_of(o)))
        OC.append(np.atleast_2d(expfam.var_of(o)))
    return np.array(T), np.array(R), np.array(Y), np.array(OC)


def train_attachment(att, examples, cfg=None):
    """Fit the attachment's forest on its examples and return the attachment."""
    cfg = cfg or ForestConfig()
    T, R, Y, OC = featurize_examples(att, examples)
    fam = att.featurizer.output_family
    use_oc = OC if np.any(OC) else None
    att.forest = train_forest(T, R, Y, cfg, output_family=fam, OC=use_oc,
                              pair_block=att.featurizer.pair_block)
    return att


def consensus_error(att, examples):
    """RMSE of the consensus means against the oracle means."""
    T, R, Y, _ = featurize_examples(att, examples)
    pred = np.array([np.atleast_1d(m.mean) for m in att.forest.predict_many(T, R)])
    return math.sqrt(float(np.mean((pred - Y) ** 2)))
