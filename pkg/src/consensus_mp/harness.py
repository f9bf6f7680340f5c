"""Experiment driver, metrics and command-line interface.

An experiment trains the model's predictors once, then runs every arm on the
same test problems and records per-iteration errors against the sampled
ground truth.
"""
import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import cmp, expfam, models
from .engine import EngineConfig, check_schedule_invariants, run_inference
from .forest import Forest, ForestConfig, ForestError
from .graph import GraphError, condition_observations

log = logging.getLogger(__name__)

MP = "MP"
CMP = "CMP"
CMP1 = "CMP-1stage"
CMP2 = "CMP-2stage"
FOREST_ONLY = "ForestOnly"
ARMS = (MP, CMP, CMP1, CMP2, FOREST_ONLY)
SOURCES = ("convergence", "samples", "labels")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: object
    train_source: str = "samples"
    D: int = 500
    trials: int = 50
    iterations: int = 50
    engine: EngineConfig = field(default_factory=EngineConfig)
    arms: tuple = (MP, CMP)
    seed: int = 0
    forest: ForestConfig = field(default_factory=ForestConfig)
    long_iterations: int = 100
    # type-B predictors: targets kept per training problem
    max_targets_per_example: int = None

    def __post_init__(self):
        if not self.arms:
            raise ConfigError("arms must be nonempty")
        bad = [a for a in self.arms if a not in ARMS]
        if bad:
            raise ConfigError(f"unknown arms {bad}")
        if self.train_source not in SOURCES:
            raise ConfigError(f"unknown training source {self.train_source!r}")
        if self.D < 2 * self.forest.min_leaf and self.needs_training:
            raise ConfigError(f"D={self.D} below 2 * minLeafCount")
        if self.trials < 1 or self.iterations < 1:
            raise ConfigError("trials and iterations must be positive")

    @property
    def needs_training(self):
        return any(a != MP for a in self.arms)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        try:
            model = models.spec_from_dict(d.pop("model"))
        except KeyError:
            raise ConfigError("config needs a model section")
        eng = EngineConfig.from_dict(d.pop("engine", {}))
        fcfg = ForestConfig.from_dict(d.pop("forest", {}))
        keys = {"trainSource": "train_source", "longIterations": "long_iterations",
                "maxTargetsPerExample": "max_targets_per_example"}
        kw = {keys.get(k, k): v for k, v in d.items()}
        if "arms" in kw:
            kw["arms"] = tuple(kw["arms"])
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(model=model, engine=eng, forest=fcfg, **kw)

    def to_dict(self):
        return {"model": models.spec_to_dict(self.model), "trainSource": self.train_source,
                "D": self.D, "trials": self.trials, "iterations": self.iterations,
                "engine": self.engine.to_dict(), "arms": list(self.arms), "seed": self.seed,
                "forest": vars(self.forest).copy(), "longIterations": self.long_iterations,
                "maxTargetsPerExample": self.max_targets_per_example}


def load_config(path):
    with open(path) as fh:
        d = json.load(fh)
    # a bare model JSON ({"model": "circle", ...}) is wrapped with default settings
    if not isinstance(d.get("model"), dict):
        d = {"model": d}
    return ExperimentConfig.from_dict(d)


def derive_seed(seed, stream, index):
    """Independent per-(stream, index) seeds from one experiment seed."""
    return int(np.random.SeedSequence([seed, stream, index]).generate_state(1)[0])


TRAIN_STREAM, TEST_STREAM = 1, 2


# -- metrics ---------------------------------------------------------------

def _mean(m):
    return np.atleast_1d(np.asarray(expfam.mean_of(m), dtype=float))


def metric_names(spec):
    if isinstance(spec, models.CircleSpec):
        return ["centerError", "radiusError"]
    if isinstance(spec, models.SquareSpec):
        return ["centerError", "sideLengthError", "colourError"]
    if isinstance(spec, models.FaceSpec):
        return ["lightAngleError", "reflectanceRMSE"]
    return []


def light_angle(est, truth):
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    ne, nt = np.linalg.norm(est), np.linalg.norm(truth)
    if ne == 0 or nt == 0:
        return math.pi / 2
    return float(math.acos(np.clip(est @ truth / (ne * nt), -1.0, 1.0)))


def compute_metrics(spec, beliefs, latents):
    """Errors of posterior means against ground truth.

    beliefs: variable id -> message (posterior marginals or predictions).
    """
    try:
        if isinstance(spec, models.CircleSpec):
            return {"centerError": float(np.linalg.norm(_mean(beliefs["c"]) - latents["c"])),
                    "radiusError": float(abs(_mean(beliefs["r"])[0] - latents["r"]))}
        if isinstance(spec, models.SquareSpec):
            col = np.array([_mean(beliefs["fg"])[0], _mean(beliefs["bg"])[0]])
            return {"centerError": float(np.linalg.norm(_mean(beliefs["c"]) - latents["c"])),
                    "sideLengthError": float(abs(_mean(beliefs["l"])[0] - latents["l"])),
                    "colourError": float(np.linalg.norm(
                        col - np.array([latents["fg"], latents["bg"]])))}
        if isinstance(spec, models.FaceSpec):
            H, W = spec.height, spec.width
            r = np.array([[_mean(beliefs[models.var_id("r", i, j)])[0] for j in range(W)]
                          for i in range(H)])
            return {"lightAngleError": light_angle(_mean(beliefs["l"]), latents["l"]),
                    "reflectanceRMSE": float(np.sqrt(np.mean((r - latents["r"]) ** 2)))}
    except KeyError as exc:
        raise GraphError(f"missing tracked variable {exc}") from None
    raise ConfigError(f"no metrics for {spec!r}")


def tracked_variables(spec, g):
    if isinstance(spec, models.CircleSpec):
        return ["c", "r"]
    if isinstance(spec, models.SquareSpec):
        return ["c", "l", "fg", "bg"]
    if isinstance(spec, models.FaceSpec):
        return ["l"] + g.vars_named("r")
    return [v.id for v in g.variables if v.layer > 0]


# -- training --------------------------------------------------------------

def stages(attachments, g):
    """Attachments grouped by target layer, lowest first."""
    by = {}
    for a in attachments:
        by.setdefault(g.var(a.targets[0]).layer, []).append(a)
    return [by[k] for k in sorted(by)]


def train_predictors(cfg, g=None, attachments=None, extra=()):
    """Stagewise training: upper-layer contexts are generated with the
    already-trained lower predictors active."""
    spec = cfg.model
    g = g if g is not None else models.build(spec)
    atts = attachments if attachments is not None else models.make_attachments(spec, g)
    atts = list(atts) + list(extra)
    for a in atts:
        if a.per_variable:
            a.max_targets_per_example = cfg.max_targets_per_example
    seeds = [derive_seed(cfg.seed, TRAIN_STREAM, k) for k in range(cfg.D)]
    report = {"discarded": 0, "skipped": 0, "examples": {}}
    cache = None
    for stage in stages(atts, g):
        lower = [a for a in atts if a.trained]
        pending = lower + stage
        if cfg.train_source == "convergence":
            problems = [models.sample(spec, s)[1] for s in seeds]
            rep = cmp.gen_training_from_convergence(g, problems, pending, cfg.engine,
                                                    cfg.long_iterations)
        else:
            if cache is None:
                cache = [models.sample(spec, s) for s in seeds]
            data = [(obs, {t: models.latent_value(lat, t) for a in stage for t in a.targets})
                    for lat, obs in cache]
            rep = cmp.gen_training_from_labels(g, data, pending, cfg.engine)
        report["discarded"] += rep.discarded
        report["skipped"] += rep.skipped
        for k, a in enumerate(stage):
            ex = rep.examples.get(a.name, [])
            report["examples"][a.name] = len(ex)
            fcfg = replace(cfg.forest, seed=derive_seed(cfg.seed, 3, len(report["examples"])))
            cmp.train_attachment(a, ex, fcfg)
    return atts, report


# -- arms ------------------------------------------------------------------

def arm_attachments(arm, atts, g):
    """Copies of the attachments enabled for one arm."""
    st = stages(atts, g)
    lowest = {a.name for a in st[0]} if st else set()
    out = []
    for a in atts:
        on = arm in (CMP, CMP2, FOREST_ONLY) or (arm == CMP1 and a.name in lowest)
        out.append(replace(a, enabled=on and a.trained))
    return out


def run_arm(arm, cfg, g, atts, obs, latents, track):
    """Per-iteration beliefs of the tracked variables for one arm and problem."""
    spec = cfg.model
    if arm == MP:
        gc = condition_observations(g, obs)
        tr = run_inference(gc, cfg.engine_for_run, consensus=False, track=track)
        return tr, [tr.beliefs[t] for t in range(1, tr.iterations + 1)]
    live = arm_attachments(arm, atts, g)
    gc = condition_observations(g.with_predictors(live), obs)
    if arm == FOREST_ONLY:
        tr = run_inference(gc, cfg.engine_for_run, consensus=True, track=track,
                           stop_after_consensus=True)
        pred = dict(tr.final)
        for vid, m in _consensus_predictions(tr, live).items():
            pred[vid] = m
        snap = {vid: pred[vid] for vid in track}
        return tr, [snap] * cfg.iterations
    tr = run_inference(gc, cfg.engine_for_run, consensus=True, track=track)
    return tr, [tr.beliefs[t] for t in range(1, tr.iterations + 1)]


def _consensus_predictions(trace, attachments):
    """Raw consensus messages keyed by target variable."""
    out = {}
    for att in attachments:
        for vid, m in zip(att.targets, trace.consensus.get(att.name, [])):
            out[vid] = m
    return out


def dataset_hash(problems):
    h = hashlib.sha256()
    for obs in problems:
        for k in sorted(obs):
            h.update(k.encode())
            h.update(np.asarray(obs[k], dtype=float).tobytes())
    return h.hexdigest()


def run_experiment(cfg, out_dir=None, attachments=None, progress=False):
    """Train (if needed), run every arm, write metrics CSV and summary JSON.

    Returns a dict with the metric rows, per-arm summaries and diagnostics.
    """
    t0 = time.perf_counter()
    spec = cfg.model
    g = models.build(spec)
    cfg.engine_for_run = replace(cfg.engine, iterations=cfg.iterations, convergence_tol=None)
    atts, train_report = [], {}
    extra = []
    if FOREST_ONLY in cfg.arms and isinstance(spec, models.CircleSpec):
        extra = [models.radius_attachment(g)]
    if attachments is not None:
        atts = attachments
    elif cfg.needs_training:
        try:
            atts, train_report = train_predictors(cfg, g, extra=extra)
        except (ForestError, ValueError) as exc:
            raise RuntimeError(f"predictor training failed: {exc}") from exc
    t_train = time.perf_counter() - t0
    # the direct radius predictor only serves the forest-only arm
    extra_names = {a.name for a in extra}
    names = metric_names(spec)
    problems = [models.sample(spec, derive_seed(cfg.seed, TEST_STREAM, k))
                for k in range(cfg.trials)]
    rows, schedule_ok, events = [], True, {}
    for k, (lat, obs) in enumerate(problems):
        track = tracked_variables(spec, g)
        for arm in cfg.arms:
            arm_atts = [a for a in atts if arm == FOREST_ONLY or a.name not in extra_names]
            try:
                tr, snaps = run_arm(arm, cfg, g, arm_atts, obs, lat, track)
                vals = [compute_metrics(spec, s, lat) for s in snaps]
                try:
                    check_schedule_invariants(tr.actions)
                except AssertionError as exc:
                    schedule_ok = False
                    log.error("schedule invariant violated: %s", exc)
                for e in tr.events:
                    events[e[0]] = events.get(e[0], 0) + 1
            except Exception as exc:  # record a sentinel and continue
                log.warning("arm %s problem %d failed: %s", arm, k, exc)
                events["failed"] = events.get("failed", 0) + 1
                vals = [{m: -1.0 for m in names}] * cfg.iterations
            while len(vals) < cfg.iterations:
                vals.append(vals[-1])
            for it, v in enumerate(vals, start=1):
                for m in names:
                    rows.append((arm, k, it, m, float(v[m])))
        if progress:
            print(f"problem {k + 1}/{cfg.trials}", file=sys.stderr)
    summary = summarize(rows, cfg)
    result = {"rows": rows, "summary": summary, "train": train_report,
              "scheduleInvariants": schedule_ok, "events": events,
              "datasetHash": dataset_hash([o for _, o in problems]),
              "seconds": {"train": t_train, "total": time.perf_counter() - t0},
              "attachments": atts}
    if out_dir is not None:
        write_results(result, cfg, out_dir)
    return result


def summarize(rows, cfg):
    """Per arm, metric and iteration: mean and standard error (sentinels excluded)."""
    acc = {}
    for arm, _, it, m, v in rows:
        if v < 0:
            continue
        acc.setdefault(arm, {}).setdefault(m, {}).setdefault(it, []).append(v)
    out = {}
    for arm, ms in acc.items():
        out[arm] = {}
        for m, its in ms.items():
            mean = [float(np.mean(its[i])) for i in sorted(its)]
            se = [float(np.std(its[i], ddof=1) / math.sqrt(len(its[i])))
                  if len(its[i]) > 1 else 0.0 for i in sorted(its)]
            out[arm][m] = {"mean": mean, "se": se}
    return out


def write_results(result, cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "problem_id", "iteration", "metric", "value"])
        for r in sorted(result["rows"], key=lambda r: (r[0], r[1], r[2], r[3])):
            w.writerow(r)
    summary = {"config": cfg.to_dict(), "datasetHash": result["datasetHash"],
               "arms": result["summary"], "train": result["train"],
               "scheduleInvariants": result["scheduleInvariants"],
               "events": result["events"], "seconds": result["seconds"]}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    fdir = os.path.join(out_dir, "forests")
    for a in result["attachments"]:
        if a.trained:
            os.makedirs(fdir, exist_ok=True)
            a.forest.save(os.path.join(fdir, f"{a.name}.json"))


# -- datasets --------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def write_dataset(spec, seeds, path):
    with open(path, "w") as fh:
        for s in seeds:
            lat, obs = models.sample(spec, s)
            fh.write(json.dumps({"seed": int(s),
                                 "latents": {k: _jsonable(v) for k, v in lat.items()},
                                 "observations": {k: _jsonable(v) for k, v in obs.items()}},
                                sort_keys=True) + "\n")


def read_dataset(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                lat = {k: np.asarray(v) if isinstance(v, list) else v
                       for k, v in d["latents"].items()}
                out.append((d["seed"], lat, d["observations"]))
    return out


def write_pgm(img, path):
    """8-bit binary PGM of an image scaled to its own min/max."""
    img = np.asarray(img, dtype=float)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def observation_image(spec, obs):
    H, W = spec.height, spec.width
    return np.array([[obs[models.var_id("x", i, j)] for j in range(W)] for i in range(H)])


# -- CLI -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser():
    p = _Parser(prog="consensus-mp", description="Consensus message passing experiments")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="model or experiment JSON")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=".")
        sp.add_argument("--arm", action="append", choices=ARMS)
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("sample", help="sample a dataset from a model")
    common(sp)
    sp.add_argument("--count", type=int, default=10)
    sp = sub.add_parser("train", help="train predictors and write forest JSON")
    common(sp)
    sp = sub.add_parser("infer", help="run one problem and write its trace")
    common(sp)
    sp.add_argument("--forests", default=None, help="directory of trained forest JSON")
    sp.add_argument("--problem", type=int, default=0)
    sp = sub.add_parser("experiment", help="run the full protocol")
    common(sp)
    sp = sub.add_parser("check", help="run the oracle validation suites")
    common(sp, config=False)
    sp.add_argument("--instances", type=int, default=50)
    return p


def _load(args):
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.arm:
            cfg = replace(cfg, arms=tuple(args.arm))
    except (ValueError, TypeError) as exc:    # bad JSON, spec, engine or forest settings
        raise ConfigError(str(exc)) from exc
    return cfg


def cmd_sample(args):
    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    seeds = [derive_seed(cfg.seed, TEST_STREAM, k) for k in range(args.count)]
    write_dataset(cfg.model, seeds, os.path.join(args.out, "dataset.jsonl"))
    if isinstance(cfg.model, (models.SquareSpec, models.FaceSpec)):
        for k, s in enumerate(seeds):
            _, obs = models.sample(cfg.model, s)
            write_pgm(observation_image(cfg.model, obs), os.path.join(args.out, f"x{k:04d}.pgm"))
    return 0


def cmd_train(args):
    cfg = _load(args)
    g = models.build(cfg.model)
    atts, report = train_predictors(cfg, g)
    os.makedirs(args.out, exist_ok=True)
    for a in atts:
        if a.trained:
            a.forest.save(os.path.join(args.out, f"{a.name}.json"))
    with open(os.path.join(args.out, "train_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return 0


def load_forests(spec, g, directory):
    atts = models.make_attachments(spec, g)
    for a in atts:
        path = os.path.join(directory, f"{a.name}.json")
        if os.path.exists(path):
            a.forest = Forest.load(path)
    return atts


def cmd_infer(args):
    cfg = _load(args)
    spec = cfg.model
    g = models.build(spec)
    atts = load_forests(spec, g, args.forests) if args.forests else []
    lat, obs = models.sample(spec, derive_seed(cfg.seed, TEST_STREAM, args.problem))
    cfg.engine_for_run = replace(cfg.engine, iterations=cfg.iterations, convergence_tol=None)
    arm = (args.arm or [CMP if atts else MP])[0]
    track = tracked_variables(spec, g)
    _, snaps = run_arm(arm, cfg, g, atts, obs, lat, track)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "iteration", "variable", "mean", "variance"])
        for it, snap in enumerate(snaps, start=1):
            for vid in track:
                m = snap[vid]
                mean = np.ravel(expfam.mean_of(m))
                var = np.ravel(np.diag(np.atleast_2d(expfam.var_of(m))))
                w.writerow([arm, it, vid, " ".join(f"{x:.10g}" for x in mean),
                            " ".join(f"{x:.10g}" for x in var)])
    metrics = compute_metrics(spec, snaps[-1], lat)
    print(json.dumps({"arm": arm, "final": metrics}, sort_keys=True))
    return 0


def cmd_experiment(args):
    cfg = _load(args)
    res = run_experiment(cfg, args.out, progress=args.verbose)
    final = {arm: {m: v["mean"][-1] for m, v in ms.items()}
             for arm, ms in res["summary"].items()}
    print(json.dumps({"final": final, "datasetHash": res["datasetHash"]}, sort_keys=True))
    return 0 if res["scheduleInvariants"] else 2


def cmd_check(args):
    from . import oracles
    ok = True
    worst, good = oracles.run_conjugate_oracle()
    print(f"conjugate chain: max error {worst:.3g} {'ok' if good else 'FAIL'}")
    ok &= good
    for name, (err, good) in oracles.run_quadrature_oracles(args.instances).items():
        print(f"{name} quadrature: max relative error {err:.3g} {'ok' if good else 'FAIL'}")
        ok &= good
    return 0 if ok else 2


COMMANDS = {"sample": cmd_sample, "train": cmd_train, "infer": cmd_infer,
            "experiment": cmd_experiment, "check": cmd_check}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, GraphError, models.SpecError, FileNotFoundError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
