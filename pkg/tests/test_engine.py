import numpy as np
import pytest

from consensus_mp import models
from consensus_mp.cmp import PredictorAttachment
from consensus_mp.engine import (CONSENSUS, RETRACT, STANDARD, EngineConfig, damp_message,
                                 check_schedule_invariants, make_schedule, run_inference)
from consensus_mp.expfam import Bernoulli, Gaussian, MvGaussian, PointMass
from consensus_mp.factors import EP, VMP, GaussianNoise, Sum
from consensus_mp.graph import (GraphBuilder, GraphError, condition_observations, parse_id,
                                var_id)
from consensus_mp.models import ChainSpec, build_chain, chain_posterior


class _Const:
    """Featurizer stub: no features, one row per target."""
    name = "const"
    output_family = "gaussian"
    output_dim = 1
    pair_block = None

    def __init__(self, n=1):
        self.n = n

    def __call__(self, ctx):
        return np.zeros((self.n, 1)), np.zeros((self.n, 1))

    def describe(self):
        return {"name": self.name}


class _FixedForest:
    def __init__(self, msg):
        self.msg = msg

    def predict_many(self, T, R):
        return [self.msg] * len(T)


def chain_with_predictor(msg=Gaussian.from_mean_var(5.0, 0.01), enabled=True):
    g = build_chain(ChainSpec())
    att = PredictorAttachment("delta_top", ["top"], ["mid"], _Const(),
                              forest=_FixedForest(msg), enabled=enabled)
    return condition_observations(g.with_predictors([att]), {"x": 0.7})


class TestGraph:
    def test_ids(self):
        assert var_id("r", 3, 5) == "r[3][5]"
        assert parse_id("r[3][5]") == ("r", (3, 5))
        assert parse_id("c") == ("c", ())
        with pytest.raises(GraphError):
            parse_id("3r")

    def test_dangling_edge(self):
        b = GraphBuilder()
        b.add_var("x", layer=0)
        b.add_factor("f", GaussianNoise(1.0), "x", "nope")
        with pytest.raises(GraphError, match="dangling"):
            b.build()

    def test_family_signature(self):
        b = GraphBuilder()
        b.add_var("x", layer=0)
        b.add_var("z", "mvgaussian", 2, layer=1)
        b.add_factor("f", GaussianNoise(1.0), "x", "z")
        with pytest.raises(GraphError, match="mixed"):
            b.build()

    def test_layer_span(self):
        b = GraphBuilder()
        for vid, L in (("a", 0), ("b", 1), ("c", 3)):
            b.add_var(vid, layer=L)
        b.add_factor("f", Sum(), "a", "b", "c")
        with pytest.raises(GraphError, match="spans"):
            b.build()

    def test_missing_observations(self):
        g = build_chain(ChainSpec())
        with pytest.raises(GraphError, match="missing"):
            run_inference(g, EngineConfig(iterations=1))

    def test_unknown_observation(self):
        with pytest.raises(GraphError):
            condition_observations(build_chain(ChainSpec()), {"y": 1.0})

    def test_predictor_context_must_be_layer_below(self):
        g = build_chain(ChainSpec())
        att = PredictorAttachment("bad", ["top"], ["x"], _Const())
        with pytest.raises(GraphError, match="layer below"):
            g.with_predictors([att])

    def test_serialization_is_deterministic(self):
        a = models.build(models.CircleSpec(n_points=3)).dumps()
        b = models.build(models.CircleSpec(n_points=3)).dumps()
        assert a == b

    def test_model_sizes(self):
        sq = models.build(models.SquareSpec(width=4, height=4))
        assert len(sq.vars_named("s")) == 16
        assert sq.var("c").is_global and sq.var("c").layer == 3


class TestConjugateChain:
    @pytest.mark.parametrize("mode", [VMP, EP])
    @pytest.mark.parametrize("x", [-1.3, 0.0, 2.1])
    def test_beliefs_match_closed_form(self, mode, x):
        spec = ChainSpec()
        g = condition_observations(build_chain(spec), {"x": x})
        tr = run_inference(g, EngineConfig(iterations=20, mode=mode))
        for vid, (m, v) in chain_posterior(spec, x).items():
            assert tr.final[vid].mean == pytest.approx(m, abs=1e-8)
            assert tr.final[vid].var == pytest.approx(v, abs=1e-8)

    def test_convergence_stops_early(self):
        g = condition_observations(build_chain(ChainSpec()), {"x": 0.4})
        tr = run_inference(g, EngineConfig(iterations=50, convergence_tol=1e-12))
        assert tr.converged_at is not None and tr.converged_at < 10
        assert tr.iterations == tr.converged_at

    def test_observed_variable_stays_point_mass(self):
        g = condition_observations(build_chain(ChainSpec()), {"x": 0.4})
        tr = run_inference(g, EngineConfig(iterations=3))
        assert isinstance(tr.final["x"], PointMass)


class TestSchedule:
    def test_consensus_heads_its_layer_in_iteration_one_only(self):
        g = chain_with_predictor()
        sch = make_schedule(g)
        first = sch.describe(g, 1)
        assert (CONSENSUS, "delta_top", "top") in first
        assert all(p == STANDARD for p, _, _ in sch.describe(g, 2))
        # nothing reaches layer 2 before the consensus action
        i = first.index((CONSENSUS, "delta_top", "top"))
        assert all(g.var(t).layer < 2 for _, _, t in first[:i])

    def test_invariants_on_trace(self):
        tr = run_inference(chain_with_predictor(), EngineConfig(iterations=4))
        assert check_schedule_invariants(tr.actions)

    @pytest.mark.parametrize("actions, msg", [
        ([(1, 1, STANDARD, "up"), (2, 2, CONSENSUS, "up")], "iteration 2"),
        ([(1, 2, STANDARD, "up"), (1, 2, CONSENSUS, "up")], "after standard"),
        ([(1, 2, STANDARD, "up"), (1, 1, STANDARD, "up")], "visited after"),
        ([(1, 1, STANDARD, "down"), (1, 2, STANDARD, "up")], "downward sweep"),
    ])
    def test_invariant_violations_detected(self, actions, msg):
        with pytest.raises(AssertionError, match=msg):
            check_schedule_invariants(actions)


class TestConsensus:
    def test_disabled_predictor_is_bit_exact(self):
        plain = run_inference(condition_observations(build_chain(ChainSpec()), {"x": 0.7}),
                              EngineConfig(iterations=5))
        off = run_inference(chain_with_predictor(enabled=False), EngineConfig(iterations=5))
        for a, b in zip(plain.beliefs, off.beliefs):
            for vid in a:
                np.testing.assert_array_equal(a[vid].natural(), b[vid].natural())

    def test_consensus_false_is_bit_exact(self):
        plain = run_inference(condition_observations(build_chain(ChainSpec()), {"x": 0.7}),
                              EngineConfig(iterations=5))
        off = run_inference(chain_with_predictor(), EngineConfig(iterations=5), consensus=False)
        np.testing.assert_array_equal(plain.final["top"].natural(), off.final["top"].natural())

    def test_consensus_retained_as_evidence(self):
        msg = Gaussian.from_mean_var(5.0, 0.01)
        tr = run_inference(chain_with_predictor(msg), EngineConfig(iterations=30))
        plain = chain_posterior(ChainSpec(), 0.7)["top"]
        assert tr.final["top"].mean > plain[0] + 1.0
        assert tr.consensus["delta_top"][0].mean == pytest.approx(5.0)

    def test_retract_restores_plain_fixed_point(self):
        cfg = EngineConfig(iterations=30, consensus_retention=RETRACT)
        tr = run_inference(chain_with_predictor(), cfg)
        m, v = chain_posterior(ChainSpec(), 0.7)["top"]
        assert tr.final["top"].mean == pytest.approx(m, abs=1e-8)
        assert tr.final["top"].var == pytest.approx(v, abs=1e-8)

    def test_stop_after_consensus(self):
        tr = run_inference(chain_with_predictor(), EngineConfig(iterations=5),
                           stop_after_consensus=True, capture=True)
        assert tr.iterations == 0
        assert "delta_top" in tr.contexts
        assert tr.final["top"].mean > 1.0

    def test_failing_predictor_degrades_to_plain(self):
        class Broken(_FixedForest):
            def predict_many(self, T, R):
                raise RuntimeError("boom")
        g = build_chain(ChainSpec())
        att = PredictorAttachment("delta_top", ["top"], ["mid"], _Const(),
                                  forest=Broken(None))
        gc = condition_observations(g.with_predictors([att]), {"x": 0.7})
        tr = run_inference(gc, EngineConfig(iterations=10))
        assert ("consensus-failed", "delta_top", 1) in tr.events
        m, _ = chain_posterior(ChainSpec(), 0.7)["top"]
        assert tr.final["top"].mean == pytest.approx(m, abs=1e-8)


class TestConfig:
    def test_round_trip(self):
        cfg = EngineConfig(iterations=7, mode=EP, damping={("BoxMembership", "c"): 0.95},
                           convergence_tol=1e-6, consensus_retention=RETRACT)
        assert EngineConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("kw", [{"mode": "BP"}, {"damping": {("Gate", "z"): 0.0}},
                                    {"consensus_retention": "keep"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EngineConfig(**kw)

    def test_damping_is_convex_in_natural_parameters(self):
        old = Gaussian.from_mean_var(0.0, 1.0)
        new = Gaussian.from_mean_var(2.0, 0.5)
        d = damp_message(old, new, 0.25)
        np.testing.assert_allclose(d.natural(), 0.25 * new.natural() + 0.75 * old.natural())
        mv = damp_message(MvGaussian.uniform(2), MvGaussian.from_mean_cov([1, 1], np.eye(2)), 0.5)
        np.testing.assert_allclose(mv.K, 0.5 * np.eye(2))
        assert damp_message(Bernoulli(0.0), Bernoulli(2.0), 0.5).log_odds == pytest.approx(1.0)
