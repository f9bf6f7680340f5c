"""Layered factor graphs.

Variables carry a layer index (0 = observations, increasing upward) and are
addressed by structured ids such as ``"r[3][5]"`` so that featurizers can
recover pixel coordinates. Graphs are not mutated after construction; all
inference state lives in the engine.
"""
import json
import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import expfam
from .factors import (BoxMembership, FactorKind, Gate, GaussianNoise, InnerProduct,
                      Prior, Product, Rotation, SoftSymmetry, Sum)


class GraphError(ValueError):
    pass


_ID_RE = re.compile(r"^([A-Za-z_]\w*)((?:\[\d+\])*)$")


def parse_id(vid):
    """``"r[3][5]"`` -> ``("r", (3, 5))``."""
    m = _ID_RE.match(vid)
    if not m:
        raise GraphError(f"malformed variable id {vid!r}")
    idx = tuple(int(i) for i in re.findall(r"\[(\d+)\]", m.group(2)))
    return m.group(1), idx


def var_id(name, *idx):
    return name + "".join(f"[{i}]" for i in idx)


def id_sort_key(vid):
    return parse_id(vid)


@dataclass(frozen=True)
class VariableNode:
    id: str
    family: str
    dim: int = 1
    layer: int = 0
    is_global: bool = False
    observed: object = None

    def uniform(self):
        return expfam.uniform_like(self.family, self.dim)


@dataclass(frozen=True)
class FactorNode:
    id: str
    kind: FactorKind
    edges: tuple


# role -> (family, dim) for every kind; dim None means "any"
_SIGNATURES = {
    Prior: {"x": (None, None)},
    GaussianNoise: {"x": (None, None), "z": (None, None)},
    Sum: {"sum": (None, None), "a": (None, None), "b": (None, None)},
    SoftSymmetry: {"a": (None, None), "b": (None, None)},
    Rotation: {"p": ("mvgaussian", 2), "a": ("gaussian", 1), "r": ("gaussian", 1)},
    Gate: {"z": ("gaussian", 1), "s": ("bernoulli", 1), "fg": ("gaussian", 1),
           "bg": ("gaussian", 1)},
    BoxMembership: {"s": ("bernoulli", 1), "c": ("mvgaussian", 2), "l": ("gaussian", 1)},
    InnerProduct: {"s": ("gaussian", 1), "n": ("mvgaussian", 3), "l": ("mvgaussian", 3)},
    Product: {"z": ("gaussian", 1), "s": ("gaussian", 1), "r": ("gaussian", 1)},
}


@dataclass
class FactorGraph:
    variables: list
    factors: list
    predictors: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        self._vindex = {v.id: i for i, v in enumerate(self.variables)}
        self._findex = {f.id: i for i, f in enumerate(self.factors)}
        if len(self._vindex) != len(self.variables):
            raise GraphError("duplicate variable ids")
        if len(self._findex) != len(self.factors):
            raise GraphError("duplicate factor ids")

    def var(self, vid):
        return self.variables[self._vindex[vid]]

    def var_index(self, vid):
        return self._vindex[vid]

    def factor(self, fid):
        return self.factors[self._findex[fid]]

    def has_var(self, vid):
        return vid in self._vindex

    @property
    def layers(self):
        top = max(v.layer for v in self.variables)
        out = [[] for _ in range(top + 1)]
        for v in self.variables:
            out[v.layer].append(v.id)
        return out

    def vars_named(self, name):
        """All variables whose id stem is ``name``, in canonical order."""
        ids = [v.id for v in self.variables if parse_id(v.id)[0] == name]
        return sorted(ids, key=id_sort_key)

    def validate(self):
        """Check edges, family signatures and layer consistency."""
        for f in self.factors:
            sig = _SIGNATURES.get(type(f.kind))
            if len(f.edges) != len(f.kind.roles):
                raise GraphError(f"{f.id}: expected {len(f.kind.roles)} edges")
            for role, vid in zip(f.kind.roles, f.edges):
                if vid not in self._vindex:
                    raise GraphError(f"{f.id}: dangling edge to {vid!r}")
                fam, dim = sig[role] if sig else (None, None)
                v = self.var(vid)
                if fam is not None and (v.family != fam or v.dim != dim):
                    raise GraphError(f"{f.id}: role {role} needs {fam}[{dim}], "
                                     f"got {v.family}[{v.dim}] for {vid}")
            if isinstance(f.kind, (GaussianNoise, Sum, SoftSymmetry)):
                fams = {(self.var(v).family, self.var(v).dim) for v in f.edges}
                if len(fams) != 1:
                    raise GraphError(f"{f.id}: mixed families {fams}")
            local = {self.var(v).layer for v in f.edges if not self.var(v).is_global}
            if local and max(local) - min(local) > 1:
                raise GraphError(f"{f.id}: spans layers {sorted(local)}")
            for vid in f.edges:
                v = self.var(vid)
                if v.is_global and local and v.layer < max(local):
                    raise GraphError(f"{f.id}: global {vid} sits below its factor")
        for v in self.variables:
            if v.layer < 0:
                raise GraphError(f"{v.id}: negative layer")
        for att in self.predictors:
            att.check(self)
        return self

    def with_predictors(self, predictors):
        g = FactorGraph(self.variables, self.factors, list(predictors), self.name)
        for att in g.predictors:
            att.check(g)
        return g

    def to_dict(self):
        """Deterministic structural description (no forests)."""
        def obs(v):
            return None if v.observed is None else expfam.to_dict(v.observed)
        return {
            "name": self.name,
            "variables": [{"id": v.id, "family": v.family, "dim": v.dim, "layer": v.layer,
                           "global": v.is_global, "observed": obs(v)} for v in self.variables],
            "factors": [{"id": f.id, "kind": f.kind.name, "edges": list(f.edges),
                         "params": _jsonable(f.kind.params())} for f in self.factors],
            "predictors": [att.describe() for att in self.predictors],
        }

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


class GraphBuilder:
    """Small helper used by the model builders."""

    def __init__(self, name=""):
        self.name = name
        self.variables = []
        self.factors = []

    def add_var(self, vid, family="gaussian", dim=1, layer=0, is_global=False):
        self.variables.append(VariableNode(vid, family, dim, layer, is_global))
        return vid

    def add_factor(self, fid, kind, *edges):
        self.factors.append(FactorNode(fid, kind, tuple(edges)))
        return fid

    def add_prior(self, vid, message):
        return self.add_factor(f"prior:{vid}", Prior(message), vid)

    def build(self):
        return FactorGraph(self.variables, self.factors, [], self.name).validate()


def build_graph(spec):
    """Build the factor graph for a model spec (dataclass or JSON dict)."""
    from . import models
    if isinstance(spec, dict):
        spec = models.spec_from_dict(spec)
    return models.build(spec)


def condition_observations(g, data):
    """Return a copy of ``g`` with the given variables observed.

    ``data`` maps variable ids to values (floats, vectors, or point masses).
    Every variable already declared observed in ``g`` keeps its value unless
    overridden.
    """
    variables = []
    for v in g.variables:
        if v.id in data:
            val = data[v.id]
            if not isinstance(val, expfam.PointMass):
                val = expfam.PointMass(val if v.dim == 1 else np.asarray(val, dtype=float))
            if val.dim != v.dim:
                raise GraphError(f"{v.id}: observation has dim {val.dim}, expected {v.dim}")
            v = replace(v, observed=val)
        variables.append(v)
    unknown = set(data) - {v.id for v in g.variables}
    if unknown:
        raise GraphError(f"observations for unknown variables: {sorted(unknown)[:5]}")
    return FactorGraph(variables, g.factors, list(g.predictors), g.name)


def observation_ids(g):
    return [v.id for v in g.variables if v.layer == 0]


def check_fully_observed(g):
    missing = [v.id for v in g.variables if v.layer == 0 and v.observed is None]
    if missing:
        raise GraphError(f"missing observations for {missing[:5]}"
                         f"{'...' if len(missing) > 5 else ''}")
