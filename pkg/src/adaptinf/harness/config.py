"""Experiment configuration: YAML schema, defaults, and validation.

Every key is optional except ``scenario``, ``policy``, ``methods`` and ``T``.
Unknown keys are rejected with their dotted path and source line.

Example::

    scenario: 1
    arms: 4
    policy: uniform
    methods: [maipwm_external, ipw]
    T: 2000
    reps: 500
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from ..env import (HETEROSKEDASTIC, HOMOSKEDASTIC, FeaturePool, Scenario, build_feature_pool, builtin_scenario,
                   default_threshold)
from ..errors import AdaptInfError, ConfigError
from ..inference import METHODS
from ..mestim import LINEAR, LOGISTIC, WorkingModel, dose_model, onehot_features_model, onehot_model
from ..nuisance import DEFAULT_CADENCE, DEFAULT_K, DEFAULT_VARIANCE_FLOOR
from ..policies import PolicyKind

DEFAULT_CHECKPOINTS = (500, 1000, 2000, 5000, 10000)

_TOP_KEYS = {
    "scenario", "arms", "policy", "methods", "model", "evaluation_policy", "binarize", "T", "checkpoints",
    "alpha", "reps", "seed", "split_ratio", "split_training", "external_ratio", "nuisance", "pool",
    "workers", "out",
}
_SCENARIO_KEYS = {"K", "beta1", "beta2", "gamma", "mode", "base_noise_sd", "name"}
_POLICY_KEYS = {"variant", "epsilon", "alpha", "ucb_mix", "clip", "draws", "floor"}
_MODEL_KEYS = {"family", "kind", "doses"}
_NUISANCE_KEYS = {"k", "cadence", "variance_floor", "prior_mean", "prior_second"}
_POOL_KEYS = {"source", "n", "p", "f", "v", "seed", "path", "outcome", "features", "k"}


@dataclass(frozen=True)
class NuisanceConfig:
    k: int = DEFAULT_K
    cadence: int = DEFAULT_CADENCE
    variance_floor: float = DEFAULT_VARIANCE_FLOOR
    prior_mean: float = 0.0
    prior_second: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description.

    Attributes:
        scenario: Generative scenario (arm means and noise).
        policy: Action-selection rule.
        methods: Inference methods to run on every trajectory.
        model_kind: ``onehot``, ``onehot_features`` or ``dose``.
        family: ``linear`` or ``logistic``.
        pe: Evaluation policy, one probability per arm.
        binarize: False for raw outcomes, True for the pool-mean threshold, or a threshold.
        T: Rounds per trajectory.
        checkpoints: Increasing analysis times, all at most ``T``.
        alpha: Miscoverage level.
        reps: Number of replications.
        seed: Base seed.
        split_ratio: Probability a round goes to the features-only history.
        split_training: Train nuisances only on the estimation half.
        external_ratio: External pool size as a multiple of the checkpoint.
        nuisance: Nearest-neighbor learner settings.
        pool: Feature pool specification (passed to ``build_feature_pool``).
        workers: Worker processes.
        out: Output directory.
    """

    scenario: Scenario
    policy: PolicyKind
    methods: tuple
    T: int
    model_kind: str = "onehot"
    family: str = LINEAR
    doses: tuple | None = None
    pe: np.ndarray | None = None
    binarize: Any = False
    checkpoints: tuple = ()
    alpha: float = 0.2
    reps: int = 100
    seed: int = 0
    split_ratio: float = 0.5
    split_training: bool = False
    external_ratio: float = 1.0
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    pool: dict = field(default_factory=lambda: {"source": "synthetic"})
    workers: int = 1
    out: str = "results"

    @property
    def K(self) -> int:
        return self.scenario.K

    def working_model(self) -> WorkingModel:
        if self.model_kind == "onehot":
            return onehot_model(self.K, self.family)
        if self.model_kind == "onehot_features":
            return onehot_features_model(self.K, int(self.pool.get("p", 5)), self.family)
        return dose_model(self.doses, self.family)

    def build_pool(self) -> FeaturePool:
        return build_feature_pool(self.pool)

    def threshold(self, pool: FeaturePool) -> float | None:
        if self.binarize is False:
            return None
        if self.binarize is True:
            return default_threshold(self.scenario, pool, self.pe)
        return float(self.binarize)

    def external_size(self) -> int:
        if "maipwm_external" not in self.methods:
            return 0
        return math.ceil(self.external_ratio * self.T)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


class _Doc:
    """Parsed YAML plus a map from dotted key paths to source lines."""

    def __init__(self, text: str, source: str):
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"{source}: cannot parse YAML: {getattr(exc, 'problem', exc)}",
                              line=mark.line + 1 if mark else None) from None
        self.lines: dict[str, int] = {}
        if node is None:
            self.data = {}
            return
        self._index(node, "")
        self.data = yaml.safe_load(text)
        if not isinstance(self.data, dict):
            raise ConfigError("top level must be a mapping", line=node.start_mark.line + 1)

    def _index(self, node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                self.lines[path] = k.start_mark.line + 1
                self._index(v, path)

    def line(self, key: str) -> int | None:
        # a missing nested key points at its nearest present parent
        while key:
            if key in self.lines:
                return self.lines[key]
            key = key.rpartition(".")[0]
        return None


class _Builder:
    def __init__(self, doc: _Doc):
        self.doc = doc

    def fail(self, key: str, message: str):
        raise ConfigError(message, key=key, line=self.doc.line(key))

    def check_keys(self, mapping, allowed, prefix=""):
        for k in mapping:
            if k not in allowed:
                path = f"{prefix}.{k}" if prefix else str(k)
                self.fail(path, f"unknown key (allowed: {', '.join(sorted(allowed))})")

    def number(self, key, val, kind=float, lo=None, hi=None, lo_open=False, hi_open=False):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.fail(key, f"expected a number, got {val!r}")
        if kind is int and (not float(val).is_integer()):
            self.fail(key, f"expected an integer, got {val!r}")
        val = kind(val)
        if lo is not None and (val < lo or (lo_open and val == lo)):
            self.fail(key, f"must be {'>' if lo_open else '>='} {lo}, got {val}")
        if hi is not None and (val > hi or (hi_open and val == hi)):
            self.fail(key, f"must be {'<' if hi_open else '<='} {hi}, got {val}")
        return val

    def mapping(self, key, val):
        if isinstance(val, str):
            return {"variant" if key == "policy" else "source": val}
        if not isinstance(val, dict):
            self.fail(key, f"expected a mapping, got {type(val).__name__}")
        return val

    def scenario(self, d) -> Scenario:
        if "scenario" not in d:
            self.fail("scenario", "required key missing")
        raw = d["scenario"]
        arms = d.get("arms")
        if arms is not None:
            arms = self.number("arms", arms, int, lo=1)
        try:
            if isinstance(raw, (int, str)) and not isinstance(raw, bool):
                return builtin_scenario(raw, arms)
            if not isinstance(raw, dict):
                self.fail("scenario", "expected a scenario id or a mapping")
            self.check_keys(raw, _SCENARIO_KEYS, "scenario")
            for req in ("K", "beta1", "beta2"):
                if req not in raw:
                    self.fail(f"scenario.{req}", "required key missing")
            mode = raw.get("mode", HOMOSKEDASTIC)
            if mode not in (HOMOSKEDASTIC, HETEROSKEDASTIC):
                self.fail("scenario.mode", f"expected {HOMOSKEDASTIC} or {HETEROSKEDASTIC}")
            scn = Scenario(self.number("scenario.K", raw["K"], int, lo=1), raw["beta1"], raw["beta2"],
                           raw.get("gamma"), float(raw.get("base_noise_sd", 1.0)), mode,
                           name=str(raw.get("name", "custom")))
        except AdaptInfError as exc:
            if isinstance(exc, ConfigError):
                raise
            self.fail("scenario", str(exc))
        if arms is not None and arms != scn.K:
            self.fail("arms", "arms only applies to built-in scenarios")
        return scn

    def policy(self, d) -> PolicyKind:
        if "policy" not in d:
            self.fail("policy", "required key missing")
        raw = self.mapping("policy", d["policy"])
        self.check_keys(raw, _POLICY_KEYS, "policy")
        kw = dict(raw)
        if "clip" in kw:
            clip = kw["clip"]
            if not isinstance(clip, (list, tuple)) or len(clip) != 2:
                self.fail("policy.clip", "expected a two-element list")
            kw["clip"] = tuple(float(c) for c in clip)
        try:
            return PolicyKind(**kw)
        except (AdaptInfError, TypeError) as exc:
            self.fail("policy", str(exc))

    def methods(self, d) -> tuple:
        if "methods" not in d:
            self.fail("methods", "required key missing")
        raw = d["methods"]
        if isinstance(raw, str):
            raw = [raw]
        if not isinstance(raw, list) or not raw:
            self.fail("methods", "method list must be nonempty")
        for m in raw:
            if m not in METHODS:
                self.fail("methods", f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if len(set(raw)) != len(raw):
            self.fail("methods", "duplicate method")
        return tuple(raw)

    def model(self, d, K):
        raw = d.get("model", {})
        if isinstance(raw, str):
            raw = {"kind": raw}
        if not isinstance(raw, dict):
            self.fail("model", "expected a mapping")
        self.check_keys(raw, _MODEL_KEYS, "model")
        family = raw.get("family", LINEAR)
        if family not in (LINEAR, LOGISTIC):
            self.fail("model.family", f"expected {LINEAR} or {LOGISTIC}")
        kind = raw.get("kind", "onehot")
        if kind not in ("onehot", "onehot_features", "dose"):
            self.fail("model.kind", "expected onehot, onehot_features or dose")
        doses = None
        if kind == "dose":
            doses = raw.get("doses")
            if not isinstance(doses, list) or len(doses) != K:
                self.fail("model.doses", f"dose model needs a list of {K} doses")
            doses = tuple(float(x) for x in doses)
        elif "doses" in raw:
            self.fail("model.doses", "doses only apply to the dose model")
        return kind, family, doses

    def pe(self, d, K):
        raw = d.get("evaluation_policy", "uniform")
        if raw == "uniform":
            return np.full(K, 1.0 / K)
        if not isinstance(raw, list) or len(raw) != K:
            self.fail("evaluation_policy", f"expected 'uniform' or a list of {K} probabilities")
        pe = np.array([self.number("evaluation_policy", x, float, lo=0.0) for x in raw])
        if abs(pe.sum() - 1.0) > 1e-10:
            self.fail("evaluation_policy", f"probabilities sum to {pe.sum():.12g}")
        return pe

    def sub(self, d, key, allowed):
        raw = d.get(key, {})
        raw = self.mapping(key, raw)
        self.check_keys(raw, allowed, key)
        return raw


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate a YAML experiment file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    doc = _Doc(text, source)
    b = _Builder(doc)
    d = doc.data
    b.check_keys(d, _TOP_KEYS)
    scn = b.scenario(d)
    policy = b.policy(d)
    methods = b.methods(d)
    kind, family, doses = b.model(d, scn.K)
    pe = b.pe(d, scn.K)
    if "T" not in d:
        b.fail("T", "required key missing")
    T = b.number("T", d["T"], int, lo=1)

    if "checkpoints" in d:
        cps = d["checkpoints"]
        if not isinstance(cps, list) or not cps:
            b.fail("checkpoints", "expected a nonempty list")
        cps = [b.number("checkpoints", c, int, lo=1) for c in cps]
        if any(c > T for c in cps):
            b.fail("checkpoints", f"checkpoint {max(cps)} exceeds T={T}")
        if sorted(set(cps)) != cps:
            b.fail("checkpoints", "checkpoints must be strictly increasing")
    else:
        cps = [c for c in DEFAULT_CHECKPOINTS if c < T] + [T]

    binarize = d.get("binarize", False)
    if not isinstance(binarize, bool):
        binarize = b.number("binarize", binarize)
    if family == LOGISTIC and binarize is False:
        b.fail("binarize", "logistic model needs binarized outcomes (true or a threshold)")
    if family == LINEAR and binarize is not False:
        b.fail("binarize", "binarized outcomes need the logistic family")

    split_ratio = b.number("split_ratio", d.get("split_ratio", 0.5), float, lo=0.0, hi=1.0)
    if "maipwm_splitting" in methods and not 0.0 < split_ratio < 1.0:
        b.fail("split_ratio", "splitting needs a ratio strictly between 0 and 1")
    if not 0.0 < split_ratio < 1.0:
        split_ratio = 0.5  # unused without splitting
    split_training = d.get("split_training", "maipwm_splitting" in methods)
    if not isinstance(split_training, bool):
        b.fail("split_training", "expected true or false")
    external_ratio = b.number("external_ratio", d.get("external_ratio", 1.0), float, lo=0.0, lo_open=True)

    nraw = b.sub(d, "nuisance", _NUISANCE_KEYS)
    nuis = NuisanceConfig(
        k=b.number("nuisance.k", nraw.get("k", DEFAULT_K), int, lo=1),
        cadence=b.number("nuisance.cadence", nraw.get("cadence", DEFAULT_CADENCE), int, lo=1),
        variance_floor=b.number("nuisance.variance_floor", nraw.get("variance_floor", DEFAULT_VARIANCE_FLOOR),
                                float, lo=0.0, lo_open=True),
        prior_mean=b.number("nuisance.prior_mean", nraw.get("prior_mean", 0.0)),
        prior_second=b.number("nuisance.prior_second", nraw.get("prior_second", 1.0)),
    )
    pool = dict(b.sub(d, "pool", _POOL_KEYS))
    pool.setdefault("source", "synthetic")
    if pool["source"] not in ("synthetic", "csv"):
        b.fail("pool.source", "expected synthetic or csv")
    if pool["source"] == "csv":
        for req in ("path", "outcome"):
            if req not in pool:
                b.fail(f"pool.{req}", "required for csv pools")
        base = Path(source).parent if source != "<string>" else Path(".")
        pool["path"] = str((base / pool["path"]).resolve())
    if kind == "onehot_features" and pool["source"] == "csv":
        b.fail("model.kind", "onehot_features needs a synthetic pool with a known dimension")

    return ExperimentConfig(
        scenario=scn,
        policy=policy,
        methods=methods,
        T=T,
        model_kind=kind,
        family=family,
        doses=doses,
        pe=pe,
        binarize=binarize,
        checkpoints=tuple(cps),
        alpha=b.number("alpha", d.get("alpha", 0.2), float, lo=0.0, hi=1.0, lo_open=True, hi_open=True),
        reps=b.number("reps", d.get("reps", 100), int, lo=1),
        seed=b.number("seed", d.get("seed", 0), int, lo=0),
        split_ratio=split_ratio,
        split_training=split_training,
        external_ratio=external_ratio,
        nuisance=nuis,
        pool=pool,
        workers=b.number("workers", d.get("workers", 1), int, lo=1),
        out=str(d.get("out", "results")),
    )
