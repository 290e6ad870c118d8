import hashlib
import json
import math
import os
import re
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from dyntx.core.exceptions import ConfigError, ModelValidationError, RegimeError
from dyntx.models import designs
from dyntx.models.structural import (
    LatentSpec,
    Regime,
    Stratum,
    StratifiedModel,
    StructuralModel,
    XGrid,
    apply_irreversibility,
    validate_model,
)

Threshold = Union[float, str]

_INFINITIES = {"+inf": math.inf, "inf": math.inf, "-inf": -math.inf}


def parse_threshold(value: Threshold) -> float:
    if isinstance(value, str):
        key = value.strip().lower()
        if key in _INFINITIES:
            return _INFINITIES[key]
        return float(key)
    return float(value)


class ThresholdEntry(BaseModel):
    """
    One block of a threshold table. ``y`` and ``d`` are bit patterns over the
    history ('*' matches both values); ``values`` runs over the grid (mu) or
    over z = 0, 1 (pi). Later entries override earlier ones.
    """

    t: int = Field(..., ge=1)
    y: str = ""
    d: str = ""
    values: List[Threshold]

    @field_validator("y", "d")
    @classmethod
    def check_pattern(cls, v: str) -> str:
        if not re.fullmatch(r"[01*]*", v):
            raise ValueError(f"pattern '{v}' may only contain 0, 1 and *")
        return v

    @field_validator("values")
    @classmethod
    def check_values(cls, v: List[Threshold]) -> List[Threshold]:
        for item in v:
            try:
                value = parse_threshold(item)
            except ValueError as exc:
                raise ValueError(f"threshold '{item}' is neither a number nor +inf/-inf") from exc
            if math.isnan(value):
                raise ValueError("thresholds must not be NaN")
        return v

    def index(self) -> tuple:
        return tuple(slice(None) if ch == "*" else int(ch) for ch in self.y + self.d)


class LatentSchema(BaseModel):
    mode: Literal["RankInvariant", "RSGeneral"] = "RankInvariant"
    corr: Optional[List[List[float]]] = None
    rho_uv: Optional[float] = None
    rho_time: float = 0.0
    rho_cross: float = 0.0
    a: Optional[List[float]] = None
    c: Optional[List[float]] = None

    def build(self, horizon: int) -> LatentSpec:
        if self.mode == "RSGeneral":
            if self.a is None or self.c is None:
                raise ConfigError("RSGeneral latent needs loadings a and c", key="latent")
            return LatentSpec.rs_general(self.a, self.c)
        if self.corr is not None:
            return LatentSpec.rank_invariant(self.corr)
        if self.rho_uv is not None:
            return LatentSpec.blocks(horizon, self.rho_uv, self.rho_time, self.rho_cross)
        return LatentSpec.independent(horizon)


class DesignSchema(BaseModel):
    name: Literal["dgp_a", "dgp_b"]
    params: Dict[str, Any] = Field(default_factory=dict)


class ModelSchema(BaseModel):
    design: Optional[DesignSchema] = None
    horizon: Optional[int] = Field(None, ge=1)
    x_grid: Optional[List[List[float]]] = None
    x_law: Optional[List[List[float]]] = None
    z_law: Optional[List[float]] = None
    latent: LatentSchema = Field(default_factory=LatentSchema)
    mu: List[ThresholdEntry] = Field(default_factory=list)
    pi: List[ThresholdEntry] = Field(default_factory=list)
    irreversible_d: bool = False
    irreversible_y: bool = False

    @model_validator(mode="after")
    def check_source(self) -> "ModelSchema":
        if self.design is None and (self.horizon is None or self.x_grid is None):
            raise ValueError("a model needs either a design or horizon, x_grid and tables")
        return self

    def build(self) -> StructuralModel:
        if self.design is not None:
            factory = {"dgp_a": designs.dgp_a, "dgp_b": designs.dgp_b}[self.design.name]
            return factory(**self.design.params)

        T = self.horizon
        if len(self.x_grid) != T:
            raise ConfigError(f"x_grid has {len(self.x_grid)} rows, horizon is {T}", key="x_grid")
        grid = XGrid(tuple(tuple(row) for row in self.x_grid))
        mu = [np.full((2,) * (2 * s + 1) + (grid.size(s),), np.nan) for s in range(T)]
        pi = [np.full((2,) * (2 * s) + (2,), np.nan) for s in range(T)]
        for name, tables, d_extra in (("mu", mu, 1), ("pi", pi, 0)):
            for entry in getattr(self, name):
                s = entry.t - 1
                if s >= T:
                    raise ConfigError(f"{name} entry for t={entry.t} beyond horizon {T}", key=name)
                if len(entry.y) != s or len(entry.d) != s + d_extra:
                    raise ConfigError(
                        f"{name} entry for t={entry.t} needs y of length {s} and d of length {s + d_extra}",
                        key=name,
                    )
                width = tables[s].shape[-1]
                if len(entry.values) != width:
                    raise ConfigError(f"{name} entry for t={entry.t} needs {width} values", key=name)
                tables[s][entry.index()] = [parse_threshold(v) for v in entry.values]

        x_law = self.x_law or [[1.0 / grid.size(s)] * grid.size(s) for s in range(T)]
        model = StructuralModel(
            horizon=T,
            xgrid=grid,
            mu=tuple(mu),
            pi=tuple(pi),
            latent=self.latent.build(T),
            z_law=tuple(self.z_law or [0.5] * T),
            x_law=tuple(np.asarray(law, dtype=float) for law in x_law),
            irreversible_d=self.irreversible_d,
            irreversible_y=self.irreversible_y,
        )
        if self.irreversible_d or self.irreversible_y:
            model = apply_irreversibility(model)
        violations = validate_model(model)
        if violations:
            raise ModelValidationError(violations)
        return model


class StratumSchema(BaseModel):
    w0: int
    share: float = Field(..., gt=0)
    model: ModelSchema


class EvaluatorSchema(BaseModel):
    backend: Literal["exact", "mc", "empirical"] = "exact"
    draws: Optional[int] = Field(None, gt=0)
    quad_order: Optional[int] = Field(None, ge=8)
    min_cell_count: Optional[int] = Field(None, ge=1)


class ObjectiveSchema(BaseModel):
    kind: Literal["TerminalARSF", "WeightedSum"] = "TerminalARSF"
    weight: float = 1.0
    cost: float = 0.0
    weights: Optional[List[float]] = None
    costs: Optional[List[float]] = None


class QuerySchema(BaseModel):
    functional: Literal["arsf", "ate", "transition_ate", "period_ate", "ranking"] = "arsf"
    regimes: List[str] = Field(default_factory=list)
    x: Optional[List[Optional[int]]] = None
    horizon: Optional[int] = Field(None, ge=1)
    y_minus: Dict[int, int] = Field(default_factory=dict)
    y_prev: int = Field(0, ge=0, le=1)
    mixture: Literal["conditional", "marginal"] = "conditional"
    objective: ObjectiveSchema = Field(default_factory=ObjectiveSchema)
    fallback_bounds: bool = False
    n: int = Field(10_000, gt=0)
    B: Optional[int] = Field(None, gt=0)
    alpha: float = Field(0.05, gt=0, lt=1)

    @field_validator("regimes")
    @classmethod
    def check_regimes(cls, v: List[str]) -> List[str]:
        for text in v:
            try:
                Regime.from_string(text)
            except RegimeError as exc:
                raise ValueError(str(exc)) from exc
        return v

    def parsed_regimes(self) -> List[Regime]:
        return [Regime.from_string(text) for text in self.regimes]


class ToleranceSchema(BaseModel):
    tol_h: Optional[float] = Field(None, gt=0)
    relevance_tol: Optional[float] = Field(None, gt=0)
    transition_floor: Optional[float] = Field(None, gt=0)


class OutputSchema(BaseModel):
    path: Optional[str] = None
    format: Literal["json", "yaml"] = "json"
    trace: bool = False


class RunConfig(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    command: Optional[Literal["validate", "simulate", "oracle", "identify", "bounds", "optimize", "estimate"]] = None
    model: Optional[ModelSchema] = None
    model_file: Optional[str] = None
    strata: Optional[List[StratumSchema]] = None
    data: Optional[str] = None
    seed: Optional[int] = None
    evaluator: EvaluatorSchema = Field(default_factory=EvaluatorSchema)
    query: QuerySchema = Field(default_factory=QuerySchema)
    tolerances: ToleranceSchema = Field(default_factory=ToleranceSchema)
    output: OutputSchema = Field(default_factory=OutputSchema)

    @model_validator(mode="after")
    def check_sources(self) -> "RunConfig":
        sources = [s for s in (self.model, self.model_file, self.strata) if s is not None]
        if len(sources) > 1:
            raise ValueError("give only one of model, model_file and strata")
        for path in (self.model_file, self.data):
            if path is not None and not os.path.exists(path):
                raise ValueError(f"file not found: {path}")
        return self

    def structural_model(self) -> Optional[StructuralModel]:
        if self.model is not None:
            return self.model.build()
        if self.model_file is not None:
            return load_model_file(self.model_file)
        if self.strata is not None:
            return self.strata[0].model.build()
        return None

    def stratified_model(self) -> Optional[StratifiedModel]:
        if self.strata is not None:
            return StratifiedModel(tuple(Stratum(s.w0, s.share, s.model.build()) for s in self.strata))
        model = self.structural_model()
        return None if model is None else StratifiedModel.single(model)

    def digest(self) -> str:
        """sha256 of the canonical JSON form."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _key_line(text: str, key: Optional[str]) -> Optional[int]:
    if not key:
        return None
    pattern = re.compile(rf'(^|[\s{{,])"?{re.escape(key)}"?\s*:')
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.search(line):
            return number
    return None


def _parse_text(text: str, path: str) -> Dict[str, Any]:
    if path.endswith((".yaml", ".yml")):
        try:
            payload = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"cannot parse {path}: {exc}", line=None if mark is None else mark.line + 1) from exc
    else:
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path} must hold a mapping at the top level")
    return payload


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _validated(schema, payload: Dict[str, Any], text: str, path: str):
    try:
        return schema.model_validate(payload)
    except ValidationError as exc:
        error = exc.errors()[0]
        location = [str(part) for part in error["loc"]]
        keys = [part for part in location if not part.isdigit()]
        key = ".".join(location) if location else None
        raise ConfigError(
            f"invalid {path}: {error['msg']}", key=key, line=_key_line(text, keys[-1] if keys else None)
        ) from exc


def load_run_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Read a run configuration (JSON, or YAML by suffix) and apply overrides.

    Raises:
        ConfigError: naming the offending key and its line in the file
    """
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    payload = _merge(_parse_text(text, path), overrides or {})
    return _validated(RunConfig, payload, text, path)


def load_model_file(path: str) -> StructuralModel:
    with open(path, "r", encoding="utf-8") as handle:
        text = handle.read()
    schema = _validated(ModelSchema, _parse_text(text, path), text, path)
    return schema.build()
