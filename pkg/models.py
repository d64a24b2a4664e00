import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from errors import ConfigError

load_dotenv()

ControllerKind = Literal["spc", "cspc", "deepc_l2", "deepc_proj", "gamma_ddpc", "indirect", "oracle"]

CONTROLLER_KINDS: Tuple[str, ...] = ("spc", "cspc", "deepc_l2", "deepc_proj", "gamma_ddpc", "indirect", "oracle")


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


class ControllerSpec(BaseModel):
    """One predictive-control formulation and its hyper-parameters"""

    kind: ControllerKind
    beta: float = Field(default=0.0, ge=0.0)
    beta2: float = Field(default=0.0, ge=0.0)
    beta3: float = Field(default=0.0, ge=0.0)
    lam1: float = Field(default=0.0, ge=0.0)
    lam2: float = Field(default=0.0, ge=0.0)
    causal: bool = False

    @property
    def label(self) -> str:
        if self.kind == "spc":
            return "SPC"
        if self.kind == "cspc":
            return "C-SPC"
        if self.kind == "oracle":
            return "Oracle"
        if self.kind == "deepc_l2":
            return f"DeePC_l2({self.beta:g})"
        if self.kind == "deepc_proj":
            return f"DeePC_proj({self.beta:g})"
        if self.kind == "gamma_ddpc":
            return f"GammaDDPC({self.beta2:g},{self.beta3:g})"
        predictor = "causal" if self.causal else "ls"
        return f"Indirect({self.lam1:g},{self.lam2:g},{predictor})"

    @property
    def slack_weight(self) -> Optional[float]:
        """lambda_2 of the equivalent indirect problem, None when the slack is forced to zero"""
        if self.kind in ("spc", "cspc", "oracle"):
            return None
        return self.indirect_weights()[1]

    def indirect_weights(self) -> Tuple[float, float, bool]:
        """(lambda_1, lambda_2, causal) of the equivalent indirect formulation"""
        if self.kind == "deepc_l2":
            return self.beta, self.beta, False
        if self.kind == "deepc_proj":
            return 0.0, self.beta, False
        if self.kind == "gamma_ddpc":
            return self.beta2, self.beta3, False
        if self.kind == "indirect":
            return self.lam1, self.lam2, self.causal
        if self.kind in ("spc", "cspc"):
            return 0.0, 0.0, self.kind == "cspc"
        raise ValueError("the oracle has no indirect counterpart")


class ExperimentConfig(BaseModel):
    """Monte-Carlo experiment on slack behaviour versus training length"""

    plant_a: List[float] = Field(default_factory=lambda: [1.2, -0.3, -0.1])
    plant_b: List[float] = Field(default_factory=lambda: [0.5, -0.4, 0.1])
    past_horizon: int = Field(default=20, ge=1)
    future_horizon: int = Field(default=30, ge=1)
    q: float = Field(default=1.0, gt=0.0)
    r: float = Field(default=0.1, gt=0.0)
    setpoint: float = 0.75
    input_lower: float = -1.0
    input_upper: float = 1.0
    input_std: float = Field(default=0.6, gt=0.0)
    noise_std: float = Field(default=0.1, ge=0.0)
    total_samples_grid: List[int] = Field(default_factory=lambda: [119, 300, 1000, 3000, 10000])
    lambda2_grid: List[float] = Field(default_factory=lambda: [1.0, 10.0, 100.0, 1000.0])
    lambda1: float = Field(default=0.0, ge=0.0)
    n_train: int = Field(default=20, ge=1)
    n_noise: int = Field(default=10, ge=1)
    base_seed: int = Field(default=0, ge=0)
    controllers: List[str] = Field(default_factory=lambda: ["spc", "cspc", "deepc_proj"])
    output_dir: str = "results"
    jobs: int = Field(default=1, ge=1)

    @field_validator("total_samples_grid", "lambda2_grid", "controllers", "plant_a", "plant_b")
    @classmethod
    def _nonempty(cls, value):
        if not value:
            raise ValueError("must not be empty")
        return value

    @field_validator("lambda2_grid")
    @classmethod
    def _nonnegative(cls, value):
        if any(v < 0 for v in value):
            raise ValueError("slack weights must be nonnegative")
        return value

    @field_validator("controllers")
    @classmethod
    def _known_controllers(cls, value):
        unknown = [c for c in value if c not in CONTROLLER_KINDS or c == "indirect"]
        if unknown:
            raise ValueError(f"unknown controllers {unknown}")
        return value

    @model_validator(mode="after")
    def _consistent(self):
        if self.input_lower >= self.input_upper:
            raise ValueError("input_lower must be below input_upper")
        shortest = self.past_horizon + self.future_horizon
        if min(self.total_samples_grid) < shortest:
            raise ValueError(f"every total sample count must be at least rho + T = {shortest}")
        return self

    @property
    def n_phi(self) -> int:
        return 2 * self.past_horizon + self.future_horizon

    @classmethod
    def desk_scale(cls, **overrides) -> "ExperimentConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "ExperimentConfig":
        values = dict(
            total_samples_grid=[119, 150, 200, 300, 500, 1000, 2000, 3000, 5000, 10000],
            lambda2_grid=[1.0, 10.0, 100.0, 1000.0],
            n_train=200,
            n_noise=30,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path: Union[str, Path], full_scale: bool = False) -> "ExperimentConfig":
        """
        Flat `key = value` file. Lists are comma-separated, `#` starts a comment.
        """
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

        list_fields = {name for name, info in cls.model_fields.items() if "List" in str(info.annotation)}
        values: Dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            if key not in cls.model_fields:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = [v.strip() for v in value.split(",") if v.strip()] if key in list_fields else value

        try:
            return cls.full_scale(**values) if full_scale else cls(**values)
        except ValidationError as e:
            raise ConfigError(f"invalid config {path}: {e}") from e

    def with_env_overrides(self) -> "ExperimentConfig":
        """DDPC_OUTPUT_DIR and DDPC_JOBS from the environment (.env is loaded at import)"""
        updates: Dict[str, Any] = {}
        if os.getenv("DDPC_OUTPUT_DIR"):
            updates["output_dir"] = os.getenv("DDPC_OUTPUT_DIR")
        if os.getenv("DDPC_JOBS"):
            try:
                updates["jobs"] = int(os.getenv("DDPC_JOBS"))
            except ValueError as e:
                raise ConfigError(f"DDPC_JOBS must be an integer: {e}") from e
        return self.model_copy(update=updates) if updates else self

    def controller_specs(self) -> List[ControllerSpec]:
        """Expand the controller list over the slack-weight grid"""
        specs: List[ControllerSpec] = []
        for kind in self.controllers:
            if kind in ("spc", "cspc", "oracle"):
                specs.append(ControllerSpec(kind=kind))
            elif kind == "gamma_ddpc":
                specs.extend(ControllerSpec(kind=kind, beta2=self.lambda1, beta3=lam2) for lam2 in self.lambda2_grid)
            else:
                specs.extend(ControllerSpec(kind=kind, beta=lam2) for lam2 in self.lambda2_grid)
        return specs


class RunResult(BaseModel):
    """Outcome of one open-loop evaluation; costs are None when the controller failed"""

    controller: str
    kind: str
    total_samples: int
    lambda2: Optional[float] = None
    train_seed: int
    noise_seed: int
    j_star: Optional[float] = Field(default=None, ge=0.0)
    j_oracle_dist: Optional[float] = Field(default=None, ge=0.0)
    slack_ms: Optional[float] = Field(default=None, ge=0.0)
    rank_delta: int = 0
    status: str = "optimal"

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    @property
    def skipped(self) -> bool:
        """Controller precondition not met by this training set"""
        return self.status == "precondition"

    @classmethod
    def csv_header(cls) -> List[str]:
        return list(cls.model_fields)

    def to_csv_row(self) -> List[str]:
        row = []
        for name in type(self).model_fields:
            value = getattr(self, name)
            if value is None:
                row.append("")
            elif isinstance(value, float):
                row.append(_fmt(value))
            else:
                row.append(str(value))
        return row


class SummaryRow(BaseModel):
    controller: str
    kind: str
    total_samples: int
    lambda2: Optional[float] = None
    count: int
    j_star_median: float
    j_star_q25: float
    j_star_q75: float
    j_oracle_median: float
    j_oracle_q25: float
    j_oracle_q75: float
    slack_ms_median: float
    slack_ms_q25: float
    slack_ms_q75: float


class EquivalenceReport(BaseModel):
    """Gaps between two formulations that should share the optimal (u, y_hat)"""

    check: str
    instance_id: int = 0
    descriptor: Dict[str, Any] = Field(default_factory=dict)
    max_u_gap: Optional[float] = None
    max_yhat_gap: Optional[float] = None
    objective_gap: Optional[float] = None
    assumption1: bool = False
    verdict: Literal["pass", "fail", "skipped"]
    tolerance: float
    objective_tolerance: Optional[float] = None
    detail: str = ""

    @classmethod
    def judge(
        cls,
        check: str,
        u_gap: float,
        yhat_gap: float,
        objective_gap: Optional[float],
        tolerance: float,
        objective_tolerance: Optional[float] = None,
        **fields,
    ) -> "EquivalenceReport":
        passed = u_gap <= tolerance and yhat_gap <= tolerance
        if objective_gap is not None and objective_tolerance is not None:
            passed = passed and objective_gap <= objective_tolerance
        return cls(
            check=check,
            max_u_gap=u_gap,
            max_yhat_gap=yhat_gap,
            objective_gap=objective_gap,
            verdict="pass" if passed else "fail",
            tolerance=tolerance,
            objective_tolerance=objective_tolerance,
            **fields,
        )

    @classmethod
    def skipped(cls, check: str, reason: str, tolerance: float, **fields) -> "EquivalenceReport":
        return cls(check=check, verdict="skipped", tolerance=tolerance, detail=reason, **fields)


class IdentityReport(BaseModel):
    """LQ covariance identities and the pseudo-inverse norm identity"""

    instance_id: int = 0
    descriptor: Dict[str, Any] = Field(default_factory=dict)
    lq_delta_rel_error: Optional[float] = None
    lq_phi_rel_error: Optional[float] = None
    pinv_norm_max_rel_error: float
    negative_control_range_residual: float
    verdict: Literal["pass", "fail", "skipped"]
    tolerance: float
    pinv_norm_tolerance: float
    detail: str = ""


class PredictorExport(BaseModel):
    past_horizon: int
    future_horizon: int
    n_u: int
    n_y: int
    columns: int
    causal: bool
    rank_delta: int
    rank_phi: int
    theta: List[List[float]]
    sigma_delta: List[List[float]]
    sigma_phi: List[List[float]]
