from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator

from src.core.train import TrainConfig

FORMAT_VERSION = 1

# --- Case configuration ---

class MaterialSpec(BaseModel):
    """Circular inclusion: coefficient alpha inside, 1 outside."""
    radius: float = Field(0.25, gt=0.0, description="Inclusion radius (domain units)")
    alpha: float = Field(1.0, gt=0.0, description="Inclusion coefficient")
    center: Tuple[float, float] = Field((0.5, 0.5), description="Inclusion center")


class CaseSpec(BaseModel):
    """One data-generation case: problem tag, material sweep, fine grid and coarsening."""
    case: Literal["d1", "d2", "magneto"] = Field(..., description="Problem tag")
    alphas: List[float] = Field(..., description="Inclusion coefficients, one sample each")
    held_out: List[float] = Field(default_factory=list, description="Coefficients solved for evaluation only")
    fine: int = Field(50, ge=1, description="Fine cells per direction")
    parts: int = Field(3, ge=1, description="Partitions per direction (parts^2 in total)")
    partitioner: Literal["block", "greedy"] = Field("block", description="Partitioning method")
    observe: Literal["both", "u", "w"] = Field("both", description="Observed part of the coarse state")
    material: MaterialSpec = Field(default_factory=MaterialSpec)
    seed: int = Field(0, description="Seed of the greedy partitioner")

    @field_validator("alphas")
    @classmethod
    def non_empty_alphas(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("alphas must not be empty")
        return v

    @field_validator("alphas", "held_out")
    @classmethod
    def positive_alphas(cls, v: List[float]) -> List[float]:
        if any(a <= 0 for a in v):
            raise ValueError("coefficients must be positive")
        return v


class NetworkSpec(BaseModel):
    hidden: List[int] = Field(default_factory=lambda: [5, 5], description="Hidden layer widths")
    activation: Literal["elu", "prelu", "tanh", "relu"] = Field("elu", description="Activation tag")
    epsilon: float = Field(0.1, ge=0.0, description="Perturbation scale")
    linear_output: bool = Field(False, description="Skip the activation on the output layer")
    seed: int = Field(0, description="He initialization seed")


class RunConfig(BaseModel):
    """Resolved settings of one CLI invocation, written next to its outputs."""
    format_version: int = FORMAT_VERSION
    kind: Literal["run_config"] = "run_config"
    command: str
    case: Optional[CaseSpec] = None
    network: Optional[NetworkSpec] = None
    train: Optional[TrainConfig] = None
    paths: Dict[str, str] = Field(default_factory=dict, description="Input files and directories")
    output_dir: str = Field(..., description="Directory receiving every written file")
    seed: int = 0


# --- Files ---

Triplet = Tuple[int, int, int]


class ComplexFile(BaseModel):
    """Chain complex: counts and coboundaries as (row, col, sign) triplets."""
    format_version: int = FORMAT_VERSION
    kind: Literal["complex"] = "complex"
    dim: int
    counts: List[int]
    delta: List[List[Triplet]]
    positions: List[List[float]]
    grid_shape: Optional[Tuple[int, int]] = None
    centroids: Optional[List[List[List[float]]]] = None

    @field_validator("delta")
    @classmethod
    def signs_in_range(cls, v: List[List[Triplet]]) -> List[List[Triplet]]:
        for level in v:
            for _, _, sign in level:
                if sign not in (-1, 1):
                    raise ValueError(f"Incidence sign {sign} not in {{-1, +1}}")
        return v


class CoarseMapFile(BaseModel):
    format_version: int = FORMAT_VERSION
    kind: Literal["coarse_map"] = "coarse_map"
    fine_hash: str
    coarse_hash: str
    labels: List[int]
    iota: List[List[Triplet]]
    shapes: List[Tuple[int, int]]


class NetworkFile(BaseModel):
    weights: List[List[List[float]]]
    biases: List[List[float]]
    activation: str
    slopes: List[float]
    linear_output: bool = False


class ModelFile(BaseModel):
    """Trained surrogate: metric log-parameters and network, tied to a complex by hash."""
    format_version: int = FORMAT_VERSION
    kind: Literal["model"] = "model"
    complex_hash: str
    k: int
    epsilon: float
    logB: List[List[float]]
    logD: List[List[float]]
    network: NetworkFile


class BoundaryConditionEntry(BaseModel):
    level: int
    index: int = Field(..., ge=0)
    value: float


class PinEntry(BaseModel):
    index: int = Field(..., ge=0)
    value: float = 0.0


class ProblemFile(BaseModel):
    """Boundary data and source for one forward solve."""
    format_version: int = FORMAT_VERSION
    kind: Literal["problem", "sample"] = "problem"
    complex_hash: str
    k: int
    label: str = ""
    bcs: List[BoundaryConditionEntry] = Field(default_factory=list)
    source: List[float]
    pin: Optional[PinEntry] = None


class SampleFile(ProblemFile):
    """A problem plus observed coarse state values."""
    kind: Literal["problem", "sample"] = "sample"
    data: List[float]
    mask: List[int]

    @field_validator("mask")
    @classmethod
    def nonempty_mask(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("mask must select at least one entry")
        return v


class ManifestEntry(BaseModel):
    path: str
    sha256: str


class ManifestFile(BaseModel):
    format_version: int = FORMAT_VERSION
    kind: Literal["manifest"] = "manifest"
    case: CaseSpec
    fine_complex: ManifestEntry
    coarse_complex: ManifestEntry
    coarse_map: ManifestEntry
    samples: List[ManifestEntry]
    held_out: List[ManifestEntry] = Field(default_factory=list)


class StateFile(BaseModel):
    """Solved coarse state with its convergence history."""
    format_version: int = FORMAT_VERSION
    kind: Literal["state"] = "state"
    model_hash: str
    problem_hash: str
    k: int
    w: List[float]
    u: List[float]
    iterations: int
    residual_norms: List[float]
    converged: bool
