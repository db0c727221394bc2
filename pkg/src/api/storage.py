"""
Persistence

JSON files validated by the pydantic models in src.api.schemas. Every file
is written canonically (2-space indent, trailing newline, no timestamps), so
writing the same object twice gives identical bytes and the sha256 of the
text can be used to cross-reference files.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import List, Optional, Tuple, Type, TypeVar, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp
from pydantic import BaseModel

from src.api.schemas import (
    FORMAT_VERSION,
    BoundaryConditionEntry,
    CoarseMapFile,
    ComplexFile,
    ModelFile,
    NetworkFile,
    PinEntry,
    ProblemFile,
    SampleFile,
    StateFile,
)
from src.core.calculus import Metric
from src.core.coarsen import CoarseMap
from src.core.complex import ChainComplex, Cochain
from src.core.model import BoundaryCondition, Pin, SurrogateModel
from src.core.net import Mlp
from src.core.train import Sample

logger = logging.getLogger("ddec-storage")

FileModel = TypeVar("FileModel", bound=BaseModel)
PathLike = Union[str, Path]


def dumps(obj: BaseModel) -> str:
    """Canonical text of a file model."""
    return json.dumps(obj.model_dump(mode="json"), indent=2, ensure_ascii=False) + "\n"


def content_hash(obj: BaseModel) -> str:
    return hashlib.sha256(dumps(obj).encode("utf-8")).hexdigest()


def write_file(obj: BaseModel, path: PathLike) -> str:
    """Write a file model; returns its content hash."""
    path = Path(path)
    text = dumps(obj)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    logger.info("Wrote %s", path)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def read_file(path: PathLike, cls: Type[FileModel]) -> FileModel:
    """
    Read and validate a file model.

    Raises:
        FileNotFoundError: If the path does not exist.
        ValueError: On schema violations or an unsupported format_version.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No such file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    version = raw.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version {version} (expected {FORMAT_VERSION})")
    return cls.model_validate(raw)


def file_hash(path: PathLike) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


# --- sparse triplets ---

def _triplets(matrix: sp.spmatrix) -> List[Tuple[int, int, int]]:
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    return [(int(coo.row[i]), int(coo.col[i]), int(coo.data[i])) for i in order if coo.data[i] != 0]


def _from_triplets(triplets, shape) -> sp.csr_matrix:
    if not triplets:
        return sp.csr_matrix(shape, dtype=np.int64)
    rows, cols, vals = zip(*triplets)
    return sp.csr_matrix((vals, (rows, cols)), shape=shape, dtype=np.int64)


# --- complex ---

def complex_to_file(c: ChainComplex) -> ComplexFile:
    return ComplexFile(
        dim=c.dim,
        counts=list(c.counts),
        delta=[_triplets(d) for d in c.delta],
        positions=c.positions.tolist(),
        grid_shape=c.grid_shape,
        centroids=[np.asarray(x).tolist() for x in c.centroids] if c.centroids is not None else None,
    )


def complex_from_file(f: ComplexFile) -> ChainComplex:
    if len(f.counts) != f.dim + 1:
        raise ValueError(f"Complex file lists {len(f.counts)} counts for dim {f.dim}")
    delta = [_from_triplets(t, (f.counts[k + 1], f.counts[k])) for k, t in enumerate(f.delta)]
    return ChainComplex(
        counts=tuple(f.counts),
        delta=delta,
        positions=np.asarray(f.positions, dtype=float),
        grid_shape=tuple(f.grid_shape) if f.grid_shape is not None else None,
        centroids=[np.asarray(x, dtype=float) for x in f.centroids] if f.centroids is not None else None,
    )


def coarse_map_to_file(cmap: CoarseMap, fine_hash: str, coarse_hash: str) -> CoarseMapFile:
    return CoarseMapFile(
        fine_hash=fine_hash,
        coarse_hash=coarse_hash,
        labels=cmap.labels.tolist(),
        iota=[_triplets(m) for m in cmap.iota],
        shapes=[tuple(int(n) for n in m.shape) for m in cmap.iota],
    )


def coarse_map_from_file(f: CoarseMapFile) -> CoarseMap:
    return CoarseMap(
        labels=np.asarray(f.labels, dtype=np.int64),
        iota=[_from_triplets(t, shape) for t, shape in zip(f.iota, f.shapes)],
    )


# --- model ---

def model_to_file(model: SurrogateModel, complex_hash: str) -> ModelFile:
    net = model.net
    return ModelFile(
        complex_hash=complex_hash,
        k=model.k,
        epsilon=model.epsilon,
        logB=[v.tolist() for v in model.metric.logB],
        logD=[v.tolist() for v in model.metric.logD],
        network=NetworkFile(
            weights=[w.tolist() for w in net.weights],
            biases=[b.tolist() for b in net.biases],
            activation=net.activation,
            slopes=net.slopes.tolist(),
            linear_output=net.linear_output,
        ),
    )


def model_from_file(f: ModelFile, c: ChainComplex) -> SurrogateModel:
    net = Mlp(
        weights=[np.asarray(w, dtype=float) for w in f.network.weights],
        biases=[np.asarray(b, dtype=float) for b in f.network.biases],
        activation=f.network.activation,
        slopes=np.asarray(f.network.slopes, dtype=float),
        linear_output=f.network.linear_output,
    )
    metric = Metric(logB=f.logB, logD=f.logD)
    return SurrogateModel(complex=c, metric=metric, net=net, k=f.k, epsilon=f.epsilon)


# --- problems and samples ---

def _problem_fields(bcs: List[BoundaryCondition], pin: Optional[Pin]):
    entries = [BoundaryConditionEntry(level=b.level, index=b.index, value=b.value) for b in bcs]
    pin_entry = PinEntry(index=pin.index, value=pin.value) if pin is not None else None
    return entries, pin_entry


def sample_to_file(sample: Sample, k: int, complex_hash: str) -> SampleFile:
    entries, pin_entry = _problem_fields(sample.bcs, sample.pin)
    return SampleFile(
        complex_hash=complex_hash,
        k=k,
        label=sample.label,
        bcs=entries,
        source=sample.source.tolist(),
        pin=pin_entry,
        data=sample.data.tolist(),
        mask=sample.mask.tolist(),
    )


def sample_from_file(f: SampleFile) -> Sample:
    return Sample(
        bcs=[BoundaryCondition(b.level, b.index, b.value) for b in f.bcs],
        source=np.asarray(f.source, dtype=float),
        data=np.asarray(f.data, dtype=float),
        mask=np.asarray(f.mask, dtype=np.int64),
        pin=Pin(f.pin.index, f.pin.value) if f.pin is not None else None,
        label=f.label,
    )


def problem_from_file(f: ProblemFile, model: SurrogateModel) -> SurrogateModel:
    """Attach a problem file's boundary data to a model (shapes validated by the model)."""
    if f.k != model.k:
        raise ValueError(f"Problem is for k={f.k}, model has k={model.k}")
    return model.with_problem(
        [BoundaryCondition(b.level, b.index, b.value) for b in f.bcs],
        Cochain(model.k, np.asarray(f.source, dtype=float)),
        Pin(f.pin.index, f.pin.value) if f.pin is not None else None,
    )


def state_to_file(state, report, k: int, model_hash: str, problem_hash: str) -> StateFile:
    return StateFile(
        model_hash=model_hash,
        problem_hash=problem_hash,
        k=k,
        w=state.w.values.tolist(),
        u=state.u.values.tolist(),
        iterations=report.iterations,
        residual_norms=[float(r) for r in report.residual_norms],
        converged=report.converged,
    )


def write_table(table: pd.DataFrame, path: PathLike) -> None:
    """CSV with full float precision so reruns compare byte for byte."""
    table.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logger.info("Wrote %s (%d rows)", path, len(table))
