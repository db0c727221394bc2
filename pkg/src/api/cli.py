"""
Command Line Interface

Subcommands:
    generate  fine reference solves, coarsening and one sample file per alpha
    coarsen   fine/coarse complexes and the coarsening map only
    train     fit a surrogate to a generated dataset
    solve     forward solve of a model on a problem or sample file
    verify    structural checks of a model file
    export    per-cell plot tables of a state file

Exit codes: 0 success, 1 verification failure, 2 usage or I/O error,
3 training target not reached, training aborted, or solve not converged.

Usage Example:
    python -m src.api.cli generate --case d1 --fine 20 --parts 3 --output runs/d1
    python -m src.api.cli train --dataset runs/d1 --output runs/d1
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from src.api import storage
from src.api.schemas import (
    CaseSpec,
    ComplexFile,
    ManifestEntry,
    ManifestFile,
    MaterialSpec,
    ModelFile,
    NetworkSpec,
    ProblemFile,
    RunConfig,
    SampleFile,
    StateFile,
)
from src.core.coarsen import block_partition, build_coarse, greedy_partition, verify_coarse
from src.core.complex import build_cartesian_complex
from src.core.model import build_surrogate
from src.core.reference import fine_profile_rows, generate_dataset, problem_level, profile
from src.core.solve import default_tolerance, newton_solve
from src.core.structure_checker import StructureChecker
from src.core.train import TrainConfig, TrainingAborted, evaluate, train
from src.data.config_loader import get_app_version, get_config, get_output_dir, get_profile_line

logger = logging.getLogger("ddec-cli")

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_TARGET_MISSED = 3

FINE_PROFILE_COLUMNS = ["alpha", "field", "x", "y", "index", "value"]


def _output_dir(args) -> Path:
    path = Path(args.output or get_output_dir())
    if not path.is_dir():
        raise FileNotFoundError(f"Output directory {path} does not exist")
    return path


def _floats(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    return [int(x) for x in text.split(",") if x.strip()]


def _configured_alphas(settings: dict, sweep: bool) -> List[float]:
    if not sweep:
        return settings["alphas"]
    if "alpha_sweep" not in settings:
        raise ValueError("This case has no alpha_sweep configured")
    return settings["alpha_sweep"]


def _case_spec(args) -> CaseSpec:
    settings = get_config().case_settings(args.case)
    material = get_config().material
    return CaseSpec(
        case=args.case,
        alphas=_floats(args.alphas) or _configured_alphas(settings, args.sweep),
        held_out=_floats(args.held_out) if args.held_out is not None else settings.get("held_out_alphas", []),
        fine=args.fine or settings.get("fine", 50),
        parts=args.parts or settings.get("parts", 3),
        partitioner=args.partitioner,
        observe=args.observe,
        material=MaterialSpec(
            radius=args.radius or material.get("radius", 0.25),
            center=tuple(material.get("center", (0.5, 0.5))),
        ),
        seed=args.seed,
    )


def cmd_generate(args) -> int:
    out = _output_dir(args)
    spec = _case_spec(args)
    case = generate_dataset(spec)
    fine_hash = storage.write_file(storage.complex_to_file(case.fine), out / "fine_complex.json")
    coarse_hash = storage.write_file(storage.complex_to_file(case.coarse), out / "coarse_complex.json")
    map_hash = storage.write_file(
        storage.coarse_map_to_file(case.cmap, fine_hash, coarse_hash), out / "coarse_map.json"
    )
    entries = []
    for i, sample in enumerate(case.samples):
        name = f"sample_{i:03d}.json"
        digest = storage.write_file(storage.sample_to_file(sample, case.k, coarse_hash), out / name)
        entries.append(ManifestEntry(path=name, sha256=digest))
    held_out = []
    for i, sample in enumerate(case.held_out_samples):
        name = f"heldout_{i:03d}.json"
        digest = storage.write_file(storage.sample_to_file(sample, case.k, coarse_hash), out / name)
        held_out.append(ManifestEntry(path=name, sha256=digest))
    manifest = ManifestFile(
        case=spec,
        fine_complex=ManifestEntry(path="fine_complex.json", sha256=fine_hash),
        coarse_complex=ManifestEntry(path="coarse_complex.json", sha256=coarse_hash),
        coarse_map=ManifestEntry(path="coarse_map.json", sha256=map_hash),
        samples=entries,
        held_out=held_out,
    )
    storage.write_file(manifest, out / "manifest.json")
    line = get_profile_line()
    storage.write_table(
        pd.DataFrame(fine_profile_rows(case, line["y"], line["samples"]), columns=FINE_PROFILE_COLUMNS),
        out / "fine_profile.csv",
    )
    storage.write_file(
        RunConfig(command="generate", case=spec, output_dir=str(out), seed=spec.seed), out / "run_config.json"
    )
    logger.info("Generated %d samples for case %s in %s", len(entries), spec.case, out)
    return EXIT_OK


def cmd_coarsen(args) -> int:
    out = _output_dir(args)
    fine = build_cartesian_complex(args.fine, args.fine)
    if args.partitioner == "greedy":
        labels = greedy_partition(fine, args.parts * args.parts, args.seed)
    else:
        labels = block_partition(fine, args.parts, args.parts)
    coarse, cmap = build_coarse(fine, labels)
    fine_hash = storage.write_file(storage.complex_to_file(fine), out / "fine_complex.json")
    coarse_hash = storage.write_file(storage.complex_to_file(coarse), out / "coarse_complex.json")
    storage.write_file(storage.coarse_map_to_file(cmap, fine_hash, coarse_hash), out / "coarse_map.json")
    report = verify_coarse(coarse, cmap, fine)
    print(json.dumps(report, indent=2))
    return EXIT_OK if report["passed"] else EXIT_VERIFY_FAILED


def _read_samples(directory: Path, entries: List[ManifestEntry], complex_hash: str):
    samples = []
    for entry in entries:
        sample_file = storage.read_file(directory / entry.path, SampleFile)
        if sample_file.complex_hash != complex_hash:
            raise ValueError(f"{entry.path} refers to a different coarse complex")
        samples.append(storage.sample_from_file(sample_file))
    return samples


def _load_dataset(directory: Path):
    manifest = storage.read_file(directory / "manifest.json", ManifestFile)
    coarse_path = directory / manifest.coarse_complex.path
    if storage.file_hash(coarse_path) != manifest.coarse_complex.sha256:
        raise ValueError(f"{coarse_path} does not match the manifest hash")
    coarse = storage.complex_from_file(storage.read_file(coarse_path, ComplexFile))
    return manifest, coarse, _read_samples(directory, manifest.samples, manifest.coarse_complex.sha256)


def cmd_train(args) -> int:
    out = _output_dir(args)
    dataset_dir = Path(args.dataset)
    manifest, coarse, samples = _load_dataset(dataset_dir)
    held_out = _read_samples(dataset_dir, manifest.held_out, manifest.coarse_complex.sha256)
    case = manifest.case.case
    settings = get_config().case_settings(case)
    training = get_config().get_section("training")

    overrides = {"hidden": _ints(args.hidden), "activation": args.activation, "epsilon": args.epsilon}
    network = NetworkSpec(**{
        **settings.get("network", {}),
        **{key: value for key, value in overrides.items() if value is not None},
        "seed": args.seed,
    })
    cfg = TrainConfig(
        epochs=args.epochs if args.epochs is not None else settings.get("epochs", 100),
        learning_rate=args.lr if args.lr is not None else settings.get("learning_rate", 0.05),
        beta1=training.get("beta1", 0.9),
        beta2=training.get("beta2", 0.999),
        adam_eps=training.get("adam_eps", 1e-8),
        newton_maxit=get_config().newton_maxit,
        relative_tolerance=get_config().relative_tolerance,
        clip_norm=training.get("clip_norm", 100.0),
        log_every=training.get("log_every", 100),
        seed=args.seed,
        warm_start=args.warm_start,
        batch_mode=args.batch,
        target_loss=args.target_loss if args.target_loss is not None else settings.get("target_loss"),
    )

    model = build_surrogate(
        coarse, problem_level(case), network.hidden, network.activation,
        network.epsilon, network.seed, network.linear_output,
    )
    exit_code = EXIT_OK
    try:
        model, history = train(model, samples, cfg)
    except TrainingAborted as e:
        logger.error("Training aborted: %s", e)
        history = e.history
        exit_code = EXIT_TARGET_MISSED

    storage.write_file(storage.model_to_file(model, manifest.coarse_complex.sha256), out / "model.json")
    storage.write_table(history, out / "history.csv")
    storage.write_file(
        RunConfig(
            command="train", case=manifest.case, network=network, train=cfg,
            paths={"dataset": str(dataset_dir)}, output_dir=str(out), seed=args.seed,
        ),
        out / "run_config.json",
    )

    if exit_code == EXIT_OK and cfg.target_loss is not None and len(history):
        final = evaluate(model, samples, cfg)
        final_loss = float(np.mean([r["loss"] for r in final]))
        logger.info("Final mean loss %.3e (target %.1e)", final_loss, cfg.target_loss)
        if final_loss >= cfg.target_loss:
            exit_code = EXIT_TARGET_MISSED

    if held_out:
        results = evaluate(model, held_out, cfg)
        for sample, result in zip(held_out, results):
            logger.info("Held-out %s: loss %.3e, converged %s", sample.label, result["loss"], result["converged"])
        table = pd.DataFrame([
            {"path": entry.path, "label": sample.label, **result}
            for entry, sample, result in zip(manifest.held_out, held_out, results)
        ])
        storage.write_table(table, out / "held_out.csv")
    return exit_code


def _load_model(model_path: str, complex_path: str, strict: bool = True):
    """
    Model plus its complex. A hash mismatch is an error when strict; verify
    only warns so that an edited complex file still gets checked.
    """
    model_file = storage.read_file(model_path, ModelFile)
    complex_file = storage.read_file(complex_path, ComplexFile)
    if storage.file_hash(complex_path) != model_file.complex_hash:
        if strict:
            raise ValueError(f"{model_path} was trained on a different complex than {complex_path}")
        logger.warning("%s does not match the complex hash recorded in %s", complex_path, model_path)
    model = storage.model_from_file(model_file, storage.complex_from_file(complex_file))
    return model, storage.file_hash(model_path)


def cmd_solve(args) -> int:
    out = _output_dir(args)
    model, model_hash = _load_model(args.model, args.complex)
    problem_file = storage.read_file(args.problem, SampleFile if _is_sample(args.problem) else ProblemFile)
    if problem_file.complex_hash != storage.file_hash(args.complex):
        raise ValueError(f"{args.problem} refers to a different complex")
    problem = storage.problem_from_file(problem_file, model)
    tol = default_tolerance(problem, get_config().relative_tolerance)
    state, report = newton_solve(problem, tol=tol, maxit=get_config().newton_maxit)
    storage.write_file(
        storage.state_to_file(state, report, model.k, model_hash, storage.file_hash(args.problem)),
        out / "state.json",
    )
    line = get_profile_line()
    rows = []
    for name, cochain in (("w", state.w), ("u", state.u)):
        for row in profile(model.complex, cochain.level, cochain.values, line["y"], line["samples"]):
            rows.append({"field": name, **row})
    storage.write_table(pd.DataFrame(rows, columns=["field", "x", "y", "index", "value"]), out / "profile.csv")
    logger.info("Solve: %d iterations, residual %.3e", report.iterations, report.final_residual)
    return EXIT_OK if report.converged else EXIT_TARGET_MISSED


def _is_sample(path: str) -> bool:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f).get("kind") == "sample"


def cmd_verify(args) -> int:
    model, _ = _load_model(args.model, args.complex, strict=False)
    report = StructureChecker(get_config().verification_tolerances, seed=args.seed).validate(model)
    print(json.dumps(report, indent=2))
    return EXIT_OK if report["passed"] else EXIT_VERIFY_FAILED


def cmd_export(args) -> int:
    out = _output_dir(args)
    state_file = storage.read_file(args.state, StateFile)
    c = storage.complex_from_file(storage.read_file(args.complex, ComplexFile))
    for name, level, values in (("w", state_file.k - 1, state_file.w), ("u", state_file.k, state_file.u)):
        centroids = c.cell_centroids(level)
        if len(values) != centroids.shape[0]:
            raise ValueError(f"State field {name} does not match level {level} of {args.complex}")
        table = pd.DataFrame({
            "index": np.arange(len(values)),
            "x": centroids[:, 0],
            "y": centroids[:, 1],
            "value": values,
        })
        storage.write_table(table, out / f"{name}_level{level}.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddec", description="Structure-preserving graph surrogates")
    parser.add_argument("--log-level", default="INFO", help="Logging level")
    parser.add_argument("--version", action="version", version=f"%(prog)s {get_app_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="Generate a coarse dataset from fine reference solves")
    gen.add_argument("--case", required=True, choices=["d1", "d2", "magneto"])
    gen.add_argument("--alphas", help="Comma-separated inclusion coefficients")
    gen.add_argument("--sweep", action="store_true", help="Use the configured alpha_sweep instead of alphas")
    gen.add_argument("--held-out", help="Comma-separated coefficients written as held-out samples (\"\" for none)")
    gen.add_argument("--fine", type=int, help="Fine cells per direction")
    gen.add_argument("--parts", type=int, help="Partitions per direction")
    gen.add_argument("--partitioner", default="block", choices=["block", "greedy"])
    gen.add_argument("--observe", default="both", choices=["both", "u", "w"])
    gen.add_argument("--radius", type=float, help="Inclusion radius")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--output", "-o", help="Existing output directory")
    gen.set_defaults(func=cmd_generate)

    coarse = sub.add_parser("coarsen", help="Write fine and coarse complexes with the coarsening map")
    coarse.add_argument("--fine", type=int, required=True)
    coarse.add_argument("--parts", type=int, required=True)
    coarse.add_argument("--partitioner", default="block", choices=["block", "greedy"])
    coarse.add_argument("--seed", type=int, default=0)
    coarse.add_argument("--output", "-o")
    coarse.set_defaults(func=cmd_coarsen)

    tr = sub.add_parser("train", help="Train a surrogate on a generated dataset")
    tr.add_argument("--dataset", required=True, help="Directory with manifest.json")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--epsilon", type=float)
    tr.add_argument("--hidden", help="Comma-separated hidden widths")
    tr.add_argument("--activation", choices=["elu", "prelu", "tanh", "relu"])
    tr.add_argument("--target-loss", type=float)
    tr.add_argument("--warm-start", action="store_true")
    tr.add_argument("--batch", action="store_true", help="One averaged update per epoch")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--output", "-o")
    tr.set_defaults(func=cmd_train)

    sv = sub.add_parser("solve", help="Solve a model on a problem or sample file")
    sv.add_argument("--model", required=True)
    sv.add_argument("--complex", required=True, help="Coarse complex the model was trained on")
    sv.add_argument("--problem", required=True)
    sv.add_argument("--output", "-o")
    sv.set_defaults(func=cmd_solve)

    vf = sub.add_parser("verify", help="Check the structural properties of a model")
    vf.add_argument("--model", required=True)
    vf.add_argument("--complex", required=True)
    vf.add_argument("--seed", type=int, default=0)
    vf.set_defaults(func=cmd_verify)

    ex = sub.add_parser("export", help="Write per-cell plot tables for a state file")
    ex.add_argument("--state", required=True)
    ex.add_argument("--complex", required=True)
    ex.add_argument("--output", "-o")
    ex.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError) as e:
        logger.error("%s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
