"""Command-line pipeline: generate -> train -> explain -> aggregate ->
evaluate / ablate / atlas-report, plus slice-image export.

Every stage reads a JSON run config (defaults below, overridable by
VOXELXAI_<SECTION>__<KEY> env vars), writes artifacts under the output
directory, and records a run manifest with the config hash and seed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .aggregate import (
    ABLATION_CODES,
    FusionWeights,
    GlobalExplanation,
    SIX_COMPONENT_WEIGHTS,
    fit_pca,
    fuse_framework,
    run_ablation,
    total_from_pca,
)
from .atlas import (
    DEFAULT_THRESHOLDS,
    make_synthetic_atlas,
    register_to_atlas,
    threshold_histogram,
    write_histogram_csv,
)
from .attribution import gradcam3d, make_partition, shapley_exact, shapley_sampled
from .dataio import CohortManifest, generate_cohort, read_volume, write_volume
from .errors import ConfigError, MissingArtifactError, VoxelXaiError
from .nn import (
    AugmentConfig,
    Model,
    NetworkSpec,
    TrainConfig,
    class_logit_scorer,
    train,
)
from .dataio import load_cohort
from .scoring import PerturbationPolicy, score_global
from .volume import AffineTransform3D, Volume3D, minmax_normalize

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4

ENV_PREFIX = "VOXELXAI_"

DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 1,
    "cohort": {
        "n_subjects": 60,
        "dims": [16, 16, 16],
        "noise_level": 0.25,
        "ridge_amplitude": 1.0,
    },
    "network": {
        "kind": "two_level_mhl",  # simple_cnn | simple_mhl | two_level_mhl
        "scale": 0.125,
        "d_k": 8,
        "d_v": 8,
        "dropout_rates": [0.1, 0.1],
    },
    "train": {
        "learning_rate": 0.01,
        "lr_decay_half_life": 10,
        "max_epochs": 15,
        "patience": 10,
        "batch_size": 16,
        "augment": True,
        "zca": False,
    },
    "explain": {
        "subjects": "train",
        "max_subjects": 32,
        "class_index": 1,
        "block_size": 8,
        "shap_estimator": "exact",  # exact | sampled
        "shap_permutations": 8,
    },
    "pca": {"k": 6, "weights": list(SIX_COMPONENT_WEIGHTS)},
    "fusion": {"code": "851"},
    "metrics": {"n_draws": 70, "block_size": 4, "baseline": 0.0},
    "atlas": {"n_regions": 6, "thresholds": list(DEFAULT_THRESHOLDS)},
}


def stage_seed(global_seed: int, stage: str) -> int:
    digest = hashlib.blake2b(
        f"{global_seed}:{stage}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") % (1 << 63)


def _deep_update(base, override):
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], val)
        else:
            base[key] = val


def _apply_env(cfg, environ):
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        dotted = key[len(ENV_PREFIX) :].lower().split("__")
        if dotted[0] == "backend":  # consumed by the backends package
            continue
        node = cfg
        for part in dotted[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section in env var {key}")
            node = node[part]
        if dotted[-1] not in node:
            raise ConfigError(f"unknown config key in env var {key}")
        try:
            node[dotted[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            node[dotted[-1]] = raw


def load_config(path, seed_override=None, environ=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as err:
            raise ConfigError(f"config file not found: {path}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}") from err
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        _deep_update(cfg, user)
    _apply_env(cfg, environ if environ is not None else dict(os.environ))
    if seed_override is not None:
        cfg["seed"] = seed_override
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    return cfg


def config_hash(cfg) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True).encode()
    ).hexdigest()[:16]


def write_run_manifest(out_dir, stage, cfg):
    path = Path(out_dir) / "run_manifest.json"
    doc = {"stages": {}}
    if path.exists():
        doc = json.loads(path.read_text())
    doc["stages"][stage] = {
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "version": __version__,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _require(path, what):
    if not Path(path).exists():
        raise MissingArtifactError(f"{what} not found at {path}; run the earlier stage")
    return Path(path)


def _write_scores_csv(path, rows):
    """rows: (method, hemisphere, modality, class_index, faithfulness, complexity)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(
            ["method", "hemisphere", "modality", "class", "faithfulness", "complexity"]
        )
        for method, hemi, modality, cls, faith, compx in rows:
            wr.writerow(
                [method, hemi, modality, cls, f"{faith:.6f}", f"{compx:.6f}"]
            )


# --------------------------------------------------------------------------
# stages


def cmd_generate(cfg, out_dir):
    cc = cfg["cohort"]
    generate_cohort(
        out_dir / "cohort",
        n_subjects=cc["n_subjects"],
        dims=tuple(cc["dims"]),
        noise_level=cc["noise_level"],
        ridge_amplitude=cc["ridge_amplitude"],
        seed=stage_seed(cfg["seed"], "generate"),
    )


def _build_spec(cfg, dims):
    nc = cfg["network"]
    kw = {
        "d_k": nc["d_k"],
        "d_v": nc["d_v"],
        "dropout_rates": tuple(nc["dropout_rates"]),
    }
    kind = nc["kind"]
    if kind == "simple_cnn":
        return NetworkSpec.simple_cnn(dims, nc["scale"], dropout_rates=kw["dropout_rates"])
    if kind == "simple_mhl":
        return NetworkSpec.simple_mhl(dims, nc["scale"], **kw)
    if kind == "two_level_mhl":
        return NetworkSpec.two_level_mhl(dims, nc["scale"], **kw)
    raise ConfigError(f"unknown network kind: {kind!r}")


def cmd_train(cfg, out_dir):
    manifest_path = _require(out_dir / "cohort" / "manifest.json", "cohort manifest")
    cohort = load_cohort(manifest_path)
    dims = cohort.input_dims()
    spec = _build_spec(cfg, dims)
    tc = cfg["train"]
    aug = AugmentConfig.for_dims(dims, zca=tc["zca"]) if tc["augment"] else None
    train_cfg = TrainConfig(
        learning_rate=tc["learning_rate"],
        lr_decay_half_life=tc["lr_decay_half_life"],
        max_epochs=tc["max_epochs"],
        patience=tc["patience"],
        batch_size=tc["batch_size"],
        augment=aug,
        seed=stage_seed(cfg["seed"], "train"),
    )
    model, report = train(cohort, spec, train_cfg)
    model.save(out_dir / "model.npz")
    report.write_csv(out_dir / "train_report.csv")


def _explain_subjects(cfg, out_dir):
    manifest = CohortManifest.load(
        _require(out_dir / "cohort" / "manifest.json", "cohort manifest")
    )
    ec = cfg["explain"]
    wanted_splits = set(ec["subjects"].split("+"))
    records = [
        r
        for r in manifest.subjects
        if r.split in wanted_splits and r.label == ec["class_index"]
    ]
    return manifest, records[: ec["max_subjects"]]


def cmd_explain(cfg, out_dir):
    model = Model.load(_require(out_dir / "model.npz", "model checkpoint"))
    manifest, records = _explain_subjects(cfg, out_dir)
    if not records:
        raise MissingArtifactError("no subjects selected for explanation")
    ec = cfg["explain"]
    cls = ec["class_index"]
    maps_dir = out_dir / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)
    dims = tuple(manifest.dims)
    partition = make_partition(dims, ec["block_size"])
    baseline = Volume3D(dims, np.zeros(int(np.prod(dims))))
    scorer = class_logit_scorer(model, cls)
    seed = stage_seed(cfg["seed"], "explain")
    for i, rec in enumerate(records):
        vol, _ = read_volume(out_dir / "cohort" / rec.path)
        cam = gradcam3d(model, vol, cls, subject_id=rec.subject_id)
        write_volume(
            maps_dir / f"{rec.subject_id}_gradcam.xv3d",
            cam.map,
            {"method": "gradcam", "class": cls, "subject_id": rec.subject_id},
        )
        estimator = ec["shap_estimator"]
        if estimator == "exact":
            shap = shapley_exact(
                scorer, vol, partition, baseline,
                class_index=cls, subject_id=rec.subject_id,
            )
        elif estimator == "sampled":
            shap = shapley_sampled(
                scorer,
                vol,
                partition,
                baseline,
                n_permutations=ec["shap_permutations"],
                seed=seed + i,
                class_index=cls,
                subject_id=rec.subject_id,
            )
        else:
            raise ConfigError(f"unknown shap estimator: {estimator!r}")
        write_volume(
            maps_dir / f"{rec.subject_id}_shap.xv3d",
            shap.map,
            {"method": "shap", "class": cls, "subject_id": rec.subject_id},
        )


def _load_global(out_dir, source):
    path = _require(out_dir / "globals" / f"{source}.xv3d", f"{source} map")
    vol, meta = read_volume(path)
    return GlobalExplanation(
        vol,
        source,
        meta.get("class", 1),
        modality=meta.get("modality", ""),
        hemisphere=meta.get("hemisphere", ""),
    )


def cmd_aggregate(cfg, out_dir):
    manifest, records = _explain_subjects(cfg, out_dir)
    k = cfg["pca"]["k"]
    weights = tuple(cfg["pca"]["weights"])
    cls = cfg["explain"]["class_index"]
    if len(records) < k:
        raise MissingArtifactError(
            f"need at least k={k} explained subjects, have {len(records)}"
        )
    maps_dir = _require(out_dir / "maps", "attribution maps")
    inputs, shap_maps, cam_maps = [], [], []
    for rec in records:
        vol, _ = read_volume(out_dir / "cohort" / rec.path)
        inputs.append(vol)
        shap_maps.append(read_volume(maps_dir / f"{rec.subject_id}_shap.xv3d")[0])
        cam_maps.append(read_volume(maps_dir / f"{rec.subject_id}_gradcam.xv3d")[0])

    globals_dir = out_dir / "globals"
    globals_dir.mkdir(parents=True, exist_ok=True)
    meta = {"class": cls, "modality": "skeleton", "hemisphere": "L"}
    totals = {}
    for source, samples in (
        ("total_shape", inputs),
        ("total_shap", shap_maps),
        ("total_gradcam", cam_maps),
    ):
        g = total_from_pca(
            fit_pca(samples, k),
            source,
            class_index=cls,
            weights=weights,
            modality="skeleton",
            hemisphere="L",
        )
        totals[source] = g
        write_volume(globals_dir / f"{source}.xv3d", g.map, dict(meta, source=source))

    fused = fuse_framework(
        totals["total_shape"],
        totals["total_shap"],
        totals["total_gradcam"],
        FusionWeights.from_code(cfg["fusion"]["code"]),
    )
    write_volume(
        globals_dir / "framework.xv3d",
        fused.map,
        dict(meta, source="framework", code=cfg["fusion"]["code"]),
    )


def _policy(cfg, dims):
    mc = cfg["metrics"]
    return PerturbationPolicy(
        partition=make_partition(dims, mc["block_size"]),
        baseline_value=mc["baseline"],
        n_draws=mc["n_draws"],
        seed=stage_seed(cfg["seed"], "metrics"),
    )


def cmd_evaluate(cfg, out_dir):
    model = Model.load(_require(out_dir / "model.npz", "model checkpoint"))
    total_shape = _load_global(out_dir, "total_shape")
    cls = cfg["explain"]["class_index"]
    scorer = class_logit_scorer(model, cls)
    pol = _policy(cfg, total_shape.map.dims)
    rows = []
    for source in ("total_shap", "total_gradcam", "framework"):
        g = _load_global(out_dir, source)
        score = score_global(total_shape, g, scorer, pol)
        rows.append(
            (source, "L", "skeleton", cls, score.faithfulness, score.complexity)
        )
    _write_scores_csv(out_dir / "scores.csv", rows)


def cmd_ablate(cfg, out_dir):
    model = Model.load(_require(out_dir / "model.npz", "model checkpoint"))
    total_shape = _load_global(out_dir, "total_shape")
    shap = _load_global(out_dir, "total_shap")
    cam = _load_global(out_dir, "total_gradcam")
    cls = cfg["explain"]["class_index"]
    scorer = class_logit_scorer(model, cls)
    pol = _policy(cfg, total_shape.map.dims)
    rows = run_ablation(total_shape, shap, cam, scorer, pol)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(
            ["code", "hemisphere", "modality", "class", "faithfulness", "complexity"]
        )
        for row in rows:
            wr.writerow(
                [row.code, "L", "skeleton", cls,
                 f"{row.faithfulness:.6f}", f"{row.complexity:.6f}"]
            )


def cmd_atlas_report(cfg, out_dir):
    framework = _load_global(out_dir, "framework")
    ac = cfg["atlas"]
    atlas = make_synthetic_atlas(
        framework.map.dims, ac["n_regions"], stage_seed(cfg["seed"], "atlas")
    )
    atlas.save(out_dir / "atlas")
    registered = register_to_atlas(
        framework, atlas, AffineTransform3D.identity()
    )
    hists = [
        threshold_histogram(registered, atlas, frac) for frac in ac["thresholds"]
    ]
    write_histogram_csv(out_dir / "atlas_histogram.csv", hists)


def emit_slices(v: Volume3D, axis: str, out_dir):
    """One binary PGM per slice along the axis; 0-255 after normalization."""
    if axis not in ("x", "y", "z"):
        raise ConfigError(f"axis must be x, y or z: {axis!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arr = minmax_normalize(v).to_array()  # (z, y, x)
    axis_num = {"z": 0, "y": 1, "x": 2}[axis]
    paths = []
    for i in range(arr.shape[axis_num]):
        plane = np.take(arr, i, axis=axis_num)
        pixels = np.floor(255.0 * plane + 0.5).astype(np.uint8)
        path = out_dir / f"slice_{axis}_{i:03d}.pgm"
        with open(path, "wb") as fh:
            fh.write(f"P5 {pixels.shape[1]} {pixels.shape[0]} 255\n".encode())
            fh.write(pixels.tobytes())
        paths.append(path)
    return paths


def cmd_slices(cfg, out_dir, volume_path, axis):
    vol, _ = read_volume(_require(volume_path, "volume"))
    emit_slices(vol, axis, out_dir / "slices")


STAGES = {
    "generate": cmd_generate,
    "train": cmd_train,
    "explain": cmd_explain,
    "aggregate": cmd_aggregate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "atlas-report": cmd_atlas_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="voxelxai",
        description="Volumetric XAI pipeline: train, explain, aggregate, score.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(STAGES) + ["slices"]:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--threads", type=int, default=None)
        if name == "slices":
            p.add_argument("volume", help="XV3D volume to slice")
            p.add_argument("--axis", default="z", choices=["x", "y", "z"])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        if args.threads is not None:
            cfg["threads"] = args.threads
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "slices":
            cmd_slices(cfg, out_dir, args.volume, args.axis)
        else:
            STAGES[args.command](cfg, out_dir)
        write_run_manifest(out_dir, args.command, cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as err:
        print(f"missing prerequisite: {err}", file=sys.stderr)
        return EXIT_MISSING
    except VoxelXaiError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
