"""Command-line interface.

Subcommands mirror the pipeline stages plus dataset synthesis, evaluation and
format conversion. Flag precedence is CLI > config file > built-in default.
Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

import argparse
import json
import math
import os
import sys

import numpy as np

from . import synth as synth_mod
from .adapt import adapt_dictionary
from .bundle import ModelBundle, load_bundle, save_bundle
from .classifier import GenerativeModel, batch_classify, fit_spatial_coefficients
from .errors import EXIT_IO, EXIT_OK, UgtError
from .finetune import finetune_rounds, pseudo_label
from .manifest import DatasetManifest, ManifestEntry, load_feature_map, load_manifest, save_manifest, validate_files
from .pipeline import PipelineConfig, evaluate, run_pipeline
from .tensorio import convert, write_tensor
from .vmf import em_fit_dictionary


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _merged_config(args):
    """Apply CLI overrides on top of the config file on top of defaults."""
    doc = _load_config_file(getattr(args, "config", None))
    for key in ("k", "sigma", "mixtures", "seed", "tau", "k_background", "background_tensor"):
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    for section, keys in (
        ("em", ("max_iters", "ll_tol", "kmeans_restarts")),
        ("adapt", ("psi_init", "psi_mode", "stabilize_tol", "adapt_pi", "omega")),
        ("finetune", ("q", "zeta_v", "zeta_alpha", "learning_rate", "epochs", "threshold", "mode", "iterations")),
    ):
        for key in keys:
            value = getattr(args, f"{section}_{key}", None)
            if value is not None:
                doc.setdefault(section, {})[key] = value
    return PipelineConfig.from_dict(doc)


def _write_json(path, doc):
    if path in (None, "-"):
        json.dump(doc, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
        return
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _cmd_synth(args):
    spec = synth_mod.DomainPairSpec(
        n_classes=args.classes,
        k=args.kernels,
        dim=args.dim,
        height=args.height,
        width=args.width,
        mixtures=args.mixtures if args.mixtures is not None else 2,
        sigma=args.sigma if args.sigma is not None else 30.0,
        shared_kernel_fraction=args.shared_fraction,
        shift_angle=args.shift_angle,
        maps_per_class_source=args.source_maps,
        maps_per_class_target=args.target_maps,
        seed=args.seed if args.seed is not None else 0,
        class_distinct_fraction=args.class_distinct_fraction,
    )
    out = args.out
    tensor_dir = os.path.join(out, "tensors")
    os.makedirs(tensor_dir, exist_ok=True)
    source, target, truth = synth_mod.make_domain_pair(spec)

    entries = []
    for i, (fm, label) in enumerate(zip(source.maps, source.labels)):
        rel = f"tensors/source_{i:05d}.ugt"
        write_tensor(os.path.join(out, rel), fm.vectors)
        entries.append(ManifestEntry(tensor=rel, label=label, domain="source"))
    for i, fm in enumerate(target.maps):
        rel = f"tensors/target_{i:05d}.ugt"
        write_tensor(os.path.join(out, rel), fm.vectors)
        entries.append(ManifestEntry(tensor=rel, label=None, domain="target"))
    train = DatasetManifest(
        dim=spec.dim, height=spec.height, width=spec.width, entries=tuple(entries), base_dir=out
    )
    save_manifest(os.path.join(out, "train_manifest.json"), train)

    # Background density: known occluder model, sampled for Q estimation.
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(5)[4])
    k_b = args.k_background if args.k_background is not None else 4
    q = synth_mod.make_background_model(truth.target_model.dictionary.kernels, k_b, spec.sigma, rng)
    q_samples = np.concatenate(
        [synth_mod.sample_vmf(q.kernels[j], spec.sigma, rng, 500) for j in range(q.k)], axis=0
    )
    write_tensor(os.path.join(out, "background.ugt"), q_samples)

    # Held-out labeled target maps at every occlusion level.
    eval_entries = []
    eval_rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(6)[5])
    counter = 0
    for y in truth.target_model.classes:
        for _ in range(args.eval_maps):
            m = int(eval_rng.integers(spec.mixtures))
            fm, _rec = synth_mod.sample_feature_map(truth.target_model, y, m, eval_rng)
            for level in (None, "L1", "L2", "L3"):
                if level is None:
                    occluded = fm
                else:
                    occluded, _mask = synth_mod.inject_occlusion(fm, level, q, eval_rng)
                rel = f"tensors/eval_{counter:05d}.ugt"
                counter += 1
                write_tensor(os.path.join(out, rel), occluded.vectors)
                eval_entries.append(
                    ManifestEntry(tensor=rel, label=y, domain="target", occlusion=level or "L0")
                )
    eval_manifest = DatasetManifest(
        dim=spec.dim, height=spec.height, width=spec.width, entries=tuple(eval_entries), base_dir=out
    )
    save_manifest(os.path.join(out, "eval_manifest.json"), eval_manifest)

    config = PipelineConfig(
        k=spec.k,
        sigma=spec.sigma,
        mixtures=spec.mixtures,
        seed=spec.seed,
        tau=args.tau if args.tau is not None else 0.55,
        background_tensor="background.ugt",
        k_background=q.k,
    )
    _write_json(os.path.join(out, "config.json"), config.to_dict())
    _write_json(
        os.path.join(out, "truth.json"),
        {
            "shared_kernels": truth.shared_kernels.tolist(),
            "shift_angle": spec.shift_angle,
            "expected_shift_cosine": math.cos(spec.shift_angle),
            "classes": list(truth.source_model.classes),
        },
    )
    print(f"wrote {len(entries)} training and {len(eval_entries)} evaluation maps under {out}")
    return EXIT_OK


def _cmd_fit_vmf(args):
    cfg = _merged_config(args)
    manifest = load_manifest(args.manifest)
    validate_files(manifest)
    source_entries, _ = manifest.split()
    maps = [load_feature_map(manifest, e) for e in source_entries]
    features = np.concatenate([fm.flat for fm in maps], axis=0)
    dictionary, trace = em_fit_dictionary(features, cfg.k, sigma=cfg.sigma, cfg=cfg.em)
    labels = [e.label for e in source_entries]
    spatial = fit_spatial_coefficients(maps, labels, dictionary, m=cfg.mixtures, seed=cfg.seed)
    bundle = ModelBundle(
        model=GenerativeModel(dictionary=dictionary, spatial=spatial),
        stage="source",
        provenance={"stage": "source", "config_hash": cfg.config_hash(), "seed": cfg.seed},
    )
    save_bundle(args.out, bundle)
    print(f"fit {cfg.k} kernels in {len(trace) - 1} iterations; bundle: {args.out}")
    return EXIT_OK


def _cmd_adapt(args):
    cfg = _merged_config(args)
    manifest = load_manifest(args.manifest)
    validate_files(manifest)
    _, target_entries = manifest.split()
    maps = [load_feature_map(manifest, e) for e in target_entries]
    features = np.concatenate([fm.flat for fm in maps], axis=0)
    source = load_bundle(args.bundle)
    adapted, report = adapt_dictionary(source.model.dictionary, features, cfg.adapt)

    source_entries, _ = manifest.split()
    src_maps = [load_feature_map(manifest, e) for e in source_entries]
    src_labels = [e.label for e in source_entries]
    spatial = fit_spatial_coefficients(src_maps, src_labels, adapted, m=cfg.mixtures, seed=cfg.seed)
    bundle = ModelBundle(
        model=GenerativeModel(dictionary=adapted, spatial=spatial, occlusion=source.model.occlusion),
        stage="transitional",
        provenance={"stage": "transitional", "config_hash": cfg.config_hash(), "seed": cfg.seed},
        adapt_report=report,
    )
    save_bundle(args.out, bundle)
    print(f"adapted {adapted.k} kernels in {report.iterations} iterations; bundle: {args.out}")
    return EXIT_OK


def _cmd_fit_spatial(args):
    cfg = _merged_config(args)
    manifest = load_manifest(args.manifest)
    validate_files(manifest)
    source_entries, _ = manifest.split()
    maps = [load_feature_map(manifest, e) for e in source_entries]
    labels = [e.label for e in source_entries]
    bundle = load_bundle(args.bundle)
    spatial = fit_spatial_coefficients(maps, labels, bundle.model.dictionary, m=cfg.mixtures, seed=cfg.seed)
    out_bundle = ModelBundle(
        model=GenerativeModel(
            dictionary=bundle.model.dictionary, spatial=spatial, occlusion=bundle.model.occlusion
        ),
        stage=bundle.stage,
        provenance=bundle.provenance,
        adapt_report=bundle.adapt_report,
    )
    save_bundle(args.out, out_bundle)
    print(f"fit spatial coefficients for {len(spatial.classes)} classes; bundle: {args.out}")
    return EXIT_OK


def _cmd_pseudo_label(args):
    cfg = _merged_config(args)
    manifest = load_manifest(args.manifest)
    validate_files(manifest)
    _, target_entries = manifest.split()
    maps = [load_feature_map(manifest, e) for e in target_entries]
    bundle = load_bundle(args.bundle)
    labeled = pseudo_label(maps, bundle.model, cfg.finetune.threshold)
    doc = {
        "schema": "ugt-pseudo-labels/1",
        "threshold": labeled.threshold,
        "entries": [
            {"tensor": target_entries[e.map_id].tensor, "map_index": e.map_id, "label": e.label, "confidence": e.confidence}
            for e in labeled.entries
        ],
    }
    _write_json(args.out, doc)
    print(f"kept {len(labeled)} of {len(maps)} target maps at threshold {labeled.threshold}")
    return EXIT_OK


def _cmd_finetune(args):
    cfg = _merged_config(args)
    manifest = load_manifest(args.manifest)
    validate_files(manifest)
    _, target_entries = manifest.split()
    maps = [load_feature_map(manifest, e) for e in target_entries]
    bundle = load_bundle(args.bundle)
    model, round_log = finetune_rounds(bundle.model, maps, cfg.finetune)
    if not any(round_log):
        print("no target map cleared the pseudo-label threshold; bundle unchanged")
    out_bundle = ModelBundle(
        model=model,
        stage="finetuned",
        provenance={
            "stage": "finetuned",
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "pseudo_label_rounds": round_log,
        },
    )
    save_bundle(args.out, out_bundle)
    print(f"finetuned over {len(round_log)} round(s) with {round_log} pseudo labels; bundle: {args.out}")
    return EXIT_OK


def _cmd_classify(args):
    manifest = load_manifest(args.manifest)
    validate_files(manifest)
    bundle = load_bundle(args.bundle)
    maps = [load_feature_map(manifest, e) for e in manifest.entries]
    labels, scores = batch_classify(maps, bundle.model, use_occlusion=args.use_occlusion)
    doc = {
        "schema": "ugt-predictions/1",
        "use_occlusion": bool(args.use_occlusion),
        "predictions": [
            {
                "tensor": e.tensor,
                "label": lab,
                "scores": {str(y): float(s) for y, s in zip(bundle.model.classes, row)},
            }
            for e, lab, row in zip(manifest.entries, labels, scores)
        ],
    }
    _write_json(args.out, doc)
    return EXIT_OK


def _cmd_evaluate(args):
    bundle = load_bundle(args.bundle)
    report = evaluate(args.manifest, bundle, use_occlusion=args.use_occlusion)
    table = report.pop("table")
    _write_json(args.out, report)
    print(table)
    return EXIT_OK


def _cmd_pipeline(args):
    cfg = _merged_config(args)
    bundle, report = run_pipeline(args.manifest, cfg, out_dir=args.out, resume=not args.no_resume)
    _write_json(os.path.join(args.out, "pipeline_report.json"), report)
    if "notice" in report:
        print(report["notice"])
    print(f"final stage: {report['final_stage']}; bundle hash: {report['final_bundle_hash']}")
    return EXIT_OK


def _cmd_convert(args):
    convert(args.src, args.dst)
    print(f"converted {args.src} -> {args.dst}")
    return EXIT_OK


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file; CLI flags win over it")
    p.add_argument("--k", type=int, help="dictionary size")
    p.add_argument("--sigma", type=float, help="shared vMF concentration")
    p.add_argument("--mixtures", type=int, help="spatial mixtures per class")
    p.add_argument("--seed", type=int)
    p.add_argument("--tau", type=float, help="occlusion prior")
    p.add_argument("--k-background", dest="k_background", type=int)
    p.add_argument("--background-tensor", dest="background_tensor")
    p.add_argument("--em-max-iters", dest="em_max_iters", type=int)
    p.add_argument("--em-ll-tol", dest="em_ll_tol", type=float)
    p.add_argument("--em-kmeans-restarts", dest="em_kmeans_restarts", type=int)
    p.add_argument("--adapt-psi-init", dest="adapt_psi_init", type=float)
    p.add_argument("--adapt-psi-mode", dest="adapt_psi_mode", choices=("fixed", "monotone_schedule", "data_dependent"))
    p.add_argument("--adapt-stabilize-tol", dest="adapt_stabilize_tol", type=float)
    p.add_argument("--adapt-omega", dest="adapt_omega", type=float)
    p.add_argument("--adapt-adapt-pi", dest="adapt_adapt_pi", action="store_const", const=True)
    p.add_argument("--finetune-q", dest="finetune_q", type=float)
    p.add_argument("--finetune-zeta-v", dest="finetune_zeta_v", type=float)
    p.add_argument("--finetune-zeta-alpha", dest="finetune_zeta_alpha", type=float)
    p.add_argument("--finetune-learning-rate", dest="finetune_learning_rate", type=float)
    p.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    p.add_argument("--finetune-threshold", dest="finetune_threshold", type=float)
    p.add_argument("--finetune-mode", dest="finetune_mode", choices=("refit", "gradient", "refit_then_gradient"))
    p.add_argument("--finetune-iterations", dest="finetune_iterations", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="ugt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic domain pair with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--kernels", type=int, default=24)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--height", type=int, default=7)
    p.add_argument("--width", type=int, default=7)
    p.add_argument("--shared-fraction", dest="shared_fraction", type=float, default=0.5)
    p.add_argument("--shift-angle", dest="shift_angle", type=float, default=math.pi / 3)
    p.add_argument("--class-distinct-fraction", dest="class_distinct_fraction", type=float, default=1.0)
    p.add_argument("--source-maps", dest="source_maps", type=int, default=200)
    p.add_argument("--target-maps", dest="target_maps", type=int, default=200)
    p.add_argument("--eval-maps", dest="eval_maps", type=int, default=40)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fit-vmf", help="fit the source dictionary and spatial coefficients")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_fit_vmf)

    p = sub.add_parser("adapt", help="adapt a source bundle's dictionary to target features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("fit-spatial", help="refit spatial coefficients for an existing bundle")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_fit_spatial)

    p = sub.add_parser("pseudo-label", help="pseudo-label target maps with a bundle")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", default="-")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_pseudo_label)

    p = sub.add_parser("finetune", help="pseudo-label and finetune a bundle")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("classify", help="classify every entry of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--use-occlusion", dest="use_occlusion", action="store_true")
    p.set_defaults(func=_cmd_classify)

    p = sub.add_parser("evaluate", help="accuracy report over a labeled manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", default="-")
    p.add_argument("--use-occlusion", dest="use_occlusion", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("pipeline", help="run all stages with checkpointing")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-resume", dest="no_resume", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("convert", help="convert between .npy and the tensor format")
    p.add_argument("src")
    p.add_argument("dst")
    p.set_defaults(func=_cmd_convert)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UgtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
