"""Staged training pipeline and the evaluation reporter.

Stages run in order — source dictionary + spatial fit, dictionary adaptation
with a spatial refit, pseudo-label finetuning — each checkpointed as a model
bundle. A rerun with the same inputs and config reproduces every bundle
byte for byte, and completed stages are picked up from their checkpoints.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .adapt import AdaptConfig, adapt_dictionary
from .bundle import ModelBundle, bundle_hash, load_bundle, save_bundle
from .classifier import GenerativeModel, OcclusionModel, batch_classify, fit_background_model, fit_spatial_coefficients
from .errors import ManifestError, ValidationError
from .finetune import FinetuneConfig, finetune_rounds
from .manifest import load_feature_map, load_manifest, validate_files
from .tensorio import read_tensor
from .vmf import EmConfig, em_fit_dictionary


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 512
    sigma: float = 30.0
    mixtures: int = 4
    seed: int = 0
    em: EmConfig = field(default_factory=EmConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    tau: float = 0.55
    background_tensor: str | None = None
    k_background: int = 4

    def to_dict(self):
        adapt = dict(vars(self.adapt))
        adapt["omega"] = np.asarray(self.adapt.omega).tolist()
        return {
            "k": self.k,
            "sigma": self.sigma,
            "mixtures": self.mixtures,
            "seed": self.seed,
            "em": dict(vars(self.em)),
            "adapt": adapt,
            "finetune": dict(vars(self.finetune)),
            "tau": self.tau,
            "background_tensor": self.background_tensor,
            "k_background": self.k_background,
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc or {})
        em = EmConfig(**doc.pop("em", {}))
        adapt = AdaptConfig(**doc.pop("adapt", {}))
        finetune = FinetuneConfig(**doc.pop("finetune", {}))
        known = {f for f in cls.__dataclass_fields__ if f not in ("em", "adapt", "finetune")}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(em=em, adapt=adapt, finetune=finetune, **doc)

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _load_split(manifest):
    source_entries, target_entries = manifest.split()
    source_maps = [load_feature_map(manifest, e) for e in source_entries]
    source_labels = [e.label for e in source_entries]
    target_maps = [load_feature_map(manifest, e) for e in target_entries]
    return source_maps, source_labels, target_maps


def _pooled(maps):
    if not maps:
        return np.empty((0, 0))
    return np.concatenate([fm.flat for fm in maps], axis=0)


def _fit_occlusion(manifest, cfg):
    if cfg.background_tensor is None:
        return None
    path = os.path.join(manifest.base_dir, cfg.background_tensor)
    background = read_tensor(path).astype("float64")
    if background.ndim != 2:
        raise ValidationError(f"background tensor must be (n, D), got shape {background.shape}")
    norms = np.linalg.norm(background, axis=1, keepdims=True)
    background = background / norms
    q = fit_background_model(background, cfg.k_background, cfg.sigma, cfg=cfg.em)
    return OcclusionModel(background=q, tau=cfg.tau)


def _checkpoint_path(out_dir, stage):
    return os.path.join(out_dir, f"{stage}.bundle.json")


def _try_resume(out_dir, stage, chash):
    path = _checkpoint_path(out_dir, stage)
    if not os.path.isfile(path):
        return None
    bundle = load_bundle(path)
    if bundle.provenance.get("config_hash") != chash:
        return None
    return bundle


def run_pipeline(manifest_path, cfg=None, out_dir=".", resume=True):
    """Run all stages; returns (final bundle, report dict)."""
    cfg = cfg or PipelineConfig()
    manifest = load_manifest(manifest_path)
    validate_files(manifest)
    os.makedirs(out_dir, exist_ok=True)
    chash = cfg.config_hash()
    report = {"stages": [], "config_hash": chash}

    source_maps, source_labels, target_maps = _load_split(manifest)
    if not source_maps:
        raise ManifestError("manifest has no source entries", category="no_source")
    occlusion = _fit_occlusion(manifest, cfg)

    def provenance(stage):
        return {"stage": stage, "config_hash": chash, "seed": cfg.seed}

    # Stage 1: source dictionary + spatial coefficients.
    bundle = _try_resume(out_dir, "source", chash) if resume else None
    if bundle is None:
        source_dict, _ = em_fit_dictionary(_pooled(source_maps), cfg.k, sigma=cfg.sigma, cfg=cfg.em)
        spatial = fit_spatial_coefficients(source_maps, source_labels, source_dict, m=cfg.mixtures, seed=cfg.seed)
        model = GenerativeModel(dictionary=source_dict, spatial=spatial, occlusion=occlusion)
        bundle = ModelBundle(model=model, stage="source", provenance=provenance("source"))
        save_bundle(_checkpoint_path(out_dir, "source"), bundle)
        report["stages"].append({"stage": "source", "resumed": False})
    else:
        report["stages"].append({"stage": "source", "resumed": True})
    source_bundle = bundle

    if not target_maps:
        report["notice"] = "manifest has no target entries; stopped after the source stage"
        report["final_stage"] = "source"
        report["final_bundle_hash"] = bundle_hash(_checkpoint_path(out_dir, "source"))
        return source_bundle, report

    # Stage 2: adapt the dictionary on target features, refit spatial on source.
    bundle = _try_resume(out_dir, "transitional", chash) if resume else None
    if bundle is None:
        adapted, adapt_report = adapt_dictionary(source_bundle.model.dictionary, _pooled(target_maps), cfg.adapt)
        spatial = fit_spatial_coefficients(source_maps, source_labels, adapted, m=cfg.mixtures, seed=cfg.seed)
        model = GenerativeModel(dictionary=adapted, spatial=spatial, occlusion=occlusion)
        bundle = ModelBundle(
            model=model, stage="transitional", provenance=provenance("transitional"), adapt_report=adapt_report
        )
        save_bundle(_checkpoint_path(out_dir, "transitional"), bundle)
        report["stages"].append({"stage": "transitional", "resumed": False})
    else:
        report["stages"].append({"stage": "transitional", "resumed": True})
    transitional_bundle = bundle

    # Stage 3: pseudo-label target maps and finetune the spatial coefficients.
    bundle = _try_resume(out_dir, "finetuned", chash) if resume else None
    if bundle is None:
        model, round_log = finetune_rounds(transitional_bundle.model, target_maps, cfg.finetune)
        notice = None
        if not any(round_log):
            notice = "no target map cleared the pseudo-label threshold; finetune skipped"
        prov = provenance("finetuned") | {"pseudo_label_rounds": round_log}
        bundle = ModelBundle(model=model, stage="finetuned", provenance=prov)
        save_bundle(_checkpoint_path(out_dir, "finetuned"), bundle)
        entry = {"stage": "finetuned", "resumed": False, "pseudo_label_rounds": round_log}
        if notice:
            entry["notice"] = notice
        report["stages"].append(entry)
    else:
        report["stages"].append({"stage": "finetuned", "resumed": True})

    report["final_stage"] = "finetuned"
    report["final_bundle_hash"] = bundle_hash(_checkpoint_path(out_dir, "finetuned"))
    return bundle, report


def evaluate(manifest_path, bundle, use_occlusion=False):
    """Accuracy report over a labeled manifest, broken out by occlusion level.

    Returns a dict with overall, per-class and per-level accuracy plus an
    aligned text table under the "table" key.
    """
    manifest = load_manifest(manifest_path)
    validate_files(manifest)
    if not manifest.entries:
        raise ManifestError("evaluation manifest has no entries", category="no_entries")
    for i, entry in enumerate(manifest.entries):
        if entry.label is None:
            raise ManifestError(f"entry {i}: evaluation entries must be labeled", category="missing_label")
    if use_occlusion and bundle.model.occlusion is None:
        raise ValidationError("use_occlusion requires a bundle with an occlusion component")

    maps = [load_feature_map(manifest, e) for e in manifest.entries]
    labels = [e.label for e in manifest.entries]
    levels = [e.occlusion or "L0" for e in manifest.entries]
    predicted, _ = batch_classify(maps, bundle.model, use_occlusion=use_occlusion)

    hits = np.array([p == t for p, t in zip(predicted, labels)], dtype=np.float64)
    by_level, by_class = {}, {}
    for lvl in sorted(set(levels)):
        idx = [i for i, l in enumerate(levels) if l == lvl]
        by_level[lvl] = float(hits[idx].mean())
    for y in sorted(set(labels)):
        idx = [i for i, t in enumerate(labels) if t == y]
        by_class[str(y)] = float(hits[idx].mean())

    report = {
        "schema": "ugt-eval/1",
        "use_occlusion": use_occlusion,
        "stage": bundle.stage,
        "count": len(maps),
        "overall_accuracy": float(hits.mean()),
        "accuracy_by_level": by_level,
        "accuracy_by_class": by_class,
    }
    rows = [("level", "accuracy", "count")]
    for lvl in sorted(by_level):
        n = sum(1 for l in levels if l == lvl)
        rows.append((lvl, f"{by_level[lvl]:.4f}", str(n)))
    rows.append(("overall", f"{report['overall_accuracy']:.4f}", str(len(maps))))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    report["table"] = "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)
    return report
