"""Model bundle serialization: one JSON file, bit-exact array round trips.

Arrays are embedded as base64 little-endian payloads with dtype and shape, and
keys are written sorted, so identical models always serialize to identical
bytes — the pipeline's determinism checks hash these files directly.
"""

import base64
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .adapt import AdaptReport, SimilarityReport
from .classifier import GenerativeModel, OcclusionModel, SpatialCoefficients
from .errors import ManifestError
from .types import VmfDictionary

BUNDLE_SCHEMA = "ugt-bundle/1"

STAGES = ("source", "transitional", "finetuned")


@dataclass(frozen=True)
class ModelBundle:
    model: GenerativeModel
    stage: str
    provenance: dict
    adapt_report: AdaptReport | None = None


def _enc(arr, dtype):
    arr = np.ascontiguousarray(np.asarray(arr), dtype=dtype)
    return {
        "dtype": str(np.dtype(dtype)),
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _dec(obj):
    arr = np.frombuffer(base64.b64decode(obj["data"]), dtype=np.dtype(obj["dtype"]))
    return arr.reshape(obj["shape"]).copy()


def _dictionary_to_doc(d):
    return {
        "kernels": _enc(d.kernels, "<f8"),
        "concentration": d.concentration,
        "mix_weights": _enc(d.mix_weights, "<f8"),
    }


def _dictionary_from_doc(doc):
    return VmfDictionary(
        kernels=_dec(doc["kernels"]),
        concentration=float(doc["concentration"]),
        mix_weights=_dec(doc["mix_weights"]),
    )


def _report_to_doc(r):
    return {
        "final_psi": _enc(r.final_psi, "<f8"),
        "cosine_to_source": _enc(r.cosine_to_source, "<f8"),
        "trace": list(map(float, r.trace)),
        "objective_deltas": list(map(float, r.objective_deltas)),
        "stabilized_at": _enc(r.stabilized_at, "<i8"),
        "penalty_metric": r.penalty_metric,
        "iterations": r.iterations,
        "similarity": None
        if r.similarity is None
        else {
            "cosines": _enc(r.similarity.cosines, "<f8"),
            "histogram": _enc(r.similarity.histogram, "<i8"),
            "bin_edges": _enc(r.similarity.bin_edges, "<f8"),
        },
    }


def _report_from_doc(doc):
    similarity = None
    if doc.get("similarity") is not None:
        s = doc["similarity"]
        similarity = SimilarityReport(
            cosines=_dec(s["cosines"]), histogram=_dec(s["histogram"]), bin_edges=_dec(s["bin_edges"])
        )
    return AdaptReport(
        final_psi=_dec(doc["final_psi"]),
        cosine_to_source=_dec(doc["cosine_to_source"]),
        trace=list(doc["trace"]),
        objective_deltas=list(doc["objective_deltas"]),
        stabilized_at=_dec(doc["stabilized_at"]),
        penalty_metric=doc["penalty_metric"],
        similarity=similarity,
        iterations=int(doc["iterations"]),
    )


def save_bundle(path, bundle):
    if bundle.stage not in STAGES:
        raise ManifestError(f"unknown bundle stage {bundle.stage!r}", category="bad_stage")
    model = bundle.model
    doc = {
        "schema": BUNDLE_SCHEMA,
        "stage": bundle.stage,
        "provenance": bundle.provenance,
        "dictionary": _dictionary_to_doc(model.dictionary),
        "spatial": {
            "classes": list(model.spatial.classes),
            "alpha": _enc(model.spatial.alpha, "<f8"),
        },
        "occlusion": None
        if model.occlusion is None
        else {"background": _dictionary_to_doc(model.occlusion.background), "tau": model.occlusion.tau},
        "adapt_report": None if bundle.adapt_report is None else _report_to_doc(bundle.adapt_report),
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    os.replace(tmp, path)


def load_bundle(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"bundle not found: {path}", category="missing_file") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"bundle is not valid JSON: {exc}", category="bad_json") from None
    if doc.get("schema") != BUNDLE_SCHEMA:
        raise ManifestError(f"unsupported bundle schema {doc.get('schema')!r}", category="bad_schema")
    spatial = SpatialCoefficients(classes=tuple(doc["spatial"]["classes"]), alpha=_dec(doc["spatial"]["alpha"]))
    occlusion = None
    if doc.get("occlusion") is not None:
        occlusion = OcclusionModel(
            background=_dictionary_from_doc(doc["occlusion"]["background"]), tau=float(doc["occlusion"]["tau"])
        )
    model = GenerativeModel(dictionary=_dictionary_from_doc(doc["dictionary"]), spatial=spatial, occlusion=occlusion)
    report = None if doc.get("adapt_report") is None else _report_from_doc(doc["adapt_report"])
    return ModelBundle(model=model, stage=doc["stage"], provenance=doc.get("provenance", {}), adapt_report=report)


def bundle_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
