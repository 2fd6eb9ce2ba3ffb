"""Dataset manifests: which tensor files exist, their labels and domain tags."""

import json
import os
from dataclasses import dataclass

from .errors import ManifestError
from .tensorio import read_tensor, read_tensor_dims
from .types import FeatureMap

MANIFEST_SCHEMA = "ugt-manifest/1"

DOMAINS = ("source", "target")
OCCLUSION_LEVELS = ("L0", "L1", "L2", "L3")


@dataclass(frozen=True)
class ManifestEntry:
    tensor: str
    label: object  # str | int | None (None = unlabeled target)
    domain: str
    occlusion: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    dim: int
    height: int
    width: int
    entries: tuple
    base_dir: str = "."

    def resolve(self, entry):
        return os.path.normpath(os.path.join(self.base_dir, entry.tensor))

    def split(self):
        source = [e for e in self.entries if e.domain == "source"]
        target = [e for e in self.entries if e.domain == "target"]
        return source, target


def _entry_from_dict(i, raw):
    if not isinstance(raw, dict) or "tensor" not in raw:
        raise ManifestError(f"entry {i}: missing tensor path", category="bad_entry")
    domain = raw.get("domain")
    if domain not in DOMAINS:
        raise ManifestError(f"entry {i}: domain must be one of {DOMAINS}, got {domain!r}", category="bad_domain")
    label = raw.get("label")
    if domain == "source" and label is None:
        raise ManifestError(f"entry {i}: source entries must be labeled", category="missing_label")
    occlusion = raw.get("occlusion")
    if occlusion is not None and occlusion not in OCCLUSION_LEVELS:
        raise ManifestError(
            f"entry {i}: occlusion must be one of {OCCLUSION_LEVELS} or null, got {occlusion!r}",
            category="bad_occlusion",
        )
    return ManifestEntry(tensor=raw["tensor"], label=label, domain=domain, occlusion=occlusion)


def load_manifest(path):
    """Parse and structurally validate a manifest file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}", category="missing_file") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}", category="bad_json") from None
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ManifestError(f"unsupported manifest schema {doc.get('schema')!r}", category="bad_schema")
    for key in ("dim", "height", "width"):
        if not isinstance(doc.get(key), int) or doc[key] < 1:
            raise ManifestError(f"manifest field {key!r} must be a positive integer", category="bad_dims")
    entries = tuple(_entry_from_dict(i, raw) for i, raw in enumerate(doc.get("entries", [])))
    return DatasetManifest(
        dim=doc["dim"],
        height=doc["height"],
        width=doc["width"],
        entries=entries,
        base_dir=os.path.dirname(os.path.abspath(path)) or ".",
    )


def save_manifest(path, manifest):
    doc = {
        "schema": MANIFEST_SCHEMA,
        "dim": manifest.dim,
        "height": manifest.height,
        "width": manifest.width,
        "entries": [
            {"tensor": e.tensor, "label": e.label, "domain": e.domain, "occlusion": e.occlusion}
            for e in manifest.entries
        ],
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def validate_files(manifest):
    """Check that every referenced tensor exists and matches the global dims."""
    expected = (manifest.height, manifest.width, manifest.dim)
    for i, entry in enumerate(manifest.entries):
        path = manifest.resolve(entry)
        if not os.path.isfile(path):
            raise ManifestError(f"entry {i}: missing tensor file {path}", category="missing_file")
        dims = read_tensor_dims(path)
        if tuple(dims) != expected:
            raise ManifestError(
                f"entry {i}: tensor dims {dims} do not match manifest {expected}", category="dim_mismatch"
            )


def load_feature_map(manifest, entry):
    """Read one entry's tensor as a FeatureMap (tolerating float32 norm drift)."""
    arr = read_tensor(manifest.resolve(entry))
    expected = (manifest.height, manifest.width, manifest.dim)
    if arr.shape != expected:
        raise ManifestError(f"tensor dims {arr.shape} do not match manifest {expected}", category="dim_mismatch")
    return FeatureMap.from_array(arr.astype("float64"), renormalize=True)
