"""Run a convolutional backbone over images and export feature-map tensors.

Each image becomes one tensor file of shape (H, W, D): the chosen layer's
activation grid with every spatial vector L2-normalized, written in the ugt
tensor format together with a dataset manifest. Inference is frozen and
deterministic (fixed seed, eval mode, single thread), so re-exporting with
the same config reproduces identical bytes.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from torchvision.models import get_model
from torchvision.models.feature_extraction import create_feature_extractor, get_graph_node_names

from .formats import write_manifest, write_tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# common layer aliases per backbone; any exact graph node name also works
LAYER_ALIASES = {
    "vgg16": {"pool5": "features.30"},
    "vgg16_bn": {"pool5": "features.43"},
    "resnet50": {"layer4": "layer4"},
}

RESIZE_MODES = ("stretch", "center_crop")


@dataclass(frozen=True)
class ImageSpec:
    path: str
    label: object = None
    domain: str = "source"

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be source or target, got {self.domain!r}")
        if self.domain == "source" and self.label is None:
            raise ValueError(f"source image {self.path} needs a label")


@dataclass(frozen=True)
class ExportConfig:
    backbone: str
    layer: str
    images: tuple
    output_dir: str
    resize: tuple = (224, 224)
    resize_mode: str = "stretch"
    checkpoint: str | None = None
    seed: int = 0
    normalize_mean: tuple = IMAGENET_MEAN
    normalize_std: tuple = IMAGENET_STD

    def __post_init__(self):
        if self.resize_mode not in RESIZE_MODES:
            raise ValueError(f"resize_mode must be one of {RESIZE_MODES}")
        if len(self.resize) != 2 or min(self.resize) < 32:
            raise ValueError("resize must be (height, width) with both >= 32")
        if not self.images:
            raise ValueError("no images to export")

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        images = tuple(
            ImageSpec(path=i["path"], label=i.get("label"), domain=i.get("domain", "source"))
            for i in doc["images"]
        )
        return cls(
            backbone=doc["backbone"],
            layer=doc["layer"],
            images=images,
            output_dir=doc["output_dir"],
            resize=tuple(doc.get("resize", (224, 224))),
            resize_mode=doc.get("resize_mode", "stretch"),
            checkpoint=doc.get("checkpoint"),
            seed=int(doc.get("seed", 0)),
            normalize_mean=tuple(doc.get("normalize_mean", IMAGENET_MEAN)),
            normalize_std=tuple(doc.get("normalize_std", IMAGENET_STD)),
        )


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _resolve_layer(model, backbone, layer):
    node = LAYER_ALIASES.get(backbone, {}).get(layer, layer)
    _, eval_nodes = get_graph_node_names(model)
    if node not in eval_nodes:
        raise ValueError(f"layer {layer!r} (node {node!r}) does not exist in {backbone}")
    return node


def build_extractor(cfg):
    """Instantiate the frozen backbone and return (extractor, node, checkpoint sha)."""
    torch.manual_seed(cfg.seed)
    model = get_model(cfg.backbone, weights=None)
    checkpoint_sha = None
    if cfg.checkpoint:
        state = torch.load(cfg.checkpoint, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        checkpoint_sha = _sha256(cfg.checkpoint)
    model.eval()
    node = _resolve_layer(model, cfg.backbone, cfg.layer)
    extractor = create_feature_extractor(model, return_nodes={node: "feature_map"})
    extractor.eval()
    return extractor, node, checkpoint_sha


def _load_image(cfg, path):
    with Image.open(path) as img:
        img = img.convert("RGB")
        h, w = cfg.resize
        if cfg.resize_mode == "stretch":
            img = img.resize((w, h), Image.BILINEAR)
        else:
            scale = max(h / img.height, w / img.width)
            img = img.resize((round(img.width * scale), round(img.height * scale)), Image.BILINEAR)
            left = (img.width - w) // 2
            top = (img.height - h) // 2
            img = img.crop((left, top, left + w, top + h))
        arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - np.array(cfg.normalize_mean, dtype=np.float32)) / np.array(cfg.normalize_std, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))[None, :, :, :]


def _normalize_grid(grid):
    """(H, W, D) float64 grid with unit spatial vectors; dead vectors point at axis 0."""
    grid = grid.astype(np.float64)
    norms = np.linalg.norm(grid, axis=2, keepdims=True)
    dead = norms[:, :, 0] < 1e-8
    if dead.any():
        grid[dead] = 0.0
        grid[dead, 0] = 1.0
        norms = np.linalg.norm(grid, axis=2, keepdims=True)
    return grid / norms


def export(cfg):
    """Export every configured image; returns the report dict.

    Writes one tensor per image plus ``manifest.json`` and
    ``export_report.json`` under ``cfg.output_dir``.
    """
    extractor, node, checkpoint_sha = build_extractor(cfg)
    os.makedirs(os.path.join(cfg.output_dir, "tensors"), exist_ok=True)

    threads = torch.get_num_threads()
    torch.set_num_threads(1)  # deterministic reductions; re-export must be byte-identical
    entries = []
    shape = None
    try:
        with torch.no_grad():
            for i, spec in enumerate(cfg.images):
                if not os.path.isfile(spec.path):
                    raise FileNotFoundError(f"image not found: {spec.path}")
                batch = _load_image(cfg, spec.path)
                out = extractor(batch)["feature_map"][0]  # (C, h, w)
                grid = _normalize_grid(out.numpy().transpose(1, 2, 0))
                if shape is None:
                    shape = grid.shape
                elif grid.shape != shape:
                    raise ValueError(
                        f"layer shape mismatch: {spec.path} gives {grid.shape}, expected {shape}"
                    )
                rel = f"tensors/{i:05d}_{os.path.splitext(os.path.basename(spec.path))[0]}.ugt"
                write_tensor(os.path.join(cfg.output_dir, rel), grid)
                entries.append(
                    {
                        "tensor": rel,
                        "label": spec.label if spec.domain == "source" else None,
                        "domain": spec.domain,
                    }
                )
    finally:
        torch.set_num_threads(threads)

    height, width, dim = shape
    write_manifest(os.path.join(cfg.output_dir, "manifest.json"), dim, height, width, entries)
    report = {
        "backbone": cfg.backbone,
        "layer": cfg.layer,
        "node": node,
        "checkpoint_sha256": checkpoint_sha,
        "seed": cfg.seed,
        "images": len(entries),
        "feature_shape": [int(height), int(width), int(dim)],
    }
    report_path = os.path.join(cfg.output_dir, "export_report.json")
    tmp = f"{report_path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, report_path)
    return report
