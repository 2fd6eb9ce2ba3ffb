"""Bridge from images to the ugt pipeline's tensor and manifest formats."""

from .export import ExportConfig, ImageSpec, build_extractor, export
from .formats import read_tensor, write_manifest, write_tensor

__version__ = "0.1.0"
