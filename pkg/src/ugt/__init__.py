"""Domain-robust compositional vMF classification over feature-map tensors."""

from .adapt import AdaptConfig, AdaptReport, SimilarityReport, adapt_dictionary, kernel_similarity_report, penalized_log_likelihood
from .bundle import ModelBundle, bundle_hash, load_bundle, save_bundle
from .classifier import (
    GenerativeModel,
    OcclusionModel,
    SpatialCoefficients,
    assign_mixtures,
    batch_classify,
    class_log_likelihood,
    classify,
    fit_background_model,
    fit_spatial_coefficients,
    occluded_log_likelihood,
)
from .errors import (
    DegenerateClusterError,
    ManifestError,
    NumericalError,
    TensorFormatError,
    UgtError,
    ValidationError,
)
from .finetune import (
    FinetuneConfig,
    Gradients,
    PseudoLabel,
    PseudoLabelSet,
    finetune_rounds,
    finetune_spatial,
    gce_loss,
    gradient_finetune,
    pseudo_label,
    spatial_reg_loss,
    total_loss_and_gradients,
    vmf_reg_loss,
)
from .manifest import DatasetManifest, ManifestEntry, load_feature_map, load_manifest, save_manifest, validate_files
from .pipeline import PipelineConfig, evaluate, run_pipeline
from .synth import (
    DomainPairSpec,
    GenerationRecord,
    GroundTruth,
    SynthDataset,
    brute_force_class_likelihood,
    inject_occlusion,
    make_domain_pair,
    sample_feature_map,
    sample_vmf,
)
from .tensorio import read_tensor, write_tensor
from .types import FeatureMap, LikelihoodMap, OcclusionMask, VmfDictionary
from .vmf import (
    EmConfig,
    em_fit_dictionary,
    likelihood_map,
    mixture_log_likelihood,
    posterior_responsibilities,
    spherical_kmeans,
    vmf_log_density,
)

__version__ = "0.1.0"
