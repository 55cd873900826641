"""
Centralized domain type imports for the LVA toolkit.

This module provides a single import location for the types defined in the
per-area packages, so callers can write

    from models import Mlp, PairedDataset, TheoryReport

instead of importing from networks.models, datasets.models,
adaptation.models and benchmarks.models separately.

Note: The actual definitions remain in their respective packages.
"""

from adaptation.models import LayerDelta, ResidueVariant, TheoryReport, TransferalResidue
from benchmarks.models import (
    BenchMethod,
    BenchmarkOutcome,
    BenchResult,
    BlurSpec,
    DeblurBenchSettings,
    SignalBenchSettings,
    SignalDomain,
    SignalSpec,
)
from datasets.models import Alignment, ImageTensor, JointMetric, PairedDataset, PatchMatrix
from networks.models import (
    Activation,
    ActivationKind,
    Cnn,
    ConvKernel,
    ConvLayer,
    Layer,
    LipschitzProfile,
    Mlp,
)


__all__ = [
    'Activation',
    'ActivationKind',
    'Alignment',
    'BenchMethod',
    'BenchmarkOutcome',
    'BenchResult',
    'BlurSpec',
    'Cnn',
    'ConvKernel',
    'ConvLayer',
    'DeblurBenchSettings',
    'ImageTensor',
    'JointMetric',
    'Layer',
    'LayerDelta',
    'LipschitzProfile',
    'Mlp',
    'PairedDataset',
    'PatchMatrix',
    'ResidueVariant',
    'SignalBenchSettings',
    'SignalDomain',
    'SignalSpec',
    'TheoryReport',
    'TransferalResidue',
]
