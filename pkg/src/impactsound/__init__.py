"""Impact sound analysis, synthesis and visually driven prediction."""
from .cochlea import (Cochleagram, CochleagramTransformer, Filterbank, PcaTransform, SoundPCA,
                      build_filterbank, pca_fit, pca_invert, pca_project, subband_envelopes)
from .evalkit import (LinearSVMClassifier, class_averaged_accuracy, detection_ap, loudness,
                      spectral_centroid)
from .onset import OnsetList, detect_onsets, extract_clip
from .signal_io import (FeatureSequence, FormatError, UnsupportedFormatError, Waveform,
                        read_waveform, write_waveform)
from .synthesis import (ColoringTransform, ExemplarDatabase, build_exemplar_db,
                        detect_and_transfer, parametric_invert)

__version__ = "0.1.0"

__all__ = [
    "Cochleagram", "CochleagramTransformer", "ColoringTransform", "ExemplarDatabase",
    "FeatureSequence", "Filterbank", "FormatError", "LinearSVMClassifier", "OnsetList",
    "PcaTransform", "SoundPCA", "UnsupportedFormatError", "Waveform", "build_exemplar_db",
    "build_filterbank", "class_averaged_accuracy", "detect_and_transfer", "detect_onsets",
    "detection_ap", "extract_clip", "loudness", "parametric_invert", "pca_fit", "pca_invert",
    "pca_project", "read_waveform", "spectral_centroid", "subband_envelopes", "write_waveform",
]
