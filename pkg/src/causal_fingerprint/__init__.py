"""Causal state-space signatures for subject and task fingerprinting of multichannel time series."""
from .errors import InputError, LoadError, NumericalError, RankDeficiencyError
from .fingerprint import (IdReport, Protocol, SignatureDatabase, SubjectFingerprint,
                          build_database, evaluate_subject_id, fc_matrix, identify, identify_fc,
                          identify_fn)
from .ingest import (CorpusManifest, PartitionSpec, Recording, load_corpus, load_manifest,
                     load_recording, normalize, partition)
from .modal import ModalFeatures, ModeMatch, decompose, match_modes, modal_distance, mode_similarity
from .synth import CohortSpec, GroundTruthSystem, generate_cohort, sample_system, simulate
from .sysid import (CausalSignature, FitConfig, SignatureExtractor, TwoTimescaleModel,
                    build_regression_blocks, fit_signature, residual_of)

__version__ = "0.1.0"
