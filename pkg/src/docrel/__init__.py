"""Document-level relation extraction with context-pooled mentions and
entity-pair graph reasoning, on pluggable (mock or precomputed) encoder
outputs."""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    Document,
    Entity,
    Mention,
    RelationFact,
    SynthConfig,
    insert_markers,
    load_corpus,
    parse_docred,
    save_corpus,
    synth_corpus,
)
from .encoder import EncodedDocument, encode_windows, load_encoding, mock_encode, save_encoding  # noqa: F401
from .model import ModelConfig, ModelParams, document_features, init_params, predict_document  # noqa: F401
from .training import TrainConfig, gradcheck, load_checkpoint, prepare_features, save_checkpoint, train  # noqa: F401
from .metrics import full_report, ign_f1, infer_f1, intra_inter_f1, micro_f1  # noqa: F401
