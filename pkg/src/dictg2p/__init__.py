"""Dictionary-guided polyphone disambiguation with semantic-to-pronunciation attention."""

from .dictionary import Dictionary, load_dictionary, parse_dictionary, read_dictionary_text
from .encoders import EncoderConfig, build_key_store, read_key_file
from .evaluation import evaluate, per, ser
from .pipeline import (
    DictG2PModel,
    ModelConfig,
    infer_pronunciations,
    load_checkpoint,
    load_config,
    model_from_checkpoint,
    save_checkpoint,
    train,
    train_on_corpus,
)
from .s2pa import RuleSet, s2pa_forward
from .synthcorpus import emit_oracle_dictionary, generate_corpus, generate_spec

__version__ = "0.1.0"
