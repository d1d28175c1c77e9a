"""Desk-scale open-vocabulary segmentation with mask-adapted image encoding."""

__version__ = "0.1.0"

from .classify import class_probs, ensemble
from .encoder import (DEFAULT_TEMPLATES, EncoderConfig, EncoderState, Vocabulary,
                      apply_mask_prompts, embed_text, encode_image, load_text_table)
from .mining import extract_nouns, match_pairs, mine_dataset
from .pipeline import EvalReport, fuse, miou, oracle_class_analysis, oracle_mask_analysis, segment
from .preprocess import EmptyMaskError, MaskedCrop, condense_mask, crop_resize_mask, tight_bbox
from .tuning import PairBatch, TrainConfig, pair_grads, pair_loss, train

__all__ = [
    "DEFAULT_TEMPLATES", "EmptyMaskError", "EncoderConfig", "EncoderState",
    "EvalReport", "MaskedCrop", "PairBatch", "TrainConfig", "Vocabulary",
    "apply_mask_prompts", "class_probs", "condense_mask", "crop_resize_mask",
    "embed_text", "encode_image", "ensemble", "extract_nouns", "fuse",
    "load_text_table", "match_pairs", "mine_dataset", "miou",
    "oracle_class_analysis", "oracle_mask_analysis", "pair_grads", "pair_loss",
    "segment", "tight_bbox", "train",
]
