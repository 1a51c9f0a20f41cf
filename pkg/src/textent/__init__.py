"""Self-supervised entity representations from associated text.

Train a miniature transformer jointly over sentences and the entities they
describe (dual-encoder, extended-vocabulary, or hybrid objectives), then
rank entities for natural-language queries or predict tags, against
TF-IDF / bag-of-sentences / fixed-order baselines.
"""

from .encoder import (EncoderOutput, ModelConfig, ModelParams, compatibility,
                      embed_entity, encode, init_params, load_checkpoint,
                      mlm_logits, hybrid_mlm_logits, save_checkpoint)
from .errors import DataError, NumericError, TrainingDiverged
from .evaluation import (EvalConfig, RankedList, TfidfIndex, binarize, bos_rank,
                         mean_average_precision, mrr, ndcg_at_k, precision_at_k,
                         rank_items, recall_at_k, relevance, roc_auc,
                         top_tags_baseline, zero_shot_rank)
from .finetune import (FinetuneConfig, FinetuneResult, example_weight,
                       finetune_dual, finetune_full, predict_tag_scores,
                       run_finetune, sample_negatives, split_holdout)
from .numerics import (AdamState, adam_step, cross_entropy, grad_check,
                       layer_norm, softmax, value_and_grads)
from .objectives import (LossOutput, MaskedBatch, TrainingConfig, build_batch,
                         dual_loss, full_loss, hybrid_loss, mask_tokens, pretrain)
from .synthetic import SyntheticWorld, SyntheticWorldSpec, generate_synthetic
from .text import (CorpusExample, Query, TagVotes, Vocabulary, build_vocab,
                   extend_with_entities, preprocess, tokenize)

__version__ = "0.1.0"
