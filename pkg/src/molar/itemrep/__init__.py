from molar.itemrep.corpus import (CORPUS_SCHEMA, describe, generate_it_corpus, generate_sa_corpus,
                                  generate_ub_corpus, write_corpus)
from molar.itemrep.embfile import load_embeddings, load_external_embeddings, save_embeddings
from molar.itemrep.encoder import (EmbeddingCache, ItemEmbedding, ItemEncoder, batch_encode,
                                   encode_catalog, encode_item, parse_modality_mask,
                                   pretrain_alignment)
from molar.itemrep.records import (ItemRecord, read_items_jsonl, tokenize, tokenize_records,
                                   write_items_jsonl)

__all__ = [
    "CORPUS_SCHEMA", "EmbeddingCache", "ItemEmbedding", "ItemEncoder", "ItemRecord", "batch_encode",
    "describe", "encode_catalog", "encode_item", "generate_it_corpus", "generate_sa_corpus",
    "generate_ub_corpus", "load_embeddings", "load_external_embeddings", "parse_modality_mask",
    "pretrain_alignment", "read_items_jsonl", "save_embeddings", "tokenize", "tokenize_records",
    "write_corpus", "write_items_jsonl",
]
