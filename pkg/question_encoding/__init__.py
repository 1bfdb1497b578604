# Question Encoding Module
from .main import (
    DimensionMismatch,
    DuplicateId,
    EmbeddingSource,
    EmptyQuestion,
    MalformedFile,
    QuestionEmbedding,
    QuestionEncodingError,
    load_embeddings,
    toy_embed,
    write_embeddings,
)
