"""Record framing, the note example schema, and corpus tools."""
from .corpus import CorpusStats, corpus_stats, generate_toy_corpus, read_corpus, write_corpus
from .example import NoteRecord, encode_example, parse_example
from .records import RecordError, read_records, write_records

__all__ = ["CorpusStats", "NoteRecord", "RecordError", "corpus_stats", "encode_example", "generate_toy_corpus",
           "parse_example", "read_corpus", "read_records", "write_corpus", "write_records"]
