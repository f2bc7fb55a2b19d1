"""BiLSTM-CRF sequence labelling over stacked word-vector and character-LM embeddings."""

__version__ = "0.1.0"
