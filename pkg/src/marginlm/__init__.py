"""LSTM language modeling with large-margin softmax heads and
word-vector norm scaling."""

__version__ = "0.1.0"
