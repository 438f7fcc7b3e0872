"""spgra2seq — sketch representations from synonymous-proximity patch graphs.

A numpy-only pipeline: stroke-5 parsing and rasterization, patch cropping
and masking, patch graphs, a small reverse-mode autodiff engine, the
CNN/GCN/LSTM model, online clustering, training and evaluation.
"""

__version__ = "0.1.0"
