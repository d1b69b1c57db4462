"""Desk-scale dynamic-graph risk recognition and risk-propagation analysis.

Subpackages:
  graphs    -- edge-list ingestion, snapshot bucketing, labels
  tape      -- dense f64 matrices with a reverse-mode gradient tape
  encoder   -- separable-kernel spatio-temporal graph encoder
  risk      -- FC + BatchNorm head, Gaussian-mixture loss, AUC
  causality -- sparse VAR, lag selection, PCC/PDC effects, LRT
  train     -- the training/evaluation harness behind the CLI
  cli       -- command-line entry point (ingest/train/sweep/analyze/report)
"""

__version__ = "0.1.0"
