"""Seed-deterministic simulation of privacy-preserving federated learning
for user-level binary text classification.

Subpackages cover the full pipeline: corpus ingestion and synthesis
(`corpus`), feature hashing (`features`), the logistic-regression client
model (`model`), federated orchestration (`fedcore`), client-level
differential privacy (`privacy`), evaluation and attribution (`analysis`),
and the config-driven experiment runner (`experiment`, `cli`).
"""

__version__ = "0.1.0"
