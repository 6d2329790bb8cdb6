"""Rare-event gradient estimation: estimators, verification, a driving testbed and experiment tooling."""

__version__ = "0.1.0"
