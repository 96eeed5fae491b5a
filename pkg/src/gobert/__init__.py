"""Ontology-informed gene-function pretraining toolkit."""

__version__ = "0.1.0"
