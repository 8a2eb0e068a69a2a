"""Breast-MRI triage pipeline: preprocessing, slice-transformer classification,
ROC statistics at fixed sensitivity, attention explainability, and a rating
workflow, all runnable at desk scale on synthetic phantoms."""

__version__ = "0.1.0"
