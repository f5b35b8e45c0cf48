"""Context-consistency detection of adversarial feature perturbations
against a frozen two-stage detector stand-in, on synthetic scene corpora."""

__version__ = "0.1.0"
