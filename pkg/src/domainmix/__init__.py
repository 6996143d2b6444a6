"""DomainMix at desk scale: mixing labeled synthetic and unlabeled real data for
domain-generalizable retrieval features, on a numpy-only toy benchmark."""

__version__ = "0.1.0"
