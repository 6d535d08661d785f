"""Activation exporter: torch models to PSCA activation files."""

from .export import ExportSpec, LayerDescriptor, enumerate_layers, export_activations
from .format import LayerFileWriter, write_manifest

__version__ = "0.1.0"

__all__ = [
    "ExportSpec",
    "LayerDescriptor",
    "LayerFileWriter",
    "enumerate_layers",
    "export_activations",
    "write_manifest",
]
