"""Robustness benchmark for volumetric segmentation.

Exposes the volume data model, the lattice segmentation network, the
adversarial attack ensemble, standard and free adversarial training, tiled
whole-volume inference, and the benchmark orchestration used by the
``rogbench`` command line tool.
"""

__version__ = "0.1.0"
