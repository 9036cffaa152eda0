"""Whitening-coloring refinement of CNN feature maps as an adversarial defense.

Modules: :mod:`autodiff` (tensors and reverse-mode gradients), :mod:`model`
(tapped classifier), :mod:`wct` (channel statistics, whitening, coloring),
:mod:`gallery` (nearest-neighbor references), :mod:`attacks`,
:mod:`defense`, :mod:`evaluation` (experiment grids), :mod:`pipeline` and
:mod:`cli`.
"""

__version__ = "0.1.0"
