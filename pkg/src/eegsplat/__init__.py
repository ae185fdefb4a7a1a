"""EEG-to-3D scene toolkit.

Subpackages and modules:

* :mod:`eegsplat.eeg` -- loading, windowing and band-pass filtering of EEG segments
* :mod:`eegsplat.graph_attention` -- multi-head attention over an electrode graph
* :mod:`eegsplat.losses` -- contrastive, margin and sequence objectives with gradients
* :mod:`eegsplat.layout` -- bounding-box scene layouts from text
* :mod:`eegsplat.gaussians` -- differentiable Gaussian splatting
* :mod:`eegsplat.sds` -- guidance-driven two-stage optimisation
* :mod:`eegsplat.metrics` -- Chamfer, EMD, ROUGE-1, BLEU
"""

__version__ = "0.1.0"
