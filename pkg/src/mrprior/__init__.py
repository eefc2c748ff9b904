"""Compressed-sensing parallel MRI with learned and analytic priors.

Modules: ``grid`` (array files, centered DFTs), ``acquisition`` (masks,
phantoms, coils, forward model), ``priors``, ``scorenet`` (score network and
denoising score matching), ``recon`` (PICS and NLINV), ``phase_aug``,
``dataprep``, ``metrics``, ``experiment`` and ``cli``.
"""

__version__ = "0.1.0"
