"""Radiomics feature extraction and test-retest repeatability analysis.

The package is organized as a pipeline over volumetric image + mask inputs:

- :mod:`radrep.volume_io` loads NRRD-subset volumes and binary masks.
- :mod:`radrep.preprocess` normalizes intensities and applies the filter
  catalog (original, LoG, wavelet subbands, square, squareroot, logarithm,
  exponential).
- :mod:`radrep.discretize` quantizes ROI intensities with a fixed bin width.
- :mod:`radrep.texture_matrices` builds GLCM / GLRLM / GLSZM matrices.
- :mod:`radrep.features` computes first-order, shape, and texture features.
- :mod:`radrep.repeatability` computes ICC(1,1) tables and the analysis
  suite (bin-width spread, KDE, rank distributions, top-k, filter
  frequency, configuration deltas).
- :mod:`radrep.pipeline` / :mod:`radrep.cli` orchestrate batch extraction
  to CSV and drive the analysis reports.
"""

__version__ = "0.1.0"


class RadrepError(Exception):
    """Base class for all errors raised by this package."""
