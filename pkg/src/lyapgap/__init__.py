"""Singular value gaps of randomly perturbed matrix products.

Submodules
----------
matcore
    Small dense linear algebra: SVD, angles, subspace distances, oblique projections.
cocycle
    Matrix sequences, the uniform perturbation model and stable product accumulation.
targets
    Certified target blocks carrying a prescribed singular value gap.
gluing
    The gluing statistic and Monte Carlo checks of its tail and mean.
harness
    Sequence generators, experiments, bookkeeping and the constants calculator.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AccumulationError,
    CertificationError,
    DegenerateSumError,
    DomainError,
    InvertibilityError,
    LyapGapError,
    PreconditionError,
    SequenceFormatError,
)

__all__ = [
    "__version__",
    "AccumulationError",
    "CertificationError",
    "DegenerateSumError",
    "DomainError",
    "InvertibilityError",
    "LyapGapError",
    "PreconditionError",
    "SequenceFormatError",
]
