"""weakseg: max-margin semantic labelling from mixed full and weak annotations.

Training couples a cutting-plane structural SVM with annotation-specific loss
functions for image-level labels, bounding boxes, and object seeds; inference
is alpha-expansion over min-cuts, extended with label costs and clique-OR
costs.  See README.md for the CLI and file formats.
"""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    BoundingBox,
    Edge,
    FullLabelling,
    Instance,
    LabelSpace,
    Model,
    Node,
    PixelGrid,
    Seed,
    WeakAnnotation,
    consistent_set_membership,
    generalized_features,
    score,
)
