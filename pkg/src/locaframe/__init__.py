"""O(3) representations, local-frame canonicalization and tensorial message passing on numpy."""
from .group import GroupElement, identity, random_reflection, random_rotation
from .reps import RepSpec, apply_rep, decompose_cartesian, parse_repspec, wigner_d
from .frames import LocalFrames, canonicalize, compute_frames, decanonicalize, transition
from .model import ModelConfig, build_model, forward, make_graph

__version__ = "0.1.0"

__all__ = [
    "GroupElement",
    "identity",
    "random_rotation",
    "random_reflection",
    "RepSpec",
    "parse_repspec",
    "apply_rep",
    "wigner_d",
    "decompose_cartesian",
    "LocalFrames",
    "compute_frames",
    "transition",
    "canonicalize",
    "decanonicalize",
    "ModelConfig",
    "build_model",
    "forward",
    "make_graph",
]
