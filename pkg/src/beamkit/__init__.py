"""beamkit: desk-scale accelerator optics toolkit.

Truncated power series algebra with parameters (knobs), differential
algebra maps, lattice building with a MAD-X-flavored input language,
survey/track/twiss engines, nonlinear normal forms with resonance driving
terms, and a constrained matching optimizer.  A CLI exposes the commands
and a framed pipe protocol for external script clients.
"""

from .tpsa import Descriptor, Tpsa, descriptor, lincomb, analytic
from .damap import DaMap
from .geom import Frame, Misalignment, rot_from_angles, patch_restore, survey_advance
from .lattice import (Beam, BLine, Element, Env, Repeat, Sequence,
                      build_sequence, seq_from_line, expand_bline,
                      env_bind_knobs, env_restore_knobs)
from .mtable import MTable, read_tfs, write_tfs
from .engine import track, survey, TrackState
from .optics import cofind, twiss, normal, NormalForm, rdt_along
from .matching import match, MatchResult, Variable, Equality
from .latparse import parse, unparse, execute, ParseError

__version__ = "0.1.0"

__all__ = [
    "Descriptor", "Tpsa", "descriptor", "lincomb", "analytic",
    "DaMap",
    "Frame", "Misalignment", "rot_from_angles", "patch_restore", "survey_advance",
    "Beam", "BLine", "Element", "Env", "Repeat", "Sequence",
    "build_sequence", "seq_from_line", "expand_bline",
    "env_bind_knobs", "env_restore_knobs",
    "MTable", "read_tfs", "write_tfs",
    "track", "survey", "TrackState",
    "cofind", "twiss", "normal", "NormalForm", "rdt_along",
    "match", "MatchResult", "Variable", "Equality",
    "parse", "unparse", "execute", "ParseError",
]
