"""Template-based anthropometric measurement from 3D body scans.

The pipeline registers a parametric body template to a scan with non-rigid
ICP, reads lengths of fixed vertex loops off the fitted template and maps
those lengths to tape measurements with per-measurement regressors.
"""
from .errors import MorphofitError
from .mesh import TriMesh, load_obj, save_obj
from .nricp import NricpConfig, Landmarks, register
from .pipeline import FitOutcome, fit_scan
from .template import ParametricTemplate, generate_synthetic_template, load_template, save_template

__version__ = "0.1.0"

__all__ = [
    "MorphofitError", "TriMesh", "load_obj", "save_obj", "NricpConfig", "Landmarks", "register",
    "FitOutcome", "fit_scan", "ParametricTemplate", "generate_synthetic_template", "load_template",
    "save_template",
]
