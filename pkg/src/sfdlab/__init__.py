"""Score forgetting distillation on two-dimensional Gaussian-mixture teachers.

A one-step generator is distilled from a class-conditional score oracle
while one class is steered onto another, without ever sampling the data.
"""
from importlib.metadata import PackageNotFoundError, version as _version

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .gmm import ClassRoles, GmmSpec, GmmTeacher, default_spec
from .schedule import Schedule, build_schedule
from .trainer import SfdConfig, Trainer, run_joint, run_kl, run_two_stage

__all__ = ["ClassRoles", "GmmSpec", "GmmTeacher", "default_spec", "Schedule", "build_schedule",
           "SfdConfig", "Trainer", "run_joint", "run_kl", "run_two_stage", "__version__"]
