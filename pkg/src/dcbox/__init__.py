"""
dcbox - Deep Clustering Toolbox
Composable building blocks for deep clustering
"""

__version__ = "0.1.0"

from .config import parse_config
from .metrics import acc, nmi
from .models import RunConfig, RunReport
from .pipeline import run_case_study

__all__ = ["RunConfig", "RunReport", "acc", "nmi", "parse_config", "run_case_study"]
