"""Two-phase porous-media flow with surface tension by linearised minimising movements."""
from .fields import Grid, PhasePair
from .kernels import HeatKernel, heat_content
from .bfm import BfmOptions, solve_dual
from .jko import StepConfig, Potential, gravity, ripping, jko_step, run_flow

__all__ = ["Grid", "PhasePair", "HeatKernel", "heat_content", "BfmOptions", "solve_dual",
           "StepConfig", "Potential", "gravity", "ripping", "jko_step", "run_flow"]
__version__ = "0.1.0"
