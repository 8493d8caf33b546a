"""Complementarity-based rigid contact: viscous and no-slip models.

Modules
-------
matrixcore
    Cholesky factors with append/remove updates, block-diagonal inertia,
    multiply-accumulate instrumentation.
lcpkit
    LCP/MLCP types, Schur reduction, the modified principal pivoting
    solver, Lemke and enumeration baselines, text serialization.
contactmodels
    Viscous and no-slip MLCP assembly, row selection, friction-pyramid LCP.
rigidsim
    Rigid bodies, contact generation and time stepping.
benchcli
    Scenario runner and command-line harness.
"""

__version__ = "0.1.0"
