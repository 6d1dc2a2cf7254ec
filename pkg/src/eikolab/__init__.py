"""Numerical laboratory for entropy defect measures of divergence-free unit
vector fields with bounded angular lifting.

The package is organized around a pipeline:

    fields         grid-sampled lifted fields and validity checks
    kinetic        hypograph indicators and the entropy defect measure
    transport      exact W1 plans, duality certificates, building-block steps
    lagrangian     characteristic curve ensembles and error functionals
    rectifiability sector covers, defect pairing, shock curves, concentration
    cli            file-based pipeline driver
"""

from eikolab.fields import LiftedField, load_field, make_builtin
from eikolab.measures import DiscreteMeasure

__all__ = ["LiftedField", "load_field", "make_builtin", "DiscreteMeasure"]

__version__ = "0.1.0"
