"""
Hiérarchie d'exceptions commune à tout le package.
Les exceptions propres à un module (ingestion, checkpoint, config...) héritent de celles-ci.
"""


class TimedistillError(Exception):
    """Exception de base de timedistill."""
    pass


class DimensionError(TimedistillError):
    """Exception levée lorsque les dimensions de deux tenseurs sont incompatibles."""
    pass


class ParameterError(TimedistillError):
    """Exception levée lorsqu'un paramètre sort de son domaine de validité."""
    pass


class UsageError(TimedistillError):
    """Exception levée lorsqu'une fonction est appelée dans un état qui ne le permet pas."""
    pass


class NumericError(TimedistillError):
    """Exception levée lorsqu'un calcul produit une valeur non finie (NaN/Inf)."""
    pass


class SizingError(TimedistillError):
    """Exception levée lorsqu'une série ou un split est trop court pour la fenêtre demandée."""
    pass
