"""
timedistill : apprentissage auto-supervisé de représentations de séries temporelles
par distillation enseignant/élève et contraste, suivi d'une tête de prévision ridge.
"""

__version__ = "0.1.0"
