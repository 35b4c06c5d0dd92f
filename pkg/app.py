"""
Point d'entrée de timedistill en ligne de commande.

Exemples :
    python app.py synth --out runs/data
    python app.py pretrain --config configs/synthetic.json --out runs/synthetic
    python app.py forecast --config configs/synthetic.json --checkpoint runs/synthetic/final.ckpt.json
    python app.py selftest
"""

import sys

from timedistill.cli import main

if __name__ == "__main__":
    sys.exit(main())
