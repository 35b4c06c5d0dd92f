import sys

from timedistill.cli import main

sys.exit(main())
