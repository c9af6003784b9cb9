import sys

from fleetdspl.cli import main

sys.exit(main())
