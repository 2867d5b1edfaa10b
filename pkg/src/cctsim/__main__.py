import sys

from cctsim.cli import main

sys.exit(main())
