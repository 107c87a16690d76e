import sys

from latentdiag.cli import main

sys.exit(main())
