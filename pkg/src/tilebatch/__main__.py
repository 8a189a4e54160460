import sys

from tilebatch.cli import main

sys.exit(main())
