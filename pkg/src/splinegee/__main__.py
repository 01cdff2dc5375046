import sys

from splinegee.cli import main

sys.exit(main())
