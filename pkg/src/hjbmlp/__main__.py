import sys

from hjbmlp.cli import main

sys.exit(main())
