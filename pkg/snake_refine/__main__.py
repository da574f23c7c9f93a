import sys

from snake_refine.cli import main

sys.exit(main())
