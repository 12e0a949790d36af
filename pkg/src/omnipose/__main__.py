import sys

from omnipose.cli import main

sys.exit(main())
