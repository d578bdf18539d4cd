"""Entry point for `python -m gridner`."""

import sys

from gridner.main import main

sys.exit(main())
