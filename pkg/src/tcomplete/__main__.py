"""Entry point for ``python -m tcomplete``."""

import sys

from .cli import main

sys.exit(main())
