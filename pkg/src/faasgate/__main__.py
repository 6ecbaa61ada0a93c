"""``python -m faasgate`` dispatches to the role entry points."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
