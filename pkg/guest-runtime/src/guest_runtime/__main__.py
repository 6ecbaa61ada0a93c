"""Allow ``python -m guest_runtime BOOT_FILE PACKAGE_DIR``."""

import sys

from .runtime import main

if __name__ == "__main__":
    sys.exit(main())
