"""Module entry point: ``python -m lqmfg …`` mirrors the ``lqmfg`` script."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
