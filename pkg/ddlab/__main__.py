"""Allow `python -m ddlab ...`."""
import sys

from ddlab.cli.ddlabctl import main

if __name__ == "__main__":
    sys.exit(main())
