import sys

from dtcnsim.application import main


if __name__ == "__main__":
    sys.exit(main())
