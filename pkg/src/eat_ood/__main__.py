import sys

from eat_ood.main import main

if __name__ == "__main__":
    sys.exit(main())
