import sys

from memloom.cli import main

sys.exit(main())
