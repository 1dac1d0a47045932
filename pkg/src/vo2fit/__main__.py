import sys

from vo2fit.cli import main

sys.exit(main())
