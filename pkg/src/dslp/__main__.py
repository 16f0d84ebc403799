import sys

from dslp.cli import main

sys.exit(main())
