import sys

from fredholm_mc.harness.cli import main

sys.exit(main())
