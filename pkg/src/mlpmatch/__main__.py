import sys

from mlpmatch.cli import main

sys.exit(main())
