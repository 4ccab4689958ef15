import sys

from keypatch.cli import main

sys.exit(main())
