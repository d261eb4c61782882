import sys

from NAAS.cli import main

sys.exit(main())
