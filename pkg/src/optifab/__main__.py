import sys

from optifab.cli import main

sys.exit(main())
