import sys

from cshash.cli import main

sys.exit(main())
