import sys

from sdd.main import main

sys.exit(main())
