import sys

from fluidsched.main import main

sys.exit(main())
