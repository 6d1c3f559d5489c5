import sys

from cvaerec.main import main

sys.exit(main())
