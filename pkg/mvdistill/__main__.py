import sys

from mvdistill.main import main

sys.exit(main(sys.argv[1:]))
