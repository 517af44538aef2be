import sys

# Check that we're not running on an unsupported Python version.
if sys.version_info < (3, 9):
    print("advmark requires Python 3.9 or above.")
    sys.exit(1)

__version__ = "0.1.0"
