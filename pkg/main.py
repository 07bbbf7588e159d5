#!/usr/bin/env python3
"""
Compatibility shim so `python main.py <command>` works from a repo checkout.

The application itself lives in catch_prolong/main.py and is also available
as the `catch-prolong` console script after `pip install -e .`.
"""

import sys

from catch_prolong.main import main

if __name__ == "__main__":
    sys.exit(main())
