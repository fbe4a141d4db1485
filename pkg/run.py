"""
TensorFact - Main Entry Point
"""

import sys
from pathlib import Path

# Add the current directory to Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from src.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
