import sys
from pathlib import Path

# src レイアウトのまま実行できるようにパスを通す
sys.path.insert(0, str(Path(__file__).parent / "src"))

from gco.app import main

if __name__ == "__main__":
    sys.exit(main())
