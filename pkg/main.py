# 禁止生成 .pyc 文件
import sys
sys.dont_write_bytecode = True

from binttp.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
