from .shim import shim_main

if __name__ == "__main__":
    raise SystemExit(shim_main())
