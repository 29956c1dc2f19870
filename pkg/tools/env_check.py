#!/usr/bin/env python3
"""
Utility to verify the Python environment splat-align runs in.
This helps debug environment-specific issues (missing packages, BLAS threads).
"""
import os
import sys
from importlib import metadata
from pathlib import Path

REQUIRED_PACKAGES = ('click', 'numpy', 'plyfile', 'pytest', 'coverage', 'hypothesis')
OPTIONAL_PACKAGES = ('google-cloud-logging',)
THREAD_VARIABLES = ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS')


def check_python_executable():
    """Check the current Python executable and its environment."""
    print("🐍 Python Environment Check")
    print("=" * 40)
    print(f"Python executable: {sys.executable}")
    print(f"Python version: {sys.version}")
    if sys.version_info < (3, 9):
        print("⚠️  splat-align needs Python 3.9 or newer")
    print()


def check_packages():
    """Check that every package from requirements.txt is importable. Returns the missing ones."""
    print("📦 Package Check")
    print("=" * 40)
    missing = []
    for name in REQUIRED_PACKAGES + OPTIONAL_PACKAGES:
        try:
            print(f"✅ {name}: {metadata.version(name)}")
        except metadata.PackageNotFoundError:
            if name in OPTIONAL_PACKAGES:
                print(f"⚠️  {name}: not installed (cloud logging disabled)")
            else:
                print(f"❌ {name}: not installed")
                missing.append(name)
    print()
    return missing


def check_numerics():
    """Report the float64 and BLAS settings training depends on."""
    print("🔢 Numerics")
    print("=" * 40)
    try:
        import numpy as np
    except ImportError:
        print("❌ numpy unavailable, skipping")
        print()
        return
    info = np.finfo(np.float64)
    print(f"float64 eps: {info.eps:.3e}")
    for var in THREAD_VARIABLES:
        print(f"{var}: {os.environ.get(var, 'unset')}")
    print()


def check_environment_compatibility():
    """Check where we are running and whether the project files are in reach."""
    print("🌍 Environment Compatibility")
    print("=" * 40)

    if hasattr(sys, 'real_prefix') or (hasattr(sys, 'base_prefix') and sys.base_prefix != sys.prefix):
        print("✅ Virtual environment detected")
    else:
        print("⚠️  Not in a virtual environment")

    if os.path.exists('/.dockerenv'):
        print("🐳 Docker container detected")
    elif os.environ.get('BUILDER_OUTPUT'):
        print("☁️  Cloud Build detected")
    else:
        print("💻 Local environment")

    print(f"📂 Working directory: {os.getcwd()}")
    for name in ('requirements.txt', 'splat-align.py'):
        if Path(name).exists():
            print(f"✅ {name} found")
        else:
            print(f"⚠️  {name} not found")
    print()


def main():
    """Run all environment checks."""
    print("🔍 splat-align - Environment Diagnostic")
    print("=" * 60)
    print()

    check_python_executable()
    missing = check_packages()
    check_numerics()
    check_environment_compatibility()

    if missing:
        print(f"❌ Missing packages: {', '.join(missing)}")
        return 1
    print("✨ Diagnostic complete!")
    return 0


if __name__ == '__main__':
    sys.exit(main())
