"""
Test runner script for jamident.
Runs the unit tests with a coverage report; --slow adds the desk-scale
training trends. Those train three models on 2,400 images: the baseline
takes about 3.5 minutes on one CPU, masking-ensemble epochs cost about
2.4 times a baseline epoch and consistent-training epochs about 1.3 times.

Usage:
    python run_tests.py
    python run_tests.py --slow                   # Include desk-scale trend checks
    python run_tests.py --no-cov tests/test_tensor.py
    python -m pytest tests/test_diffnet.py       # Run specific test file
"""

import argparse
import os
import subprocess
import sys


def build_command(paths, coverage=True):
    """pytest command line for ``paths`` (default: the whole suite)."""
    cmd = [sys.executable, "-m", "pytest", *(paths or ["tests/"]), "-v"]
    if coverage:
        cmd += ["--cov=src", "--cov-report=term-missing", "--cov-report=html"]
    else:
        cmd += ["--no-cov"]
    return cmd


def run_tests(argv=None):
    """Run the suite and return pytest's exit code."""
    parser = argparse.ArgumentParser(description="Run the jamident test suite")
    parser.add_argument("paths", nargs="*", help="test files or node ids")
    parser.add_argument("--slow", action="store_true", help="run the desk-scale trend checks too")
    parser.add_argument("--no-cov", action="store_true", help="skip the coverage report")
    args = parser.parse_args(argv)

    env = dict(os.environ)
    if args.slow:
        env["JAMIDENT_SLOW_TESTS"] = "1"

    print("=" * 70)
    print("Running jamident Test Suite" + (" (with desk-scale trends)" if args.slow else ""))
    print("=" * 70)
    print()

    result = subprocess.run(build_command(args.paths, not args.no_cov), env=env,
                            stdin=sys.stdin, stdout=sys.stdout, stderr=sys.stderr)

    print()
    print("=" * 70)
    if result.returncode == 0:
        print("✓ All tests passed!")
        if not args.no_cov:
            print("Coverage report generated in htmlcov/index.html")
    else:
        print("✗ Some tests failed!")
    print("=" * 70)

    return result.returncode


if __name__ == "__main__":
    sys.exit(run_tests())
