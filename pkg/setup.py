#!/usr/bin/env python3
"""
utap-lab - Setup
Package definition; runtime dependencies come from requirements.txt
"""

from pathlib import Path

from setuptools import find_packages, setup

HERE = Path(__file__).parent


def read_requirements():
    lines = (HERE / "requirements.txt").read_text().splitlines()
    return [line.strip() for line in lines
            if line.strip() and not line.startswith("#") and not line.startswith("pytest")]


setup(
    name="utap-lab",
    version="0.1.0",
    description="Universal adversarial perturbations against a pool of small vision transformers",
    packages=find_packages(include=["src", "src.*"]),
    py_modules=["app", "config"],
    python_requires=">=3.9",
    install_requires=read_requirements(),
    extras_require={"test": ["pytest>=7.4.0,<9.0.0"]},
    entry_points={"console_scripts": ["utap-lab=app:main"]},
)
