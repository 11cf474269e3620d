#!/usr/bin/env python

import os.path
from setuptools import setup

# We use the README as the long_description
readme = open(os.path.join(os.path.dirname(__file__), "README.rst")).read()

setup(
    name="codealign",
    version="0.1.0",  # also edit codealign/__init__.py when editing this
    description="Align medical-code embeddings across institutions.",
    long_description=readme,
    long_description_content_type="text/x-rst",
    license="MIT",
    zip_safe=False,
    packages=["codealign"],
    install_requires=[
        "numpy>=1.20",
        "scipy>=1.7",
        "scikit-learn>=1.3",
        "pandas>=1.3",
        "PyYAML>=5.4",
        "requests>=2.25",
        "matplotlib>=3.4",
    ],
    entry_points={"console_scripts": ["codealign = codealign.main:main"]},
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
    ],
)
