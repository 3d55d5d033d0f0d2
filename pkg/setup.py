#!/usr/bin/env python3

# Copyright 2024- ssmpeft developers.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import io
import os

import setuptools


def read(fname):
    file_path = os.path.join(os.path.dirname(__file__), fname)
    with io.open(file_path, encoding="utf-8") as f:
        return f.read()


version = None
for line in read("ssmpeft/__init__.py").split("\n"):
    if line.startswith("__version__"):
        version = line.split("=")[-1].strip()[1:-1]
assert version


setuptools.setup(
    name="ssmpeft",
    version=version,
    description="State-space sequence layers with parameter-efficient fine-tuning adapters.",
    long_description=read("README.rst"),
    author="ssmpeft developers",
    license="Apache License Version 2.0",
    packages=setuptools.find_packages(exclude=["tests"]),
    package_data={
        "ssmpeft": [
            "etc/*.yaml",
            "etc/schema/*.json",
            "etc/experiments/*.json",
            "etc/experiments/*.yaml",
        ]
    },
    python_requires=">=3.8",
    install_requires=[
        "jsonschema",
        "numpy",
        "pandas",
        "PyYAML",
    ],
    tests_require=[
        "pytest",
    ],
    test_suite="tests",
    entry_points={
        "console_scripts": [
            "ssmpeft = ssmpeft.__main__:main",
        ]
    },
    zip_safe=False,
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: Apache Software License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: Implementation :: CPython",
        "Operating System :: OS Independent",
    ],
)
