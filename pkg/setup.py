"""Build script: compiles the optional geometry extension.

The package works without the extension (a pure-Python twin of every
kernel is selected at import time), so a failed compile only costs speed.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "coopbev.geometry._kernels_cy",
                ["src/coopbev/geometry/_kernels_cy.pyx"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except Exception:
    extensions = []

setup(ext_modules=extensions)
